"""Binary PGM (P5, 8-bit) reading and writing, plus image tiling."""

from __future__ import annotations

import numpy as np

from .errors import BadMagic, TruncatedFile


def _tokens(raw: bytes, count: int, pos: int):
    out = []
    while len(out) < count:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise TruncatedFile("PGM header is incomplete")
        out.append(raw[start:pos])
    return out, pos + 1  # exactly one whitespace byte before the raster


def read_pgm(path) -> np.ndarray:
    """(H, W) array scaled to [0, 1]."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] != b"P5":
        raise BadMagic("not a binary PGM file")
    (w, h, maxval), pos = _tokens(raw, 3, 2)
    w, h, maxval = int(w), int(h), int(maxval)
    if not 0 < maxval < 256:
        raise ValueError("only 8-bit PGM is supported")
    if len(raw) < pos + w * h:
        raise TruncatedFile(f"PGM raster has {len(raw) - pos} bytes, expected {w * h}")
    body = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos)
    return body.reshape(h, w).astype(np.float64) / maxval


def to_bytes(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(img, dtype=float), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path, img: np.ndarray):
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    if img.ndim != 2:
        raise ValueError(f"PGM needs a single-channel (H, W) image, got {img.shape}")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(to_bytes(img).tobytes())


def tile(images: np.ndarray, cols: int | None = None, pad: int = 1) -> np.ndarray:
    """Lay out (N, H, W) or (N, 1, H, W) images left to right, top to bottom."""
    images = np.asarray(images, dtype=float)
    if images.ndim == 4:
        images = images[:, 0]
    n, h, w = images.shape
    cols = n if cols is None else cols
    rows = -(-n // cols)
    out = np.zeros((rows * (h + pad) - pad, cols * (w + pad) - pad))
    for i in range(n):
        r, c = divmod(i, cols)
        out[r * (h + pad):r * (h + pad) + h, c * (w + pad):c * (w + pad) + w] = images[i]
    return out
