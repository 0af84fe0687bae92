"""Differentiable image warping (the spatial-transformer layer).

Convention: ``spatial_transform(img, params)`` returns ``out(p) = img(T(p))``,
i.e. the sampling grid is moved by ``T`` and the source is read there.
Warping with ``params`` and then with the inverse parameters restores the
image up to interpolation error.

Affine kinds act on the square ``[-1, 1]^2``; CPAB acts on ``[0, 1]^2``.
``x`` runs along image columns and ``y`` along rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import cpab, transforms
from . import tensor as T
from .errors import ShapeMismatch, UnsupportedInverse
from .tensor import Tensor, as_tensor

KINDS = ("affine", "affine-decomp", "affine-diffeo", "cpab")
SIGNED = "[-1,1]"
UNIT = "[0,1]"
SNAP_TOL = 1e-9


@dataclass
class TransformParams:
    """A transformation of one of the four kinds.

    ``values`` is (P,) or (B, P).  ``inverted`` only matters for
    ``affine-decomp``; ``basis`` and ``steps`` only for ``cpab``.
    """

    kind: str
    values: Tensor
    inverted: bool = False
    basis: Optional[cpab.CpabBasis] = None
    steps: int = cpab.DEFAULT_STEPS

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown transform kind {self.kind!r}")
        self.values = as_tensor(self.values)
        if self.kind == "cpab" and self.basis is None:
            raise ValueError("cpab transforms need a basis")


def domain_for(kind: str) -> str:
    return UNIT if kind == "cpab" else SIGNED


def n_params(kind: str, basis: Optional[cpab.CpabBasis] = None) -> int:
    return basis.d_cpab if kind == "cpab" else 6


def identity_values(kind: str, basis=None) -> np.ndarray:
    if kind == "affine":
        return transforms.IDENTITY_AFFINE.copy()
    if kind == "affine-decomp":
        return np.array([1.0, 1.0, 0.0, 0.0, 0.0, 0.0])
    return np.zeros(n_params(kind, basis))


def inverse(params: TransformParams, allow_matrix_inverse: bool = False) -> TransformParams:
    """Parameters of the inverse map.

    Velocity kinds negate; decomposed affine uses its closed form; raw affine
    has no guaranteed inverse and needs ``allow_matrix_inverse``.
    """
    if params.kind in ("affine-diffeo", "cpab"):
        return TransformParams(params.kind, -params.values, basis=params.basis, steps=params.steps)
    if params.kind == "affine-decomp":
        inv = transforms.decomposed_inverse(transforms.DecomposedAffineParams(params.values, params.inverted))
        return TransformParams("affine-decomp", inv.values, inverted=inv.inverted)
    if not allow_matrix_inverse:
        raise UnsupportedInverse("raw affine parameters have no guaranteed inverse")
    mat = transforms.affine_inverse_matrix(params.values)
    return TransformParams("affine", mat.reshape(params.values.shape))


@dataclass
class SamplingGrid:
    H: int
    W: int
    coords: Tensor  # (H*W, 2) or (B, H*W, 2), row-major pixel order, columns (x, y)
    domain: str = SIGNED


def identity_grid(H: int, W: int, domain: str = SIGNED) -> SamplingGrid:
    if H < 1 or W < 1:
        raise ValueError("grid extents must be >= 1")
    u = (np.arange(W) + 0.5) / W
    v = (np.arange(H) + 0.5) / H
    if domain == SIGNED:
        u, v = 2.0 * u - 1.0, 2.0 * v - 1.0
    elif domain != UNIT:
        raise ValueError(f"unknown domain {domain!r}")
    xx, yy = np.meshgrid(u, v)
    coords = np.stack([xx.reshape(-1), yy.reshape(-1)], axis=1)
    return SamplingGrid(H, W, Tensor(coords), domain)


def _to_domain(coords: Tensor, src: str, dst: str) -> Tensor:
    if src == dst:
        return coords
    if src == SIGNED:
        return (coords + 1.0) * 0.5
    return coords * 2.0 - 1.0


def apply_params(params: TransformParams, points) -> Tensor:
    """Map points (in the kind's own domain) through the transformation."""
    v = params.values
    if params.kind == "affine":
        return transforms.affine_apply(v, points)
    if params.kind == "affine-decomp":
        return transforms.decomposed_apply(transforms.DecomposedAffineParams(v, params.inverted), points)
    if params.kind == "affine-diffeo":
        return transforms.velocity_affine_apply(v, points)
    return cpab.cpab_apply(v, points, params.basis, steps=params.steps)


def warp_grid(params: TransformParams, grid: SamplingGrid) -> SamplingGrid:
    dom = domain_for(params.kind)
    pts = _to_domain(grid.coords, grid.domain, dom)
    moved = apply_params(params, pts)
    return SamplingGrid(grid.H, grid.W, _to_domain(moved, dom, grid.domain), grid.domain)


def _pixel_scale(H: int, W: int) -> np.ndarray:
    return np.array([W / 2.0, H / 2.0])


def bilinear_sample(image, grid: SamplingGrid) -> Tensor:
    """Sample ``image`` (C, H, W) or (B, C, H, W) at the grid points, zero outside.

    Grid points within 1e-9 pixels of a pixel centre read that pixel exactly,
    so identity warps reproduce the image bit for bit.
    """
    image, single = _batched_image(image)
    B, C, H, W = image.shape
    coords = _to_domain(grid.coords, grid.domain, SIGNED)
    if coords.ndim == 2:
        coords = coords.reshape(1, *coords.shape)
    # normalized [-1, 1] -> continuous pixel index, centre of pixel j at j
    pix = (coords + 1.0) * Tensor(_pixel_scale(H, W).reshape(1, 1, 2)) - 0.5
    return _sample(image, T.transpose(pix, (0, 2, 1)), grid.H, grid.W, single)


def _batched_image(image):
    image = as_tensor(image)
    single = image.ndim == 3
    if single:
        image = image.reshape(1, *image.shape)
    if image.ndim != 4:
        raise ShapeMismatch(f"image must be (C,H,W) or (B,C,H,W), got {image.shape}")
    return image, single


def _sample(image: Tensor, pix: Tensor, H_out: int, W_out: int, single: bool) -> Tensor:
    B, C = image.shape[:2]
    nb = max(B, pix.shape[0])
    if B not in (1, nb) or pix.shape[0] not in (1, nb):
        raise ShapeMismatch(f"grid batch {pix.shape[0]} does not match image batch {B}")
    if pix.shape[0] != nb:
        pix = T.concat([pix] * nb, axis=0)
    out = T.interp2d(image, pix, snap_tol=SNAP_TOL).reshape(nb, C, H_out, W_out)
    return out.reshape(out.shape[1:]) if single and nb == 1 else out


def affine_matrix(params: TransformParams) -> Tensor:
    """The (2, 3) or (B, 2, 3) matrix of an affine-family transformation."""
    v = params.values
    if params.kind == "affine":
        return v.reshape(v.shape[:-1] + (2, 3))
    if params.kind == "affine-decomp":
        return transforms.decomposed_matrix(transforms.DecomposedAffineParams(v, params.inverted))
    if params.kind == "affine-diffeo":
        m = transforms.expm_homogeneous(v)
        return m[..., 0:2, :]
    raise ValueError(f"{params.kind} is not an affine kind")


def spatial_transform(image, params: TransformParams, out_hw=None) -> Tensor:
    image_t, single = _batched_image(image)
    H, W = image_t.shape[-2:]
    H_out, W_out = out_hw if out_hw is not None else (H, W)
    if params.kind == "cpab":
        grid = identity_grid(H_out, W_out, domain_for(params.kind))
        return bilinear_sample(image, warp_grid(params, grid))
    # Affine kinds: fold the normalized-to-pixel conversion into the matrix
    # and move the whole grid with a single product.
    mat = affine_matrix(params)
    lead = (1,) * (mat.ndim - 2)
    scale = Tensor(_pixel_scale(H, W).reshape(lead + (2, 1)))
    offset = np.zeros((2, 3))
    offset[:, 2] = _pixel_scale(H, W) - 0.5
    pmat = mat * scale + Tensor(offset.reshape(lead + (2, 3)))
    g = identity_grid(H_out, W_out, SIGNED).coords.data
    G = Tensor(np.concatenate([g.T, np.ones((1, g.shape[0]))], axis=0))
    pix = T.matmul(pmat, G)
    if pix.ndim == 2:
        pix = pix.reshape(1, *pix.shape)
    return _sample(image_t, pix, H_out, W_out, single)
