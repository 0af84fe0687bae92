"""Command-line entry point: ``vitae <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 training diverged, 3 I/O error.
Every command writes a JSON manifest (arguments, configuration and
git-style hashes of its inputs) next to its outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from typing import Optional, Sequence

import numpy as np

from . import checkpoint, cpab, data, imageio, losses, metrics, optim, spatial
from .errors import BadMagic, Diverged, TruncatedFile, VitaeError
from .models import model_from_arrays
from .tensor import Tensor

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3
EVAL_LOGPX_IMAGES = 100
EVAL_SPRITES = 4096


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _csv_floats(text: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _pair(cast):
    def parse(text: str):
        parts = text.split(",")
        if len(parts) != 2:
            raise argparse.ArgumentTypeError(f"expected two comma-separated values, got {text!r}")
        return tuple(cast(p) for p in parts)
    return parse


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vitae", description="VAE / VITAE training and evaluation")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    t = sub.add_parser("train", help="train a model from a key=value config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", default="run")
    t.add_argument("--seed", type=int)

    e = sub.add_parser("eval", help="ELBO, log p(x) and D_score of a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True, help="sprites | idx:IMAGES[,LABELS]")
    e.add_argument("--report", required=True)
    e.add_argument("--K", type=int, default=1000)

    v = sub.add_parser("traverse", help="render a latent traversal strip")
    v.add_argument("--ckpt", required=True)
    v.add_argument("--image", required=True)
    v.add_argument("--dim", type=int, required=True)
    v.add_argument("--range", type=_pair(float), default=(-3.0, 3.0))
    v.add_argument("--steps", type=int, default=9)
    v.add_argument("--out", required=True)

    w = sub.add_parser("warp", help="warp a PGM image with explicit parameters")
    w.add_argument("--kind", required=True, choices=spatial.KINDS)
    w.add_argument("--params", required=True, type=_csv_floats)
    w.add_argument("--tess", type=_pair(int), default=(2, 4))
    w.add_argument("--steps", type=int, default=cpab.DEFAULT_STEPS)
    w.add_argument("--in", dest="inp", required=True)
    w.add_argument("--out", required=True)
    w.add_argument("--inverse", action="store_true")

    s = sub.add_parser("lr-sweep", help="learning-rate stability sweep over the affine parametrizations")
    s.add_argument("--config", required=True)
    s.add_argument("--rates", required=True, type=_csv_floats)
    s.add_argument("--out", required=True)

    g = sub.add_parser("gen-sprites", help="generate and cache the procedural sprite dataset")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--subsample", type=int)
    return p


# -- manifest ------------------------------------------------------------------
def blob_hash(path) -> str:
    """Git blob hash of a file's contents."""
    with open(path, "rb") as fh:
        body = fh.read()
    return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


def write_manifest(path, command: str, argv: Sequence[str], inputs: Sequence[str], config: Optional[dict] = None):
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": config or {},
        "inputs": {p: blob_hash(p) for p in inputs if p and os.path.isfile(p)},
    }
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _sidecar(path: str) -> str:
    return path + ".manifest.json"


def _ensure_parent(path: str):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


# -- commands --------------------------------------------------------------------
def _overrides(args) -> dict:
    return {} if getattr(args, "seed", None) is None else {"seed": args.seed}


def cmd_train(args, argv):
    cfg = optim.load_config(args.config, _overrides(args))
    ds = optim.load_data(cfg)
    os.makedirs(args.out, exist_ok=True)
    write_manifest(os.path.join(args.out, "manifest.json"), "train", argv, [args.config],
                   {"train": cfg.to_text()})
    try:
        optim.train(cfg, ds, out_dir=args.out)
    except Diverged as exc:
        print(f"vitae: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def load_eval_data(spec: str) -> data.LabeledImageDataset:
    if spec == "sprites":
        return data.generate_sprites(seed=0, subsample=EVAL_SPRITES)
    if spec.startswith("idx:"):
        paths = spec[4:].split(",")
        return data.load_mnist(paths[0], paths[1] if len(paths) > 1 else None)
    raise UsageError(f"--data must be 'sprites' or 'idx:PATH', got {spec!r}")


def evaluate(model, ds: data.LabeledImageDataset, K: int, seed: int = 0, has_labels: bool = True) -> dict:
    if K < 1:
        raise UsageError("--K must be >= 1")
    elbo = optim.dataset_elbo(model, ds.images, seed=seed)
    n_lp = min(EVAL_LOGPX_IMAGES, len(ds))
    lp = losses.importance_loglik(model, ds.images[:n_lp], K, optim.substream(seed, "logpx"))
    report = {"n_images": len(ds), "elbo": elbo, "log_px": float(np.mean(lp)), "K": K, "n_log_px": n_lp}
    report["d_score"] = ""
    if has_labels:
        codes = metrics.posterior_means(model, ds.images)
        imp = metrics.importance_matrix(codes, ds.factors, factor_specs=ds.factor_specs)
        report["d_score"] = metrics.d_score(imp)
    return report


def cmd_eval(args, argv):
    model = model_from_arrays(checkpoint.load(args.ckpt))
    ds = load_eval_data(args.data)
    has_labels = args.data == "sprites" or "," in args.data
    report = evaluate(model, ds, args.K, has_labels=has_labels)
    _ensure_parent(args.report)
    with open(args.report, "w") as fh:
        fh.write("metric,value\n")
        for k in ("n_images", "elbo", "log_px", "K", "n_log_px", "d_score"):
            v = report[k]
            fh.write(f"{k},{repr(v) if isinstance(v, float) else v}\n")
    inputs = [args.ckpt] + ([p for p in args.data[4:].split(",")] if args.data.startswith("idx:") else [])
    write_manifest(_sidecar(args.report), "eval", argv, inputs)
    return EXIT_OK


def cmd_traverse(args, argv):
    model = model_from_arrays(checkpoint.load(args.ckpt))
    img = imageio.read_pgm(args.image)
    if img.size != model.config.D:
        raise UsageError(f"image has {img.size} pixels, model expects {model.config.D}")
    strip = metrics.latent_traversal(model, img, args.dim, args.range, args.steps)
    _ensure_parent(args.out)
    imageio.write_pgm(args.out, imageio.tile(strip))
    write_manifest(_sidecar(args.out), "traverse", argv, [args.ckpt, args.image])
    return EXIT_OK


def transform_text(params: spatial.TransformParams, tess=(0, 0), zero_boundary=True) -> str:
    """One header line ``kind nx ny zero_boundary steps`` then the parameters."""
    head = f"{params.kind} {tess[0]} {tess[1]} {int(bool(zero_boundary))} {params.steps}"
    body = " ".join(repr(float(v)) for v in params.values.data.reshape(-1))
    flag = " inverted" if params.inverted else ""
    return head + flag + "\n" + body + "\n"


def build_params(kind: str, values, tess=(2, 4), steps: int = cpab.DEFAULT_STEPS,
                 zero_boundary: bool = True) -> spatial.TransformParams:
    basis = None
    if kind == "cpab":
        basis = cpab.build_continuity_basis(cpab.build_tessellation(tess[0], tess[1], zero_boundary))
    n = spatial.n_params(kind, basis)
    values = np.asarray(values, dtype=float)
    if values.size != n:
        raise UsageError(f"{kind} needs {n} parameters, got {values.size}")
    return spatial.TransformParams(kind, Tensor(values), basis=basis, steps=steps)


def cmd_warp(args, argv):
    params = build_params(args.kind, args.params, args.tess, args.steps)
    if args.inverse:
        params = spatial.inverse(params, allow_matrix_inverse=True)
    img = imageio.read_pgm(args.inp)
    out = spatial.spatial_transform(Tensor(img[None]), params).data[0]
    _ensure_parent(args.out)
    imageio.write_pgm(args.out, out)
    tess = args.tess if args.kind == "cpab" else (0, 0)
    with open(args.out + ".transform", "w") as fh:
        fh.write(transform_text(params, tess))
    write_manifest(_sidecar(args.out), "warp", argv, [args.inp])
    return EXIT_OK


def cmd_lr_sweep(args, argv):
    cfg = optim.load_config(args.config)
    ds = optim.load_data(cfg)
    os.makedirs(args.out, exist_ok=True)
    write_manifest(os.path.join(args.out, "manifest.json"), "lr-sweep", argv, [args.config],
                   {"train": cfg.to_text(), "rates": args.rates})
    optim.lr_sweep(cfg, args.rates, ds, out_path=os.path.join(args.out, "lr_sweep.csv"))
    return EXIT_OK


def cmd_gen_sprites(args, argv):
    if args.subsample is not None and args.subsample < 1:
        raise UsageError("--subsample must be >= 1")
    ds = data.generate_sprites(seed=args.seed, subsample=args.subsample)
    data.save_dataset(args.out, ds)
    imageio.write_pgm(os.path.join(args.out, "preview.pgm"), imageio.tile(ds.images[:64], cols=8))
    write_manifest(os.path.join(args.out, "manifest.json"), "gen-sprites", argv, [])
    return EXIT_OK


COMMANDS = {
    "train": cmd_train, "eval": cmd_eval, "traverse": cmd_traverse, "warp": cmd_warp,
    "lr-sweep": cmd_lr_sweep, "gen-sprites": cmd_gen_sprites,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args, argv)
    except UsageError as exc:
        print(f"vitae: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Diverged as exc:
        print(f"vitae: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, BadMagic, TruncatedFile) as exc:
        print(f"vitae: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, VitaeError) as exc:
        print(f"vitae: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main():
    sys.exit(run())
