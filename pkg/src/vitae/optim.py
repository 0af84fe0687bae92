"""Adam, the training loop with KL warmup, and the learning-rate stability sweep."""

from __future__ import annotations

import csv
import dataclasses
import math
import os
import zlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import checkpoint, data, losses
from . import tensor as T
from .errors import Diverged, NonFinite
from .models import ModelConfig, build_model, model_to_arrays

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8
LOG_COLUMNS = ("epoch", "elbo", "recon", "kl_A", "kl_P", "w", "beta")
SWEEP_NAMES = {"Affine": "affine", "AffineDecomp": "affine-decomp", "AffineDiffio": "affine-diffeo"}


# -- Adam ----------------------------------------------------------------------
@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState, lr: float,
              beta1: float = BETA1, beta2: float = BETA2, eps: float = EPS):
    """One bias-corrected Adam update.  Returns new parameter arrays; ``state`` is updated.

    Raises NonFinite (leaving params and state untouched) if any gradient is NaN/Inf.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and state disagree in length")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFinite("non-finite gradient")
    t = state.t + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or p.shape != state.m[i].shape:
            raise ValueError(f"shape mismatch at parameter {i}")
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * (g * g)
        out.append(p - lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + eps))
    state.t = t
    return out


class Adam:
    def __init__(self, tensors: Sequence[T.Tensor], lr: float = 1e-4):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.tensors = list(tensors)
        self.lr = lr
        self.state = AdamState.zeros_like([p.data for p in self.tensors])

    def zero_grad(self):
        for p in self.tensors:
            p.grad = None

    def step(self):
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.tensors]
        new = adam_step([p.data for p in self.tensors], grads, self.state, self.lr)
        for p, arr in zip(self.tensors, new):
            p.data = arr


# -- configuration ---------------------------------------------------------------
@dataclass
class TrainConfig:
    kind: str = "CVitae"
    transform: str = "affine-diffeo"
    learning_rate: float = 1e-4
    batch_size: int = 128
    epochs: int = 200
    warmup: Optional[int] = None     # default: half the epoch budget
    beta: Optional[float] = None     # default: 8 for BetaVAE, else 1
    seed: int = 0
    K: int = 1000
    latent_dim: int = 4
    d_A: int = 2
    d_P: int = 2
    enc_widths: tuple = (128, 64)
    dec_widths: tuple = (64, 64)
    likelihood: str = "bernoulli"
    tess: tuple = (2, 4)
    zero_boundary: bool = True
    cpab_steps: int = 8
    allow_matrix_inverse: bool = False
    data: str = "sprites"            # "sprites" or "idx:PATH"
    n_sprites: int = 4096            # 0 keeps the full factor grid
    data_seed: int = 0
    augment: bool = False
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.warmup is not None and self.warmup < 1:
            raise ValueError("warmup must be >= 1")
        if self.beta is not None and self.beta < 1:
            raise ValueError("beta must be >= 1")

    @property
    def effective_warmup(self) -> int:
        return self.warmup if self.warmup is not None else max(1, self.epochs // 2)

    @property
    def effective_beta(self) -> float:
        if self.beta is not None:
            return float(self.beta)
        return 8.0 if self.kind == "BetaVAE" else 1.0

    def model_config(self, image_shape) -> ModelConfig:
        return ModelConfig(kind=self.kind, transform=self.transform, image_shape=tuple(image_shape),
                           latent_dim=self.latent_dim, d_A=self.d_A, d_P=self.d_P,
                           enc_widths=self.enc_widths, dec_widths=self.dec_widths,
                           likelihood=self.likelihood, tess=self.tess, zero_boundary=self.zero_boundary,
                           cpab_steps=self.cpab_steps, allow_matrix_inverse=self.allow_matrix_inverse)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            if isinstance(v, tuple):
                v = ",".join(str(e) for e in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"


_FIELD_TYPES = {
    "kind": str, "transform": str, "learning_rate": float, "batch_size": int, "epochs": int,
    "warmup": int, "beta": float, "seed": int, "K": int, "latent_dim": int, "d_A": int, "d_P": int,
    "enc_widths": tuple, "dec_widths": tuple, "likelihood": str, "tess": tuple, "zero_boundary": bool,
    "cpab_steps": int, "allow_matrix_inverse": bool, "data": str, "n_sprites": int, "data_seed": int,
    "augment": bool, "checkpoint_every": int,
}


def _parse_value(key: str, text: str):
    kind = _FIELD_TYPES[key]
    text = text.strip()
    if kind is bool:
        low = text.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"{key}: expected a boolean, got {text!r}")
        return low in ("true", "1", "yes")
    if kind is tuple:
        return tuple(int(v) for v in text.split(",") if v.strip())
    if key in ("warmup", "beta") and text.lower() in ("", "none"):
        return None
    return kind(text)


def parse_config(text: str, overrides: Optional[dict] = None) -> TrainConfig:
    """Flat ``key=value`` lines; ``#`` starts a comment.  Unknown keys are errors."""
    values = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ValueError(f"line {n}: unknown key {key!r}")
        values[key] = _parse_value(key, val)
    for key, val in (overrides or {}).items():
        if key not in _FIELD_TYPES:
            raise ValueError(f"unknown key {key!r}")
        values[key] = _parse_value(key, val) if isinstance(val, str) else val
    return TrainConfig(**values)


def load_config(path, overrides: Optional[dict] = None) -> TrainConfig:
    with open(path) as fh:
        return parse_config(fh.read(), overrides)


# -- seeds -------------------------------------------------------------------------
def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named use of the run seed."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def substream_seed(seed: int, name: str) -> int:
    return int(substream(seed, name).integers(0, 2 ** 31))


def load_data(config: TrainConfig) -> data.LabeledImageDataset:
    if config.data == "sprites":
        ds = data.generate_sprites(seed=config.data_seed, subsample=config.n_sprites or None)
    elif config.data.startswith("idx:"):
        ds = data.load_mnist(config.data[4:])
    else:
        raise ValueError(f"unknown data source {config.data!r}")
    if config.augment:
        ds = data.augment_dataset(ds, substream_seed(config.data_seed, "augment"))
    return ds


# -- training ------------------------------------------------------------------------
@dataclass
class TrainLog:
    rows: list = field(default_factory=list)   # dicts keyed by LOG_COLUMNS
    max_identity_residual: float = 0.0
    steps: int = 0

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(LOG_COLUMNS)
            for r in self.rows:
                wr.writerow([r["epoch"]] + [repr(float(r[c])) for c in LOG_COLUMNS[1:]])


def _save(model, path):
    checkpoint.save(path, model_to_arrays(model))


def train(config: TrainConfig, dataset: data.LabeledImageDataset, out_dir=None, log_path=None):
    """Train from scratch.  Returns ``(model, TrainLog)``.

    Each epoch appends one averaged row to the log (and to ``log_path`` if
    given).  A NaN/Inf anywhere in a step raises Diverged carrying the
    partial log.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    model = build_model(config.model_config(dataset.images.shape[1:]),
                        seed=substream_seed(config.seed, "init"))
    opt = Adam(list(model.params.values()), lr=config.learning_rate)
    noise_rng = substream(config.seed, "noise")
    shuffle_seed = substream_seed(config.seed, "shuffle")
    beta, warmup = config.effective_beta, config.effective_warmup
    images = dataset.images.reshape(len(dataset), -1)
    log = TrainLog()
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_path = log_path or os.path.join(out_dir, "loss.csv")
    if log_path is not None:
        log.write_csv(log_path)

    for epoch in range(config.epochs):
        w = losses.warmup_weight(epoch, warmup)
        sums = dict.fromkeys(("elbo", "recon", "kl_A", "kl_P"), 0.0)
        seen = 0
        try:
            for idx in data.batch_iter(len(images), config.batch_size, shuffle_seed, epoch):
                x = images[idx]
                noise = model.sample_noise(noise_rng, len(idx))
                lb = losses.model_loss(model, x, model.forward(x, noise), beta=beta, w=w)
                log.max_identity_residual = max(log.max_identity_residual, lb.identity_residual())
                opt.zero_grad()
                T.backward(lb.loss)
                opt.step()
                log.steps += 1
                for key in sums:
                    sums[key] += getattr(lb, key) * len(idx)
                seen += len(idx)
        except NonFinite as exc:
            raise Diverged(f"diverged in epoch {epoch}: {exc}", log=log, epoch=epoch) from exc
        row = {"epoch": epoch, "w": w, "beta": beta}
        row.update({k: v / seen for k, v in sums.items()})
        log.rows.append(row)
        if log_path is not None:
            with open(log_path, "a", newline="") as fh:
                csv.writer(fh).writerow([epoch] + [repr(float(row[c])) for c in LOG_COLUMNS[1:]])
        if out_dir is not None and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            _save(model, os.path.join(out_dir, "checkpoint.bin"))
    if out_dir is not None:
        _save(model, os.path.join(out_dir, "model.bin"))
    return model, log


def dataset_elbo(model, images: np.ndarray, seed: int = 0, batch: int = 256) -> float:
    """Mean single-sample ELBO (w = beta = 1) per image, with fixed evaluation noise."""
    rng = substream(seed, "eval-noise")
    images = np.asarray(images, dtype=float).reshape(len(images), -1)
    P = model.frozen()
    total = 0.0
    for s in range(0, len(images), batch):
        x = images[s:s + batch]
        total += float(np.sum(losses.elbo_per_image(model, x, model.sample_noise(rng, len(x)), params=P)))
    return total / len(images)


# -- learning-rate sweep ---------------------------------------------------------------
SWEEP_COLUMNS = ("parametrization", "transform", "learning_rate", "status", "final_elbo", "epochs_completed")


def lr_sweep(base_config: TrainConfig, rates: Sequence[float], dataset: data.LabeledImageDataset,
             parametrizations: Sequence[str] = ("Affine", "AffineDecomp", "AffineDiffio"),
             out_path=None) -> list:
    """Train a C-VITAE for every (parametrization, rate) cell and record the final ELBO.

    Diverged cells get status ``diverged`` and an empty ELBO.  The raw affine
    cell inverts its matrix numerically inside the encoder.
    """
    rows = []
    for name in parametrizations:
        transform = SWEEP_NAMES.get(name, name)
        if transform not in SWEEP_NAMES.values():
            raise ValueError(f"unsupported parametrization {name!r}")
        label = {v: k for k, v in SWEEP_NAMES.items()}[transform]
        for lr in rates:
            cfg = base_config.replace(kind="CVitae", transform=transform, learning_rate=float(lr),
                                      allow_matrix_inverse=(transform == "affine"))
            try:
                model, log = train(cfg, dataset)
                elbo = dataset_elbo(model, dataset.images, seed=cfg.seed)
                if not math.isfinite(elbo):
                    raise Diverged("non-finite evaluation ELBO", log=log, epoch=cfg.epochs)
                rows.append({"parametrization": label, "transform": transform, "learning_rate": float(lr),
                             "status": "ok", "final_elbo": elbo, "epochs_completed": len(log.rows)})
            except (Diverged, NonFinite) as exc:
                done = len(exc.log.rows) if getattr(exc, "log", None) is not None else 0
                rows.append({"parametrization": label, "transform": transform, "learning_rate": float(lr),
                             "status": "diverged", "final_elbo": float("nan"), "epochs_completed": done})
    if out_path is not None:
        write_sweep_csv(out_path, rows)
    return rows


def write_sweep_csv(path, rows):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(SWEEP_COLUMNS)
        for r in rows:
            elbo = "" if r["status"] != "ok" else repr(float(r["final_elbo"]))
            wr.writerow([r["parametrization"], r["transform"], repr(r["learning_rate"]), r["status"],
                         elbo, r["epochs_completed"]])
