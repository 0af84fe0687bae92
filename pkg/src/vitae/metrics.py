"""Disentanglement scoring with kNN probes, and latent traversals.

The importance of latent dimension ``i`` for factor ``j`` is how much better
than chance a kNN predictor does at recovering factor ``j`` from dimension
``i`` alone.  D_score then rewards dimensions whose importance is concentrated
on a single factor.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import AllZeroImportance, DegenerateFactor, EmptyTrainSet

DEFAULT_K = 5
TRAIN_FRAC = 0.8


@dataclass
class ImportanceMatrix:
    R: np.ndarray                  # (d_latent, F), entries >= 0
    accuracy: np.ndarray           # raw per-dimension probe scores, same shape
    chance: np.ndarray             # (F,) chance level per factor
    factor_names: list = field(default_factory=list)

    def __post_init__(self):
        if np.any(self.R < 0) or not np.all(np.isfinite(self.R)):
            raise ValueError("importances must be finite and nonnegative")


# -- kNN ---------------------------------------------------------------------
def _neighbors(train: np.ndarray, test: np.ndarray, k: int, chunk: int = 256) -> np.ndarray:
    """Indices of the k nearest training rows for each test row; ties go to the lower index."""
    out = np.empty((len(test), k), dtype=np.intp)
    for s in range(0, len(test), chunk):
        diff = test[s:s + chunk, None, :] - train[None, :, :]
        dist = np.einsum("ijk,ijk->ij", diff, diff)
        out[s:s + chunk] = np.argsort(dist, axis=1, kind="stable")[:, :k]
    return out


def _as_2d(codes) -> np.ndarray:
    codes = np.asarray(codes, dtype=float)
    return codes[:, None] if codes.ndim == 1 else codes


def knn_classify(train_codes, train_labels, test_codes, k: int = DEFAULT_K, test_labels=None):
    """Majority vote over the k nearest training codes (Euclidean).

    Vote ties go to the smallest label.  Returns ``(predictions, accuracy)``;
    accuracy is None when ``test_labels`` is not given.
    """
    train, test = _as_2d(train_codes), _as_2d(test_codes)
    labels = np.asarray(train_labels).astype(np.int64)
    if len(train) == 0:
        raise EmptyTrainSet("kNN needs at least one training point")
    if k < 1:
        raise ValueError("k must be >= 1")
    k = min(k, len(train))
    pred = _vote(_neighbors(train, test, k), labels)
    acc = None
    if test_labels is not None:
        acc = float(np.mean(pred == np.asarray(test_labels).astype(np.int64))) if len(test) else float("nan")
    return pred, acc


def _vote(nbr: np.ndarray, labels: np.ndarray) -> np.ndarray:
    classes, lab_idx = np.unique(labels, return_inverse=True)
    votes = np.zeros((len(nbr), len(classes)), dtype=np.int64)
    np.add.at(votes, (np.arange(len(nbr))[:, None], lab_idx[nbr]), 1)
    return classes[np.argmax(votes, axis=1)]  # first maximum == smallest label


def knn_regress_r2(train_codes, train_values, test_codes, test_values) -> float:
    """R^2 of 1-NN regression on the test split."""
    train, test = _as_2d(train_codes), _as_2d(test_codes)
    if len(train) == 0:
        raise EmptyTrainSet("kNN needs at least one training point")
    pred = np.asarray(train_values, dtype=float)[_neighbors(train, test, 1)[:, 0]]
    y = np.asarray(test_values, dtype=float)
    sst = np.sum((y - y.mean()) ** 2)
    if sst == 0:
        raise DegenerateFactor("continuous factor is constant on the evaluation split")
    return float(1.0 - np.sum((y - pred) ** 2) / sst)


# -- importances -------------------------------------------------------------
def split_rows(n: int, seed: int = 0, train_frac: float = TRAIN_FRAC):
    perm = np.random.default_rng([seed, 0xD5C0]).permutation(n)
    cut = int(round(train_frac * n))
    return perm[:cut], perm[cut:]


def importance_matrix(codes, factors, k: int = DEFAULT_K, factor_specs: Optional[Sequence] = None,
                      seed: int = 0, train_frac: float = TRAIN_FRAC) -> ImportanceMatrix:
    """R[i, j] = max(0, score of a probe predicting factor j from dimension i - chance_j).

    Discrete factors use kNN accuracy against the modal-class frequency of the
    evaluation split; continuous factors use 1-NN R^2 against 0.
    """
    codes = _as_2d(codes)
    factors = np.asarray(factors)
    if factors.ndim == 1:
        factors = factors[:, None]
    if len(codes) != len(factors):
        raise ValueError("codes and factors disagree on N")
    n_dim, n_fac = codes.shape[1], factors.shape[1]
    types = ["discrete"] * n_fac if factor_specs is None else [s.type for s in factor_specs]
    names = [f"f{j}" for j in range(n_fac)] if factor_specs is None else [s.name for s in factor_specs]
    tr, te = split_rows(len(codes), seed, train_frac)
    if len(tr) == 0:
        raise EmptyTrainSet("no training rows after the split")

    if k < 1:
        raise ValueError("k must be >= 1")
    kk = min(k, len(tr))
    # neighbours depend only on the dimension, so each probe reuses them
    nbrs = [_neighbors(codes[tr, i:i + 1], codes[te, i:i + 1], kk) for i in range(n_dim)]
    acc = np.zeros((n_dim, n_fac))
    chance = np.zeros(n_fac)
    for j in range(n_fac):
        y = factors[:, j]
        if types[j] == "discrete":
            y = y.astype(np.int64)
            _, counts = np.unique(y[te], return_counts=True)
            if len(counts) < 2:
                raise DegenerateFactor(f"factor {names[j]} has fewer than 2 values on the evaluation split")
            chance[j] = counts.max() / len(te)
            for i in range(n_dim):
                acc[i, j] = float(np.mean(_vote(nbrs[i], y[tr]) == y[te]))
        else:
            yt = y[te].astype(float)
            sst = np.sum((yt - yt.mean()) ** 2)
            if sst == 0:
                raise DegenerateFactor(f"factor {names[j]} is constant on the evaluation split")
            for i in range(n_dim):
                pred = y[tr].astype(float)[nbrs[i][:, 0]]
                acc[i, j] = 1.0 - np.sum((yt - pred) ** 2) / sst
    R = np.maximum(0.0, acc - chance[None, :])
    return ImportanceMatrix(R, acc, chance, names)


def d_score(R) -> float:
    """Importance-weighted mean over latent dimensions of 1 - H(row) / log F.

    Row weights are the row sums divided by ``max(total importance, 1)``:
    when the whole matrix carries less than one unit of importance (codes
    that barely beat chance anywhere) the score shrinks with it instead of
    being renormalised up from noise.
    """
    R = R.R if isinstance(R, ImportanceMatrix) else np.asarray(R, dtype=float)
    if R.ndim != 2:
        raise ValueError("R must be a matrix")
    if np.any(R < 0) or not np.all(np.isfinite(R)):
        raise ValueError("importances must be finite and nonnegative")
    n_fac = R.shape[1]
    # fsum is correctly rounded, so the score does not depend on the order of
    # latent dimensions or factors at all
    rows = np.array([math.fsum(r) for r in R])
    total = math.fsum(rows)
    if total <= 0:
        raise AllZeroImportance("no latent dimension predicts any factor")
    rho = np.zeros(len(R))
    for i in np.flatnonzero(rows > 0):
        if n_fac == 1:
            rho[i] = 1.0
            continue
        p = R[i] / rows[i]
        nz = p[p > 0]
        rho[i] = 1.0 - math.fsum(-nz * np.log(nz)) / math.log(n_fac)
    return float(np.clip(math.fsum(rows * rho) / max(total, 1.0), 0.0, 1.0))


def write_scores_csv(path, imp: ImportanceMatrix, score: float):
    """One row per factor: chance level, per-dimension probe scores, then a D_score row."""
    n_dim = imp.R.shape[0]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["factor", "chance"] + [f"dim{i}" for i in range(n_dim)])
        for j, name in enumerate(imp.factor_names):
            wr.writerow([name, repr(float(imp.chance[j]))] + [repr(float(a)) for a in imp.accuracy[:, j]])
        wr.writerow(["D_score", "", repr(float(score))] + [""] * (n_dim - 1))


# -- codes and traversals ------------------------------------------------------
def posterior_means(model, images, batch: int = 256) -> np.ndarray:
    """Latent codes as posterior means, appearance dimensions first for VITAE kinds."""
    images = np.asarray(images, dtype=float)
    P = model.frozen()
    out = []
    for s in range(0, len(images), batch):
        x = images[s:s + batch].reshape(min(batch, len(images) - s), -1)
        if model.is_vitae:
            q_P, q_A = model.encode(x, params=P)
            out.append(np.concatenate([q_A.mu.data, q_P.mu.data], axis=1))
        else:
            out.append(model.encode(x, params=P).mu.data)
    return np.concatenate(out, axis=0)


def latent_traversal(model, x, dim: int, value_range=(-3.0, 3.0), steps: int = 9) -> np.ndarray:
    """Decode a sweep of one latent coordinate with the others at their posterior means.

    Dimensions are numbered appearance first, then perspective.  Returns
    (steps, C, H, W).
    """
    d_A, d_P = model.latent_dims()
    if not 0 <= dim < d_A + d_P:
        raise ValueError(f"dim must be in [0, {d_A + d_P})")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = np.asarray(x, dtype=float).reshape(1, -1)
    code = posterior_means(model, x)[0]
    values = np.linspace(value_range[0], value_range[1], steps)
    z = np.tile(code, (steps, 1))
    z[:, dim] = values
    P = model.frozen()
    if model.is_vitae:
        out = model.decode(z[:, :d_A], z[:, d_A:], params=P)[0]
    else:
        out = model.decode(z, params=P)[0]
    return out.data.reshape(steps, *model.config.image_shape)
