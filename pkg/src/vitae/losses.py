"""ELBO objectives, KL warmup and importance-sampled log-likelihood.

Batch losses are means over the batch of per-image sums, so one value is on
the scale of a single image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import NonPositiveVariance
from .models import GaussianParams, Model
from .tensor import Tensor, as_tensor

BERNOULLI_EPS = 1e-7
GAUSSIAN_VAR = 0.1
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class LossBreakdown:
    elbo: float
    recon: float
    kl_A: float
    kl_P: float
    beta: float = 1.0
    w: float = 1.0
    loss: Optional[Tensor] = field(default=None, repr=False)  # -elbo, differentiable

    @property
    def effective_weight(self) -> float:
        return self.beta * self.w

    def identity_residual(self) -> float:
        return abs(self.elbo - (self.recon - self.effective_weight * (self.kl_A + self.kl_P)))


def _batch_mean(per_item: Tensor) -> Tensor:
    return per_item.mean() if per_item.ndim else per_item


def kl_std_normal(g: GaussianParams) -> Tensor:
    """KL(N(mu, diag var) || N(0, I)), summed over dimensions and averaged over the batch."""
    if np.any(g.var.data <= 0):
        raise NonPositiveVariance("variance must be strictly positive")
    terms = g.mu * g.mu + g.var - 1.0 - T.log(g.var)
    return _batch_mean(0.5 * T.sum_(terms, axis=-1))


def recon_loglik(x, mu_p, likelihood: str = "bernoulli") -> Tensor:
    x, mu_p = as_tensor(x), as_tensor(mu_p)
    if x.shape != mu_p.shape:
        x = x.reshape(mu_p.shape)
    if likelihood == "bernoulli":
        if mu_p.ndim == 1:
            return T.bernoulli_loglik(x.reshape(1, -1), mu_p.reshape(1, -1), BERNOULLI_EPS).reshape(())
        return _batch_mean(T.bernoulli_loglik(x, mu_p, BERNOULLI_EPS))
    if likelihood == "gaussian":
        r = x - mu_p
        ll = -0.5 * (r * r / GAUSSIAN_VAR + math.log(2.0 * math.pi * GAUSSIAN_VAR))
    else:
        raise ValueError(f"unknown likelihood {likelihood!r}")
    return _batch_mean(T.sum_(ll, axis=-1))


def _combine(recon: Tensor, kl_A: Tensor, kl_P, beta: float, w: float) -> LossBreakdown:
    kl_P = as_tensor(0.0) if kl_P is None else as_tensor(kl_P)
    coeff = beta * w
    elbo = recon - coeff * (kl_A + kl_P)
    out = LossBreakdown(elbo.item(), recon.item(), kl_A.item(), kl_P.item(), beta, w, loss=-elbo)
    return out


def elbo_vae(recon: Tensor, kl: Tensor, beta: float = 1.0, w: float = 1.0) -> LossBreakdown:
    if beta < 1:
        raise ValueError("beta must be >= 1")
    return _combine(as_tensor(recon), as_tensor(kl), None, beta, w)


def elbo_uvitae(recon: Tensor, kl_A: Tensor, kl_P: Tensor, w: float = 1.0, beta: float = 1.0) -> LossBreakdown:
    return _combine(as_tensor(recon), as_tensor(kl_A), kl_P, beta, w)


def elbo_cvitae(recon: Tensor, kl_A: Tensor, kl_P: Tensor, w: float = 1.0, beta: float = 1.0) -> LossBreakdown:
    """Same three-term form; ``kl_A`` must come from the z_P-conditioned appearance
    posterior of a single z_P sample (the outer expectation)."""
    return _combine(as_tensor(recon), as_tensor(kl_A), kl_P, beta, w)


def model_loss(model: Model, x, result, beta: float = 1.0, w: float = 1.0) -> LossBreakdown:
    x = as_tensor(x)
    x = x.reshape(x.shape[0], -1) if x.ndim > 2 else x
    recon = recon_loglik(x, result.recon, model.config.likelihood)
    kl_A = kl_std_normal(result.q_A)
    if not model.is_vitae:
        return elbo_vae(recon, kl_A, beta=beta, w=w)
    kl_P = kl_std_normal(result.q_P)
    fn = elbo_cvitae if model.kind == "CVitae" else elbo_uvitae
    return fn(recon, kl_A, kl_P, w=w, beta=beta)


def warmup_weight(epoch, warmup) -> float:
    if warmup < 1:
        raise ValueError("warmup must be >= 1")
    return min(epoch / warmup, 1.0)


# -- per-image numpy evaluation ---------------------------------------------
def _loglik_per_image(x: np.ndarray, mu: np.ndarray, likelihood: str) -> np.ndarray:
    if likelihood == "bernoulli":
        mu = np.clip(mu, BERNOULLI_EPS, 1.0 - BERNOULLI_EPS)
        return np.sum(x * np.log(mu) + (1.0 - x) * np.log1p(-mu), axis=-1)
    r = x - mu
    return np.sum(-0.5 * (r * r / GAUSSIAN_VAR + math.log(2.0 * math.pi * GAUSSIAN_VAR)), axis=-1)


def _log_normal(z: np.ndarray, mu=0.0, var=1.0) -> np.ndarray:
    return np.sum(-0.5 * ((z - mu) ** 2 / var + np.log(var) + LOG_2PI), axis=-1)


def _kl_per_image(g: GaussianParams) -> np.ndarray:
    mu, var = g.mu.data, g.var.data
    return 0.5 * np.sum(mu * mu + var - 1.0 - np.log(var), axis=-1)


def log_weights(model: Model, x: np.ndarray, noise: dict, params=None) -> np.ndarray:
    """log p(x|z) + log p(z) - log q(z|x) per image for the given noise draw."""
    params = model.frozen() if params is None else params
    x = np.asarray(x, dtype=float).reshape(len(x), -1)
    r = model.forward(x, noise, params=params)
    lw = _loglik_per_image(x, r.recon.data, model.config.likelihood)
    lw += _log_normal(r.z_A.data) - _log_normal(r.z_A.data, r.q_A.mu.data, r.q_A.var.data)
    if model.is_vitae:
        lw += _log_normal(r.z_P.data) - _log_normal(r.z_P.data, r.q_P.mu.data, r.q_P.var.data)
    return lw


def elbo_per_image(model: Model, x: np.ndarray, noise: dict, params=None) -> np.ndarray:
    """Single-sample ELBO (analytic KL, w = beta = 1) for each image."""
    params = model.frozen() if params is None else params
    x = np.asarray(x, dtype=float).reshape(len(x), -1)
    r = model.forward(x, noise, params=params)
    out = _loglik_per_image(x, r.recon.data, model.config.likelihood) - _kl_per_image(r.q_A)
    if model.is_vitae:
        out -= _kl_per_image(r.q_P)
    return out


def logmeanexp(a: np.ndarray, axis=0) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    return np.squeeze(m, axis=axis) + np.log(np.mean(np.exp(a - m), axis=axis))


def importance_loglik(model: Model, x, K: int, rng: np.random.Generator, chunk: int = 64) -> np.ndarray:
    """Per-image estimate of log p(x) from K posterior samples (log-mean-exp of weights)."""
    if K < 1:
        raise ValueError("K must be >= 1")
    x = np.asarray(x, dtype=float).reshape(len(x), -1)
    params = model.frozen()
    n = len(x)
    rows = []
    done = 0
    while done < K:
        k = min(chunk, K - done)
        xs = np.tile(x, (k, 1))
        noise = model.sample_noise(rng, n * k)
        rows.append(log_weights(model, xs, noise, params=params).reshape(k, n))
        done += k
    return logmeanexp(np.concatenate(rows, axis=0), axis=0)
