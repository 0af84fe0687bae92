"""VAE, beta-VAE and the two VITAE variants built from MLP encoders/decoders.

Parameters live in a flat ordered dict of named leaf tensors, namespaced by
branch (``qA``, ``qP``, ``pA``, ``pG`` for the VITAE kinds; ``q``/``p`` for the
VAE kinds).  Models hold no random state: initialisation takes a generator
and every forward pass takes its noise explicitly.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import cpab, spatial
from . import tensor as T
from .errors import NonPositiveVariance, UnsupportedInverse
from .spatial import TransformParams
from .tensor import Tensor, as_tensor

KINDS = ("VAE", "BetaVAE", "UVitae", "CVitae")
VITAE_KINDS = ("UVitae", "CVitae")
VAR_FLOOR = 1e-6
# softplus(SCALE_OFFSET) == 1, so a zero head output means unit scale
SCALE_OFFSET = math.log(math.e - 1.0)


@dataclass
class GaussianParams:
    mu: Tensor
    var: Tensor

    def __post_init__(self):
        if np.any(self.var.data <= 0):
            raise NonPositiveVariance("variance must be strictly positive")


@dataclass
class ModelConfig:
    kind: str = "CVitae"
    transform: str = "affine-diffeo"
    image_shape: tuple = (1, 64, 64)
    latent_dim: int = 4
    d_A: int = 2
    d_P: int = 2
    enc_widths: tuple = (128, 64)
    dec_widths: tuple = (64, 64)
    likelihood: str = "bernoulli"
    leaky_slope: float = 0.1
    tess: tuple = (2, 4)
    zero_boundary: bool = True
    cpab_steps: int = cpab.DEFAULT_STEPS
    allow_matrix_inverse: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.transform not in spatial.KINDS:
            raise ValueError(f"unknown transform kind {self.transform!r}")
        if self.likelihood not in ("bernoulli", "gaussian"):
            raise ValueError(f"unknown likelihood {self.likelihood!r}")
        self.image_shape = tuple(int(v) for v in self.image_shape)
        self.enc_widths = tuple(int(v) for v in self.enc_widths)
        self.dec_widths = tuple(int(v) for v in self.dec_widths)
        self.tess = tuple(int(v) for v in self.tess)

    @property
    def D(self) -> int:
        return int(np.prod(self.image_shape))

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))


def split_widths(widths):
    """Appearance gets ceil(0.6 w) and perspective floor(0.4 w) of each layer."""
    return tuple(math.ceil(0.6 * w) for w in widths), tuple(math.floor(0.4 * w) for w in widths)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


@dataclass
class ForwardResult:
    recon: Tensor                      # (B, D) decoder mean
    q_A: GaussianParams                # single latent for the VAE kinds
    z_A: Tensor
    q_P: Optional[GaussianParams] = None
    z_P: Optional[Tensor] = None
    gamma_e: Optional[TransformParams] = None
    gamma_d: Optional[TransformParams] = None
    appearance: Optional[Tensor] = None  # untransformed decoder output


class Model:
    def __init__(self, config: ModelConfig, rng: Optional[np.random.Generator] = None):
        self.config = config
        self.params: dict = {}
        self.basis = None
        if config.kind in VITAE_KINDS and config.transform == "cpab":
            self.basis = cpab.build_continuity_basis(
                cpab.build_tessellation(config.tess[0], config.tess[1], config.zero_boundary))
        if rng is None:
            rng = np.random.default_rng(0)
        self._init(rng)

    # -- construction ----------------------------------------------------
    @property
    def kind(self) -> str:
        return self.config.kind

    @property
    def is_vitae(self) -> bool:
        return self.config.kind in VITAE_KINDS

    @property
    def n_gamma(self) -> int:
        return spatial.n_params(self.config.transform, self.basis)

    def _linear(self, rng, name, fan_in, fan_out, zero=False):
        w = np.zeros((fan_in, fan_out)) if zero else glorot(rng, fan_in, fan_out)
        self.params[f"{name}.weight"] = Tensor(w, requires_grad=True)
        self.params[f"{name}.bias"] = Tensor(np.zeros((1, fan_out)), requires_grad=True)

    def _encoder(self, rng, prefix, widths, d):
        prev = self.config.D
        for i, w in enumerate(widths):
            self._linear(rng, f"{prefix}.layer{i}", prev, w)
            prev = w
        self._linear(rng, f"{prefix}.mu", prev, d)
        self._linear(rng, f"{prefix}.var", prev, d)

    def _decoder(self, rng, prefix, widths, d, out_dim, zero_head=False):
        prev = d
        for i, w in enumerate(widths):
            self._linear(rng, f"{prefix}.layer{i}", prev, w)
            prev = w
        self._linear(rng, f"{prefix}.out", prev, out_dim, zero=zero_head)

    def _init(self, rng):
        c = self.config
        if not self.is_vitae:
            self._encoder(rng, "q", c.enc_widths, c.latent_dim)
            self._decoder(rng, "p", c.dec_widths, c.latent_dim, c.D)
            return
        enc_a, enc_p = split_widths(c.enc_widths)
        dec_a, dec_p = split_widths(c.dec_widths)
        self._encoder(rng, "qP", enc_p, c.d_P)
        self._encoder(rng, "qA", enc_a, c.d_A)
        self._decoder(rng, "pA", dec_a, c.d_A, c.D)
        # zero head: training starts at the identity transformation
        self._decoder(rng, "pG", dec_p, c.d_P, self.n_gamma, zero_head=True)

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def frozen(self) -> dict:
        """Parameters wrapped without gradient tracking, for evaluation passes."""
        return {k: Tensor(v.data) for k, v in self.params.items()}

    def state_dict(self) -> dict:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, arrays: dict):
        for k, p in self.params.items():
            arr = np.asarray(arrays[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    # -- building blocks -------------------------------------------------
    def _dense(self, P, name, h):
        return T.matmul(h, P[f"{name}.weight"]) + P[f"{name}.bias"]

    def _trunk(self, P, prefix, h, n_layers):
        for i in range(n_layers):
            h = T.leakyrelu(self._dense(P, f"{prefix}.layer{i}", h), self.config.leaky_slope)
        return h

    def _encode_branch(self, P, prefix, x, n_layers) -> GaussianParams:
        h = self._trunk(P, prefix, x, n_layers)
        mu = self._dense(P, f"{prefix}.mu", h)
        var = T.softplus(self._dense(P, f"{prefix}.var", h)) + VAR_FLOOR
        return GaussianParams(mu, var)

    def _decode_branch(self, P, prefix, z, n_layers) -> Tensor:
        return self._dense(P, f"{prefix}.out", self._trunk(P, prefix, z, n_layers))

    def _mean_head(self, out: Tensor) -> Tensor:
        return T.sigmoid(out) if self.config.likelihood == "bernoulli" else out

    def _gamma(self, raw: Tensor) -> TransformParams:
        kind = self.config.transform
        if kind == "affine":
            raw = raw + Tensor(spatial.identity_values("affine")[None, :])
        elif kind == "affine-decomp":
            scales = T.softplus(raw[:, 0:2] + SCALE_OFFSET)
            raw = T.concat([scales, raw[:, 2:6]], axis=1)
        return TransformParams(kind, raw, basis=self.basis, steps=self.config.cpab_steps)

    def _identity_gamma(self, batch: int) -> TransformParams:
        vals = np.tile(spatial.identity_values(self.config.transform, self.basis), (batch, 1))
        return TransformParams(self.config.transform, Tensor(vals), basis=self.basis,
                               steps=self.config.cpab_steps)

    def _warp(self, flat: Tensor, params: TransformParams) -> Tensor:
        B = flat.shape[0]
        img = flat.reshape(B, *self.config.image_shape)
        return spatial.spatial_transform(img, params).reshape(B, self.config.D)

    def _inverse(self, params: TransformParams) -> TransformParams:
        if params.kind == "affine" and not self.config.allow_matrix_inverse:
            raise UnsupportedInverse(
                "CVitae with raw affine parameters needs allow_matrix_inverse=True")
        return spatial.inverse(params, allow_matrix_inverse=True)

    @staticmethod
    def _flatten(x) -> Tensor:
        x = as_tensor(x)
        return x.reshape(x.shape[0], -1) if x.ndim > 2 else x

    # -- public API ------------------------------------------------------
    def encode(self, x, noise_P=None, params=None, force_identity=False):
        """Posterior parameters.

        VAE kinds return one ``GaussianParams``; VITAE kinds return
        ``(q_P, q_A)``.  For ``CVitae`` the appearance posterior is computed on
        ``x`` warped by the inverse of the transformation decoded from a z_P
        sample; ``noise_P=None`` uses the posterior mean.
        """
        P = self.params if params is None else params
        x = self._flatten(x)
        c = self.config
        if not self.is_vitae:
            return self._encode_branch(P, "q", x, len(c.enc_widths))
        n = len(c.enc_widths)
        q_P = self._encode_branch(P, "qP", x, n)
        if c.kind == "UVitae":
            return q_P, self._encode_branch(P, "qA", x, n)
        z_P = q_P.mu if noise_P is None else reparameterize(q_P, noise_P)
        gamma_d = self._identity_gamma(x.shape[0]) if force_identity else self._gamma(
            self._decode_branch(P, "pG", z_P, len(c.dec_widths)))
        x_enc = self._warp(x, self._inverse(gamma_d))
        return q_P, self._encode_branch(P, "qA", x_enc, n)

    def decode(self, z_A, z_P=None, params=None, force_identity=False):
        """Decoder mean, plus the decoded transformation for VITAE kinds."""
        P = self.params if params is None else params
        z_A = as_tensor(z_A)
        c = self.config
        if not self.is_vitae:
            return self._mean_head(self._decode_branch(P, "p", z_A, len(c.dec_widths))), None
        appearance = self._mean_head(self._decode_branch(P, "pA", z_A, len(c.dec_widths)))
        if force_identity:
            gamma_d = self._identity_gamma(z_A.shape[0])
        else:
            gamma_d = self._gamma(self._decode_branch(P, "pG", as_tensor(z_P), len(c.dec_widths)))
        return self._warp(appearance, gamma_d), gamma_d

    def forward(self, x, noise: dict, params=None, force_identity=False) -> ForwardResult:
        """One stochastic pass.  ``noise`` has key ``"z"`` (VAE kinds) or ``"A"`` and ``"P"``."""
        P = self.params if params is None else params
        x = self._flatten(x)
        c = self.config
        nd = len(c.dec_widths)
        if not self.is_vitae:
            q = self._encode_branch(P, "q", x, len(c.enc_widths))
            z = reparameterize(q, noise["z"])
            recon = self._mean_head(self._decode_branch(P, "p", z, nd))
            return ForwardResult(recon, q, z)

        n = len(c.enc_widths)
        q_P = self._encode_branch(P, "qP", x, n)
        z_P = reparameterize(q_P, noise["P"])
        if force_identity:
            gamma_d = self._identity_gamma(x.shape[0])
        else:
            gamma_d = self._gamma(self._decode_branch(P, "pG", z_P, nd))
        gamma_e = None
        if c.kind == "CVitae":
            gamma_e = self._inverse(gamma_d)
            if gamma_d.kind in ("affine-diffeo", "cpab"):
                assert np.array_equal(gamma_e.values.data, -gamma_d.values.data)
            q_A = self._encode_branch(P, "qA", self._warp(x, gamma_e), n)
        else:
            q_A = self._encode_branch(P, "qA", x, n)
        z_A = reparameterize(q_A, noise["A"])
        appearance = self._mean_head(self._decode_branch(P, "pA", z_A, nd))
        recon = self._warp(appearance, gamma_d)
        return ForwardResult(recon, q_A, z_A, q_P, z_P, gamma_e, gamma_d, appearance)

    def latent_dims(self) -> tuple:
        c = self.config
        return (c.d_A, c.d_P) if self.is_vitae else (c.latent_dim, 0)

    def sample_noise(self, rng: np.random.Generator, batch: int) -> dict:
        d_A, d_P = self.latent_dims()
        if not self.is_vitae:
            return {"z": rng.standard_normal((batch, d_A))}
        # draw order is fixed: appearance first, then perspective
        return {"A": rng.standard_normal((batch, d_A)), "P": rng.standard_normal((batch, d_P))}

    def generate(self, prior_noise: dict, params=None) -> Tensor:
        """Decode prior samples: sample z, decode appearance and transformation, warp."""
        if not self.is_vitae:
            return self.decode(prior_noise["z"], params=params)[0]
        return self.decode(prior_noise["A"], prior_noise["P"], params=params)[0]


def reparameterize(g: GaussianParams, noise) -> Tensor:
    # var carries a softplus floor, so sqrt never sees zero
    return g.mu + T.sqrt(g.var) * as_tensor(noise)


def build_model(config: ModelConfig, seed: int = 0) -> Model:
    return Model(config, np.random.default_rng(seed))


META_PREFIX = "__config__"


def model_to_arrays(model: Model) -> dict:
    arrays = {f"{META_PREFIX}{model.config.to_json()}": np.zeros(0)}
    arrays.update(model.state_dict())
    return arrays


def model_from_arrays(arrays: dict) -> Model:
    meta = [k for k in arrays if k.startswith(META_PREFIX)]
    if len(meta) != 1:
        raise ValueError("checkpoint carries no model config")
    config = ModelConfig.from_json(meta[0][len(META_PREFIX):])
    model = Model(config)
    model.load_state_dict(arrays)
    return model
