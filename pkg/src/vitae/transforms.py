"""Planar affine transformation classes.

All functions accept either a single parameter vector of shape ``(6,)`` with
points ``(N, 2)`` or a batch of parameter vectors ``(B, 6)`` with points
``(N, 2)`` or ``(B, N, 2)``.  Parameters and points may carry gradients.

Three parametrizations are provided:

* raw affine: ``gamma`` is the row-major 2x3 matrix ``[A | b]``;
* decomposed affine: ``(s_x, s_y, alpha, m, t_x, t_y)`` meaning
  ``R(alpha) @ Shear(m) @ diag(s_x, s_y)`` followed by translation;
* velocity affine: ``gamma`` fills the top two rows of a 3x3 generator whose
  matrix exponential is the transformation, so ``-gamma`` is the inverse.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import NonPositiveScale, ShapeMismatch
from .tensor import Tensor, as_tensor

IDENTITY_AFFINE = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
EXPM_TAYLOR_TERMS = 13


@dataclass
class AffineParams:
    gamma: Tensor


@dataclass
class DecomposedAffineParams:
    """``values[..., :]`` = (s_x, s_y, alpha, m, t_x, t_y).

    When ``inverted`` is set the same six numbers describe the inverse map
    ``p -> diag(s_x, s_y) @ Shear(m) @ R(alpha) @ (p + t)``, i.e. translation
    first and the linear factors in reverse order.  :func:`decomposed_inverse`
    produces this form.
    """

    values: Tensor
    inverted: bool = False


@dataclass
class VelocityAffineParams:
    gamma: Tensor


# -- helpers ----------------------------------------------------------------
def _coef(mat: Tensor, i: int, j: int) -> Tensor:
    """Entry (i, j) of a 2-D matrix (0-d result) or a (B, r, c) batch ((B, 1) result)."""
    if mat.ndim == 2:
        return mat[i, j]
    return mat[:, i, j:j + 1]


def _split_points(points: Tensor, batched_params: bool):
    x = points[..., 0]
    y = points[..., 1]
    if batched_params and points.ndim == 2:
        n = points.shape[0]
        x = x.reshape(1, n)
        y = y.reshape(1, n)
    return x, y


def _stack_xy(x: Tensor, y: Tensor) -> Tensor:
    return T.concat([x.reshape(x.shape + (1,)), y.reshape(y.shape + (1,))], axis=-1)


def apply_matrix(mat, points) -> Tensor:
    """Apply the top 2x3 block of ``mat`` (shape (2|3, 3) or (B, 2|3, 3)) to ``points``."""
    mat, points = as_tensor(mat), as_tensor(points)
    if points.shape[-1] != 2:
        raise ShapeMismatch(f"points must have a trailing axis of 2, got {points.shape}")
    batched = mat.ndim == 3
    x, y = _split_points(points, batched)
    nx = _coef(mat, 0, 0) * x + _coef(mat, 0, 1) * y + _coef(mat, 0, 2)
    ny = _coef(mat, 1, 0) * x + _coef(mat, 1, 1) * y + _coef(mat, 1, 2)
    return _stack_xy(nx, ny)


def _as_matrix6(vec: Tensor) -> Tensor:
    if vec.shape[-1] != 6:
        raise ShapeMismatch(f"expected 6 transformation parameters, got {vec.shape}")
    return vec.reshape(vec.shape[:-1] + (2, 3))


# -- raw affine ---------------------------------------------------------------
def affine_apply(gamma, points) -> Tensor:
    gamma = gamma.gamma if isinstance(gamma, AffineParams) else as_tensor(gamma)
    return apply_matrix(_as_matrix6(gamma), points)


def affine_inverse_matrix(gamma) -> Tensor:
    """Explicit inverse ``[A^-1 | -A^-1 b]`` as a (…, 2, 3) matrix.

    Exists only while ``det A != 0``; near-singular ``A`` produces huge
    entries (and NonFinite at exactly zero), which is the instability the
    raw parametrization is known for.
    """
    g = gamma.gamma if isinstance(gamma, AffineParams) else as_tensor(gamma)
    a, b, tx, c, d, ty = (g[..., k:k + 1] if g.ndim > 1 else g[k] for k in range(6))
    det = a * d - b * c
    ia, ib, ic, id_ = d / det, -b / det, -c / det, a / det
    itx = -(ia * tx + ib * ty)
    ity = -(ic * tx + id_ * ty)
    flat = T.concat([_col(v) for v in (ia, ib, itx, ic, id_, ity)], axis=-1)
    return _as_matrix6(flat)


def _col(v: Tensor) -> Tensor:
    return v.reshape(1) if v.ndim == 0 else v


# -- decomposed affine --------------------------------------------------------
def _check_scales(values: Tensor):
    s = values.data[..., :2]
    if np.any(s <= 0):
        raise NonPositiveScale("decomposed affine scales must be strictly positive")


def decomposed_matrix(d: DecomposedAffineParams) -> Tensor:
    """The (…, 2, 3) matrix equivalent of a decomposed parameter set."""
    v = as_tensor(d.values)
    if v.shape[-1] != 6:
        raise ShapeMismatch(f"expected 6 decomposed parameters, got {v.shape}")
    _check_scales(v)
    sx, sy, alpha, m, tx, ty = (v[..., k:k + 1] if v.ndim > 1 else v[k] for k in range(6))
    c, s = T.cos(alpha), T.sin(alpha)
    if not d.inverted:
        # R @ Sh @ S
        l00, l01 = c * sx, (c * m - s) * sy
        l10, l11 = s * sx, (s * m + c) * sy
        bx, by = tx, ty
    else:
        # S @ Sh @ R, applied after the translation
        l00, l01 = sx * (c + m * s), sx * (m * c - s)
        l10, l11 = sy * s, sy * c
        bx = l00 * tx + l01 * ty
        by = l10 * tx + l11 * ty
    flat = T.concat([_col(e) for e in (l00, l01, bx, l10, l11, by)], axis=-1)
    return _as_matrix6(flat)


def decomposed_apply(d: DecomposedAffineParams, points) -> Tensor:
    return apply_matrix(decomposed_matrix(d), points)


def decomposed_inverse(d: DecomposedAffineParams) -> DecomposedAffineParams:
    """Reciprocal scales and negated angle, shear and translation.

    The returned parameters are flagged ``inverted`` so that applying them
    composes to the identity with the original map for any shear.
    """
    v = as_tensor(d.values)
    _check_scales(v)
    scales = v[..., 0:2]
    rest = v[..., 2:6]
    return DecomposedAffineParams(T.concat([1.0 / scales, -rest], axis=-1), inverted=not d.inverted)


# -- velocity affine ------------------------------------------------------------
def _generator(gamma: Tensor) -> Tensor:
    top = _as_matrix6(gamma)
    zeros = Tensor(np.zeros(top.shape[:-2] + (1, 3)))
    return T.concat([top, zeros], axis=-2)


def _squarings(mat: np.ndarray) -> int:
    # infinity norm of the largest matrix in the batch
    norm = float(np.max(np.abs(mat).sum(axis=-1))) if mat.size else 0.0
    if norm < 0.5:
        return 0
    return max(0, math.ceil(math.log2(norm / 0.5)) + 1)


def expm(mat) -> Tensor:
    """Matrix exponential of a (…, n, n) tensor by scaling and squaring
    around a 13-term Taylor core, differentiable through autodiff."""
    mat = as_tensor(mat)
    n = mat.shape[-1]
    eye = Tensor(np.eye(n).reshape((1,) * (mat.ndim - 2) + (n, n)))
    s = _squarings(mat.data)
    a = mat * (0.5 ** s) if s else mat
    # Horner form of sum_{k<=13} a^k / k!
    out = eye + a / float(EXPM_TAYLOR_TERMS)
    for k in range(EXPM_TAYLOR_TERMS - 1, 0, -1):
        out = eye + T.matmul(a, out) / float(k)
    for _ in range(s):
        out = T.matmul(out, out)
    return out


def expm_homogeneous(gamma) -> Tensor:
    """3x3 (or (B, 3, 3)) exponential of the velocity generator built from ``gamma``."""
    gamma = gamma.gamma if isinstance(gamma, VelocityAffineParams) else as_tensor(gamma)
    return expm(_generator(gamma))


def velocity_affine_apply(gamma, points, sign: int = 1) -> Tensor:
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    gamma = gamma.gamma if isinstance(gamma, VelocityAffineParams) else as_tensor(gamma)
    if sign == -1:
        gamma = -gamma
    return apply_matrix(expm_homogeneous(gamma), points)
