"""Continuous piecewise-affine velocity fields on a triangulated unit square.

The unit square is cut into ``nx * ny`` rectangular cells, each split into four
triangles around its centre.  Every triangle carries an affine velocity
``v(p) = A_t @ [p, 1]``; continuity across shared edges (and, optionally, a
velocity tangent to the outer boundary) restricts the stacked ``A_t`` to a
linear subspace whose orthonormal basis is the parameter space.

Triangle ``4 * (cy * nx + cx) + k`` of cell ``(cx, cy)`` has ``k`` = 0 bottom,
1 right, 2 top, 3 left.  A point on a shared edge belongs to the lowest
indexed triangle that contains it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DegenerateBasis, OutOfDomain, ShapeMismatch
from .tensor import Tensor, as_tensor

NULLSPACE_TOL = 1e-10
DEFAULT_STEPS = 8


@dataclass(frozen=True)
class Tessellation:
    nx: int
    ny: int
    zero_boundary: bool
    triangles: np.ndarray  # (4*nx*ny, 3, 2) vertex coordinates

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    def locate(self, points: np.ndarray) -> np.ndarray:
        """Triangle index for each point of an (..., 2) array in [0, 1]^2."""
        p = np.clip(np.asarray(points, dtype=float), 0.0, 1.0)
        fx = p[..., 0] * self.nx
        fy = p[..., 1] * self.ny
        # ceil - 1 sends points on a cell boundary to the lower-indexed cell
        cx = np.clip(np.ceil(fx).astype(np.intp) - 1, 0, self.nx - 1)
        cy = np.clip(np.ceil(fy).astype(np.intp) - 1, 0, self.ny - 1)
        u = fx - cx
        v = fy - cy
        k = np.where(
            (v <= u) & (u + v <= 1.0), 0,
            np.where(u >= v, 1, np.where(u + v >= 1.0, 2, 3)),
        )
        return 4 * (cy * self.nx + cx) + k


@dataclass(frozen=True)
class CpabBasis:
    tessellation: Tessellation
    B: np.ndarray            # (6*T, d) orthonormal columns
    constraints: np.ndarray  # (m, 6*T)

    @property
    def d_cpab(self) -> int:
        return self.B.shape[1]


@dataclass
class CpabParams:
    theta: Tensor
    basis: CpabBasis

    def __post_init__(self):
        if self.theta.shape[-1] != self.basis.d_cpab:
            raise ShapeMismatch(f"theta has {self.theta.shape[-1]} entries, basis has {self.basis.d_cpab}")


def build_tessellation(nx: int, ny: int, zero_boundary: bool = True) -> Tessellation:
    if nx < 1 or ny < 1:
        raise ValueError("nx and ny must be >= 1")
    tris = []
    for cy in range(ny):
        for cx in range(nx):
            x0, x1 = cx / nx, (cx + 1) / nx
            y0, y1 = cy / ny, (cy + 1) / ny
            c = ((x0 + x1) / 2, (y0 + y1) / 2)
            corners = [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]
            for k in range(4):
                tris.append([corners[k], corners[(k + 1) % 4], c])
    return Tessellation(nx, ny, bool(zero_boundary), np.array(tris, dtype=float))


def _row(tri: int, comp: int, vertex, n_cols: int, sign: float = 1.0) -> np.ndarray:
    r = np.zeros(n_cols)
    base = 6 * tri + 3 * comp
    r[base:base + 3] = sign * np.array([vertex[0], vertex[1], 1.0])
    return r


def constraint_matrix(tess: Tessellation) -> np.ndarray:
    n_cols = 6 * tess.n_triangles
    key = lambda p: (round(p[0] * 4 * tess.nx), round(p[1] * 4 * tess.ny))
    edges = {}
    for t, tri in enumerate(tess.triangles):
        for a in range(3):
            p, q = tri[a], tri[(a + 1) % 3]
            edges.setdefault(frozenset((key(p), key(q))), []).append((t, p, q))
    rows = []
    for owners in edges.values():
        if len(owners) == 2:
            (t, p, q), (s, _, _) = owners
            for vert in (p, q):
                for comp in (0, 1):
                    rows.append(_row(t, comp, vert, n_cols) + _row(s, comp, vert, n_cols, -1.0))
        elif tess.zero_boundary:
            t, p, q = owners[0]
            # boundary edge: the normal velocity component vanishes
            comp = 0 if np.isclose(p[0], q[0]) else 1
            for vert in (p, q):
                rows.append(_row(t, comp, vert, n_cols))
    return np.array(rows).reshape(-1, n_cols)


def build_continuity_basis(tess: Tessellation) -> CpabBasis:
    L = constraint_matrix(tess)
    n_cols = L.shape[1]
    if L.shape[0]:
        _, s, vt = np.linalg.svd(L, full_matrices=True)
        rank = int(np.sum(s > NULLSPACE_TOL * max(1.0, s[0])))
    else:
        vt = np.eye(n_cols)
        rank = 0
    B = vt[rank:].T.copy()
    if B.shape[1] == 0:
        raise DegenerateBasis("continuity constraints leave no free parameters")
    return CpabBasis(tess, B, L)


def _affine_blocks(theta: Tensor, basis: CpabBasis) -> Tensor:
    """(B, T, 6) per-triangle affine velocities from (B, d) coefficients."""
    flat = T.matmul(theta, Tensor(basis.B.T))
    return flat.reshape(theta.shape[0], basis.tessellation.n_triangles, 6)


def _velocity(blocks: Tensor, points: Tensor, tess: Tessellation) -> Tensor:
    # points: (B, N, 2), already inside the unit square
    tri = tess.locate(points.data)
    b = np.arange(points.shape[0])[:, None, None]
    per_point = T.take(blocks, (b, tri[:, :, None], np.arange(6)[None, None, :]))
    x = points[:, :, 0]
    y = points[:, :, 1]
    vx = per_point[:, :, 0] * x + per_point[:, :, 1] * y + per_point[:, :, 2]
    vy = per_point[:, :, 3] * x + per_point[:, :, 4] * y + per_point[:, :, 5]
    return T.concat([vx.reshape(vx.shape + (1,)), vy.reshape(vy.shape + (1,))], axis=-1)


def _batched(theta, points):
    theta, points = as_tensor(theta), as_tensor(points)
    single = theta.ndim == 1
    if single:
        theta = theta.reshape(1, theta.shape[0])
    if points.ndim == 2:
        points = points.reshape(1, *points.shape)
        if theta.shape[0] > 1:
            points = T.concat([points] * theta.shape[0], axis=0)
    return theta, points, single


def _unbatch(out: Tensor, single: bool) -> Tensor:
    return out.reshape(out.shape[1:]) if single else out


def cpab_velocity(theta, points, basis: CpabBasis, strict: bool = False) -> Tensor:
    """Velocity at ``points``; points outside the square are clamped (or raise with ``strict``)."""
    if isinstance(theta, CpabParams):
        theta, basis = theta.theta, theta.basis
    theta, points, single = _batched(theta, points)
    if strict and (np.any(points.data < 0.0) or np.any(points.data > 1.0)):
        raise OutOfDomain("points outside [0, 1]^2")
    points = T.clamp(points, 0.0, 1.0)
    out = _velocity(_affine_blocks(theta, basis), points, basis.tessellation)
    return _unbatch(out, single)


def cpab_apply(theta, points, basis: CpabBasis, steps: int = DEFAULT_STEPS, sign: int = 1) -> Tensor:
    """Integrate the stationary field for unit time by scaling and squaring.

    One Euler step of size ``2**-steps`` is composed with itself ``steps``
    times.  Each composition re-evaluates the map at the displaced points, so
    the whole thing unrolls into ``2**steps`` Euler steps.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    if isinstance(theta, CpabParams):
        theta, basis = theta.theta, theta.basis
    theta, points, single = _batched(theta, points)
    if sign == -1:
        theta = -theta
    blocks = _affine_blocks(theta, basis)
    h = 2.0 ** -steps
    p = T.clamp(points, 0.0, 1.0)
    for _ in range(2 ** steps):
        p = T.clamp(p + h * _velocity(blocks, p, basis.tessellation), 0.0, 1.0)
    return _unbatch(p, single)
