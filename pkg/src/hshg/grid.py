"""Staggered finite-difference calculus, region averages and dyadic cutoffs.

Storage conventions (all arrays have the node shape of the grid):

* scalars live on nodes;
* component ``k`` of a vector field (gradients, fluxes) lives on the edge
  midpoint ``p + e_k / 2``;
* a tensor entry ``T[..., j, k]`` with ``j != k`` lives on the plaquette
  centre ``p + (e_j + e_k) / 2``.

Along a non-periodic axis the last edge (or plaquette) slice points outside
the grid; it is kept at zero and excluded from averages.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _fwd(u, axis, periodic):
    if periodic:
        return np.roll(u, -1, axis=axis) - u
    out = np.zeros_like(u)
    src = [slice(None)] * u.ndim
    dst = [slice(None)] * u.ndim
    src[axis] = slice(1, None)
    dst[axis] = slice(None, -1)
    out[tuple(dst)] = u[tuple(src)] - u[tuple(dst)]
    return out


def _bwd(f, axis, periodic):
    """Backward difference ``f[p] - f[p - e]``; outside edges count as zero."""
    if periodic:
        return f - np.roll(f, 1, axis=axis)
    f = f.copy()
    last = [slice(None)] * f.ndim
    last[axis] = -1
    f[tuple(last)] = 0.0
    out = f.copy()
    src = [slice(None)] * f.ndim
    dst = [slice(None)] * f.ndim
    src[axis] = slice(None, -1)
    dst[axis] = slice(1, None)
    out[tuple(dst)] -= f[tuple(src)]
    return out


def dfwd(u, axis, grid):
    """Forward difference quotient, node -> edge (or edge -> plaquette)."""
    return _fwd(u, axis, grid.periodic[axis]) / grid.spacing


def dbwd(f, axis, grid):
    """Backward difference quotient, edge -> node (or plaquette -> edge)."""
    return _bwd(f, axis, grid.periodic[axis]) / grid.spacing


def grad(u, grid):
    return [dfwd(u, k, grid) for k in range(grid.dim)]


def div(F, grid):
    return sum(dbwd(F[k], k, grid) for k in range(grid.dim))


def edge_offset(k, dim):
    off = [0.0] * dim
    off[k] = 0.5
    return tuple(off)


def plaquette_offset(j, k, dim):
    off = [0.0] * dim
    off[j] += 0.5
    off[k] += 0.5
    return tuple(off)


def valid_mask(grid, offset):
    """False where a staggered location falls outside a non-periodic axis."""
    mask = np.ones(grid.shape, dtype=bool)
    for k, o in enumerate(offset):
        if o and not grid.periodic[k]:
            sl = [slice(None)] * grid.dim
            sl[k] = -1
            mask[tuple(sl)] = False
    return mask


def to_edges(u, k, grid):
    """Average a node field onto ``k``-edges."""
    if grid.periodic[k]:
        return 0.5 * (u + np.roll(u, -1, axis=k))
    return 0.5 * (u + u + _fwd(u, k, False)) * valid_mask(grid, edge_offset(k, grid.dim))


def to_nodes(f, k, grid):
    """Average a ``k``-edge field onto nodes (missing neighbours count as zero)."""
    if grid.periodic[k]:
        return 0.5 * (f + np.roll(f, 1, axis=k))
    g = f * valid_mask(grid, edge_offset(k, grid.dim))
    return 0.5 * (2 * g - _bwd(g, k, False))


@dataclass(frozen=True)
class Region:
    """Ball-type region around ``center``; radii in physical units.

    ``half_ball_neg`` is the reflection of ``half_ball_pos`` through the
    centre. ``box`` uses ``radii`` as ``(lower corner, upper corner)``.
    """

    kind: str
    radius: float = 0.0
    center: tuple | None = None
    radii: tuple | None = None

    def mask(self, X):
        d = len(X)
        c = self.center or (0.0,) * d
        Y = [X[k] - c[k] for k in range(d)]
        rr = sum(y**2 for y in Y)
        if self.kind == "ball":
            return rr < self.radius**2
        if self.kind == "half_ball_pos":
            return (rr < self.radius**2) & (Y[-1] > 0)
        if self.kind == "half_ball_neg":
            return (rr < self.radius**2) & (Y[-1] < 0)
        if self.kind == "annulus":
            r1, r2 = self.radii
            return (rr >= r1**2) & (rr < r2**2)
        if self.kind == "box":
            lo, hi = self.radii
            m = np.ones(np.shape(X[0]), dtype=bool)
            for k in range(d):
                m &= (Y[k] >= lo[k]) & (Y[k] < hi[k])
            return m
        raise ValueError(f"unknown region kind {self.kind!r}")


def ball(r):
    return Region("ball", r)


def half_ball(r):
    return Region("half_ball_pos", r)


def neg_half_ball(r):
    return Region("half_ball_neg", r)


def region_mask(grid, region, offset=None):
    offset = offset or (0.0,) * grid.dim
    return region.mask(grid.mesh(offset)) & valid_mask(grid, offset)


def mean_square(values, grid, region, offset=None):
    """Average of ``|values|^2`` over the staggered points inside ``region``."""
    m = region_mask(grid, region, offset)
    n = int(m.sum())
    if n == 0:
        raise ValueError(f"region {region} does not meet the grid")
    v = np.asarray(values)[m]
    return float(np.dot(v, v) / n)


def quad_avg(components, grid, region):
    """Quadratic average ``(avg_R |f|^2)^(1/2)`` of a possibly staggered field.

    ``components`` is either a node array or a list of ``(values, offset)``
    pairs; each component is averaged over its own points in the region
    (cell-centre membership) and the squares are summed.
    """
    if isinstance(components, np.ndarray):
        components = [(components, None)]
    total = sum(mean_square(v, grid, region, off) for v, off in components)
    return float(np.sqrt(total))


def edge_components(F, grid):
    return [(F[k], edge_offset(k, grid.dim)) for k in range(grid.dim)]


def tensor_components(T, grid, lead=()):
    """Strictly upper (j < k) plaquette entries of a skew tensor, each counted twice."""
    out = []
    d = grid.dim
    for j in range(d):
        for k in range(j + 1, d):
            v = np.sqrt(2.0) * T[lead + (j, k)]
            out.append((v, plaquette_offset(j, k, d)))
    return out


# dyadic cutoffs -------------------------------------------------------------

def smooth_drop(t):
    """1 for ``t <= 1/2``, 0 for ``t >= 1``, cubic smoothstep in between (max slope 3)."""
    u = np.clip(2.0 * np.asarray(t, dtype=float) - 1.0, 0.0, 1.0)
    return 1.0 - u * u * (3.0 - 2.0 * u)


@dataclass(frozen=True)
class CutoffSystem:
    """Radial partition of unity ``eta_m`` and slabs ``S_m`` with ``chi_m = eta_m S_m``.

    ``theta_m(x) = smooth_drop(|x| / (r0 2^(m+1)))``; ``eta_{-1} = theta_{-1}``
    and ``eta_m = theta_m - theta_{m-1}``, so the partial sums telescope to
    ``theta_M``. ``S_m(x) = smooth_drop(|x_d| / (2 L_m))``.
    """

    r0: float
    M: int
    L: tuple

    def theta(self, m, X):
        r = np.sqrt(sum(x**2 for x in X))
        return smooth_drop(r / (self.r0 * 2.0 ** (m + 1)))

    def eta(self, m, X):
        if m == -1:
            return self.theta(-1, X)
        return self.theta(m, X) - self.theta(m - 1, X)

    def width(self, m):
        return self.L[m + 1]

    def slab(self, m, X):
        return smooth_drop(np.abs(X[-1]) / (2.0 * self.width(m)))

    def chi(self, m, X):
        return self.eta(m, X) * self.slab(m, X)


def build_cutoffs(r0, M, L, spacing=None):
    """Validate and assemble a :class:`CutoffSystem`; ``L[m + 1]`` is ``L_m``."""
    if M < -1:
        raise ValueError("M must be >= -1")
    L = tuple(float(x) for x in L)
    if len(L) != M + 2:
        raise ValueError(f"need {M + 2} widths for scales -1..{M}, got {len(L)}")
    if spacing is not None and r0 < 8 * spacing - 1e-12:
        raise ValueError("r0 must be at least 8 grid spacings")
    for m in range(-1, M + 1):
        cap = r0 * 2.0 ** (m + 1)
        if not 0 < L[m + 1] <= cap * (1 + 1e-12):
            raise ValueError(f"L_{m} = {L[m + 1]} outside (0, {cap}]")
    return CutoffSystem(float(r0), int(M), L)
