"""Uniformly elliptic coefficient fields on periodic rectangular grids.

Every generator returns a :class:`CoefficientField` holding one ``d x d``
matrix per grid cell. Cells are centred on grid nodes; the solver turns cell
values into edge values by harmonic averaging (see :func:`edge_coefficients`).
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

ELLIPTIC_SLACK = 1e-12
MAX_BALLS = 10**7
RNG_NAME = "philox"


class EllipticityError(ValueError):
    """A matrix violates ``|A v| <= |v|`` or ``v . A v >= lam |v|^2``."""

    def __init__(self, message, direction=None):
        super().__init__(message)
        self.direction = direction


@dataclass(frozen=True)
class GridSpec:
    """Uniform grid with ``cells[k]`` nodes along axis ``k``.

    ``origin`` is the node index of the physical origin; node ``i`` sits at
    ``(i - origin) * spacing``. For the torus the default origin is the
    centre node, which is also the point where half-space boxes are cut.
    Axes flagged non-periodic end at the first and last node.
    """

    dim: int
    cells: tuple
    spacing: float = 1.0
    origin: tuple | None = None
    periodic: tuple | None = None

    def __post_init__(self):
        cells = tuple(int(c) for c in self.cells)
        if self.dim not in (2, 3):
            raise ValueError(f"dim must be 2 or 3, got {self.dim}")
        if len(cells) != self.dim:
            raise ValueError("cells must have one entry per axis")
        if min(cells) < 8:
            raise ValueError("need at least 8 cells per axis")
        if not self.spacing > 0:
            raise ValueError("spacing must be positive")
        origin = self.origin
        if origin is None:
            origin = tuple(c // 2 for c in cells)
        origin = tuple(int(o) for o in origin)
        if len(origin) != self.dim:
            raise ValueError("origin must have one entry per axis")
        periodic = self.periodic
        if periodic is None:
            periodic = (True,) * self.dim
        periodic = tuple(bool(p) for p in periodic)
        if len(periodic) != self.dim:
            raise ValueError("periodic must have one entry per axis")
        object.__setattr__(self, "periodic", periodic)
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "spacing", float(self.spacing))

    @property
    def shape(self):
        return self.cells

    @property
    def lengths(self):
        return tuple(c * self.spacing for c in self.cells)

    def coords(self, axis, offset=0.0):
        """1-D physical coordinates along ``axis``, shifted by ``offset`` cells."""
        idx = np.arange(self.cells[axis], dtype=float)
        return (idx - self.origin[axis] + offset) * self.spacing

    def mesh(self, offsets=None):
        offsets = offsets or (0.0,) * self.dim
        axes = [self.coords(k, offsets[k]) for k in range(self.dim)]
        return np.meshgrid(*axes, indexing="ij")


@dataclass(frozen=True)
class CoefficientField:
    grid: GridSpec
    cells: np.ndarray
    lam: float
    symmetric: bool
    provenance: dict = field(default_factory=dict)

    @property
    def dim(self):
        return self.grid.dim

    def is_diagonal(self):
        d = self.dim
        off = ~np.eye(d, dtype=bool)
        return not np.any(self.cells[..., off])

    def diagonal(self, k):
        return self.cells[..., k, k]

    def transposed(self):
        """Field with every cell matrix replaced by its transpose."""
        return dataclasses.replace(
            self, cells=np.ascontiguousarray(np.swapaxes(self.cells, -1, -2))
        )


def make_rng(seed):
    """Counter-based generator; the seed is reduced to 64 bits."""
    return np.random.Generator(np.random.Philox(int(seed) & (2**64 - 1)))


def ellipticity_bounds(matrices):
    """Return ``(min eig of symmetric part, max operator norm)`` over a stack."""
    mats = np.asarray(matrices, dtype=float)
    d = mats.shape[-1]
    flat = mats.reshape(-1, d, d)
    flat = np.unique(flat, axis=0)
    if not np.all(np.isfinite(flat)):
        raise EllipticityError("non-finite coefficient entries")
    sym = 0.5 * (flat + np.swapaxes(flat, -1, -2))
    lo = np.linalg.eigvalsh(sym).min()
    hi = np.linalg.norm(flat, ord=2, axis=(-2, -1)).max()
    return float(lo), float(hi)


def check_matrix(matrix, dim):
    """Validate one ``d x d`` matrix and return its ellipticity constant."""
    a = np.asarray(matrix, dtype=float)
    if a.shape != (dim, dim):
        raise ValueError(f"expected a {dim}x{dim} matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise EllipticityError("matrix has non-finite entries")
    u, s, vt = np.linalg.svd(a)
    if s[0] > 1 + ELLIPTIC_SLACK:
        raise EllipticityError(
            f"upper ellipticity bound violated: |A v| = {s[0]:.6g} |v|", direction=vt[0]
        )
    w, vecs = np.linalg.eigh(0.5 * (a + a.T))
    if w[0] <= 0:
        raise EllipticityError(
            f"lower ellipticity bound violated: v.Av = {w[0]:.6g} |v|^2", direction=vecs[:, 0]
        )
    return float(w[0])


def certify(field, probe_directions=16):
    """Raise :class:`EllipticityError` unless every cell matrix obeys the bounds.

    Besides the eigen/SVD check, a fixed fan of unit directions is probed
    directly so the certificate does not rest on one linear-algebra path.
    """
    lo, hi = ellipticity_bounds(field.cells)
    if lo < field.lam - ELLIPTIC_SLACK:
        raise EllipticityError(f"min eigenvalue {lo:.6g} below lambda {field.lam:.6g}")
    if hi > 1 + ELLIPTIC_SLACK:
        raise EllipticityError(f"operator norm {hi:.6g} exceeds 1")
    d = field.dim
    mats = np.unique(field.cells.reshape(-1, d, d), axis=0)
    rng = make_rng(0)
    dirs = rng.standard_normal((probe_directions, d))
    dirs = np.vstack([np.eye(d), dirs / np.linalg.norm(dirs, axis=1, keepdims=True)])
    av = np.einsum("nij,pj->npi", mats, dirs)
    if np.any(np.linalg.norm(av, axis=-1) > 1 + ELLIPTIC_SLACK):
        raise EllipticityError("probe direction violates |A v| <= |v|")
    if np.any(np.einsum("npi,pi->np", av, dirs) < field.lam - ELLIPTIC_SLACK):
        raise EllipticityError("probe direction violates v.Av >= lam")
    return True


def _finish(grid, cells, provenance):
    cells = np.ascontiguousarray(cells, dtype=float)
    lo, _ = ellipticity_bounds(cells)
    symmetric = bool(np.array_equal(cells, np.swapaxes(cells, -1, -2)))
    out = CoefficientField(grid, cells, min(lo, 1.0), symmetric, provenance)
    certify(out)
    return out


def _broadcast_matrix(grid, matrix):
    return np.broadcast_to(np.asarray(matrix, float), grid.shape + (grid.dim, grid.dim)).copy()


def gen_constant(grid, matrix):
    lam = check_matrix(matrix, grid.dim)
    cells = _broadcast_matrix(grid, matrix)
    out = _finish(grid, cells, {"generator": "constant", "params": {"matrix": np.asarray(matrix, float).tolist()},
                                "seed": "deterministic"})
    return dataclasses.replace(out, lam=lam)


def _check_commensurate(length, spacing, what):
    ratio = length / spacing
    if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
        raise ValueError(f"{what} ({length}) is not an integer multiple of the spacing ({spacing})")
    return int(round(ratio))


def gen_laminate(grid, axis, values, breakpoints, period):
    """Scalar laminate ``alpha(x_axis) * Id`` with the given periodic profile.

    ``breakpoints`` are the left ends of the phases as fractions of the
    period (first one 0); phase ``i`` carries ``values[i]``. The phase is
    measured from the physical origin.
    """
    values = np.asarray(values, dtype=float)
    breaks = np.asarray(breakpoints, dtype=float)
    if values.shape != breaks.shape or values.ndim != 1 or len(values) == 0:
        raise ValueError("values and breakpoints must be equal-length 1-D sequences")
    if breaks[0] != 0 or np.any(np.diff(breaks) <= 0) or breaks[-1] >= 1:
        raise ValueError("breakpoints must start at 0, increase and stay below 1")
    if np.any(values <= 0) or np.any(values > 1):
        raise EllipticityError("laminate values must lie in (0, 1]")
    steps = _check_commensurate(period, grid.spacing, "period")
    if grid.cells[axis] % steps:
        raise ValueError("period does not tile the grid along the laminate axis")
    idx = np.arange(grid.cells[axis]) - grid.origin[axis]
    phase = np.mod(idx, steps) / steps
    alpha = values[np.searchsorted(breaks, phase, side="right") - 1]
    shape = [1] * grid.dim
    shape[axis] = -1
    alpha = np.broadcast_to(alpha.reshape(shape), grid.shape)
    cells = alpha[..., None, None] * np.eye(grid.dim)
    params = {"axis": int(axis), "values": values.tolist(), "breakpoints": breaks.tolist(),
              "period": float(period)}
    return _finish(grid, cells, {"generator": "laminate", "params": params, "seed": "deterministic"})


def gen_checkerboard(grid, values=(1.0, 0.25), blocks=2):
    """``blocks^d`` checkerboard of two scalar phases filling the torus."""
    for c in grid.cells:
        if c % blocks:
            raise ValueError("blocks must divide the number of cells per axis")
    idx = np.indices(grid.shape)
    parity = sum((idx[k] // (grid.cells[k] // blocks)) for k in range(grid.dim)) % 2
    alpha = np.where(parity == 0, values[0], values[1])
    cells = alpha[..., None, None] * np.eye(grid.dim)
    params = {"values": list(map(float, values)), "blocks": int(blocks)}
    return _finish(grid, cells, {"generator": "checkerboard", "params": params, "seed": "deterministic"})


def poisson_centers(grid, intensity, seed):
    """Homogeneous Poisson process on the torus covering ``grid``."""
    volume = float(np.prod(grid.lengths))
    mean = intensity * volume
    if mean > MAX_BALLS:
        raise ValueError(f"expected ball count {mean:.3g} exceeds the {MAX_BALLS:.0e} guard")
    rng = make_rng(seed)
    count = rng.poisson(mean) if mean > 0 else 0
    lengths = np.asarray(grid.lengths)
    return rng.random((count, grid.dim)) * lengths


def gen_poisson_inclusions(grid, intensity, radius, a_matrix, b_matrix, seed):
    """Balls of ``a_matrix`` (radius ``radius``) in a ``b_matrix`` background."""
    check_matrix(a_matrix, grid.dim)
    check_matrix(b_matrix, grid.dim)
    if radius < 2 * grid.spacing:
        raise ValueError("radius must be at least two grid spacings")
    if intensity < 0:
        raise ValueError("intensity must be non-negative")
    centers = poisson_centers(grid, intensity, seed)
    h = grid.spacing
    inside = np.zeros(grid.shape, dtype=bool)
    reach = int(np.ceil(radius / h)) + 1
    offs = np.arange(-reach, reach + 1)
    # node i sits at torus coordinate i*h (the physical shift is a pure relabelling)
    for c in centers:
        base = np.floor(c / h).astype(int)
        ix = [np.mod(base[k] + offs, grid.cells[k]) for k in range(grid.dim)]
        dist2 = sum(
            (((base[k] + offs) * h - c[k]) ** 2).reshape([-1 if j == k else 1 for j in range(grid.dim)])
            for k in range(grid.dim)
        )
        inside[np.ix_(*ix)] |= dist2 < radius**2
    a = np.asarray(a_matrix, float)
    b = np.asarray(b_matrix, float)
    cells = np.where(inside[..., None, None], a, b)
    params = {"intensity": float(intensity), "radius": float(radius), "a_matrix": a.tolist(),
              "b_matrix": b.tolist(), "n_balls": int(len(centers))}
    return _finish(grid, cells, {"generator": "poisson_inclusions", "params": params,
                                 "seed": int(seed), "rng": RNG_NAME})


def gaussian_scalar_field(grid, beta, seed):
    """Unit-variance stationary Gaussian field with covariance decaying like ``|x|^-beta``.

    Synthesised on the torus from white noise filtered by ``|k|^((beta-d)/2)``,
    the square root of the Fourier transform of ``|x|^-beta``.
    """
    d = grid.dim
    if not 0 < beta < d:
        raise ValueError(f"beta must lie in (0, {d}), got {beta}")
    rng = make_rng(seed)
    noise = rng.standard_normal(grid.shape)
    freqs = np.meshgrid(*[np.fft.fftfreq(n, d=grid.spacing) for n in grid.shape], indexing="ij")
    k = np.sqrt(sum(f**2 for f in freqs))
    amp = np.zeros_like(k)
    amp[k > 0] = k[k > 0] ** ((beta - d) / 2)
    g = np.fft.ifftn(np.fft.fftn(noise) * amp).real
    return g / g.std()


def clamped_affine(t, lo, hi):
    """Lipschitz map sending a standard normal value onto ``[lo, hi]``.

    The mean maps to the midpoint and +/- 2 standard deviations to the ends.
    """
    return np.clip(0.5 * (lo + hi) + 0.25 * (hi - lo) * t, lo, hi)


def gen_gaussian_lipschitz(grid, beta, xi_range, seed):
    lo, hi = map(float, xi_range)
    if not 0 < lo <= hi <= 1:
        raise EllipticityError("xi_range must satisfy 0 < lo <= hi <= 1")
    g = gaussian_scalar_field(grid, beta, seed)
    alpha = clamped_affine(g, lo, hi)
    cells = alpha[..., None, None] * np.eye(grid.dim)
    params = {"beta": float(beta), "xi_range": [lo, hi]}
    return _finish(grid, cells, {"generator": "gaussian_lipschitz", "params": params,
                                 "seed": int(seed), "rng": RNG_NAME})


def edge_coefficients(field):
    """Per-direction edge coefficients from harmonic averaging of cell values.

    Entry ``[k][i]`` belongs to the edge from node ``i`` to ``i + e_k``
    (periodic wrap). Only diagonal cell matrices are supported.
    """
    if not field.is_diagonal():
        raise NotImplementedError("the finite-difference stencil needs diagonal cell matrices")
    out = []
    for k in range(field.dim):
        a = field.diagonal(k)
        b = np.roll(a, -1, axis=k)
        out.append(2 * a * b / (a + b))
    return out
