"""Whole-space correctors on the periodic torus.

``phi[i]`` solves ``-div(a grad phi_i) = div(a e_i)`` with zero mean,
``a_hom e_i`` is the volume average of the flux ``a (e_i + grad phi_i)``, and
``sigma[i, j, k]`` (plaquette ``(j, k)``) is the skew potential of the flux
correction ``q_i = a (e_i + grad phi_i) - a_hom e_i``:
``sum_k D_k sigma_ijk = q_ij``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import grid as G
from . import solver as S
from .fields import edge_coefficients

log = logging.getLogger(__name__)


@dataclass
class CorrectorSet:
    grid: object
    phi: np.ndarray
    sigma: np.ndarray
    a_hom: np.ndarray
    flux: np.ndarray
    residuals: dict = field(default_factory=dict)
    delta_table: dict = field(default_factory=dict)

    @property
    def dim(self):
        return self.grid.dim


def compute_phi(field_, i, tol=S.DEFAULT_TOL, method="amg", operator=None):
    grid = field_.grid
    if not all(grid.periodic):
        raise ValueError("whole-space correctors need a fully periodic grid")
    A = edge_coefficients(field_)
    op = operator or S.Operator(grid, A, S.PERIODIC, method)
    g = [A[k] if k == i else np.zeros(grid.shape) for k in range(grid.dim)]
    return op.solve(g=g, tol=tol)


def fluxes(A, phi, grid):
    """``out[i][j]`` = ``a (e_i + grad phi_i)`` component ``j`` on ``j``-edges."""
    d = grid.dim
    out = np.empty((d, d) + grid.shape)
    for i in range(d):
        dphi = G.grad(phi[i], grid)
        for j in range(d):
            out[i, j] = A[j] * ((i == j) + dphi[j])
    return out


def compute_ahom(field_, phi):
    grid = field_.grid
    q = fluxes(edge_coefficients(field_), phi, grid)
    d = grid.dim
    a_hom = np.empty((d, d))
    for i in range(d):
        for j in range(d):
            a_hom[j, i] = q[i, j].mean()
    return a_hom


def periodic_poisson(rhs, grid):
    """Zero-mean solution of the discrete periodic ``-Lap u = rhs`` by FFT."""
    h = grid.spacing
    eig = 0.0
    for k, n in enumerate(grid.shape):
        m = np.arange(n)
        shape = [1] * grid.dim
        shape[k] = n
        eig = eig + (4.0 / h**2) * np.sin(np.pi * m / n).reshape(shape) ** 2
    eig = np.broadcast_to(eig, grid.shape).copy()
    eig.flat[0] = 1.0
    r_hat = np.fft.fftn(rhs)
    r_hat.flat[0] = 0.0
    return np.fft.ifftn(r_hat / eig).real


def compute_sigma(field_, phi, a_hom, mean_tol=1e-9):
    grid = field_.grid
    d = grid.dim
    q = fluxes(edge_coefficients(field_), phi, grid)
    for i in range(d):
        q[i] -= a_hom[:, i].reshape((d,) + (1,) * d)
        means = np.abs(q[i].reshape(d, -1).mean(axis=1))
        if means.max() > mean_tol * max(1.0, np.abs(q[i]).max()):
            raise ValueError(f"flux correction q_{i} has nonzero mean {means.max():.3e}")
    sigma = np.zeros((d, d, d) + grid.shape)
    for i in range(d):
        for j in range(d):
            for k in range(j + 1, d):
                rhs = G.dfwd(q[i, k], j, grid) - G.dfwd(q[i, j], k, grid)
                s = periodic_poisson(rhs, grid)
                sigma[i, j, k] = s
                sigma[i, k, j] = -s
    return sigma, q


def sigma_divergence_residual(sigma, q, grid):
    """Relative ``|sum_k D_k sigma_ijk - q_ij|`` over all ``i, j``."""
    d = grid.dim
    num = den = 0.0
    for i in range(d):
        for j in range(d):
            lhs = sum(G.dbwd(sigma[i, j, k], k, grid) for k in range(d))
            num += np.sum((lhs - q[i, j]) ** 2)
            den += np.sum(q[i, j] ** 2)
    return float(np.sqrt(num / den)) if den > 0 else float(np.sqrt(num))


def corrector_components(phi, sigma, grid, indices=None):
    """``(values, offset)`` list making up ``|(phi, sigma)|^2`` for :func:`grid.quad_avg`."""
    indices = range(grid.dim) if indices is None else indices
    comps = []
    for i in indices:
        comps.append((phi[i], None))
        comps += G.tensor_components(sigma, grid, lead=(i,))
    return comps


def delta_table(correctors, radii):
    """``delta_r = (1/r) (avg_{B_r} |(phi, sigma)|^2)^(1/2)`` on balls about the origin."""
    grid = correctors.grid
    half = 0.5 * min(grid.lengths)
    comps = corrector_components(correctors.phi, correctors.sigma, grid)
    out = {}
    for r in radii:
        if r > half:
            raise ValueError(f"radius {r} exceeds half the torus width {half}")
        out[float(r)] = G.quad_avg(comps, grid, G.ball(r)) / r
    return out


def dyadic_radii(grid, start=None):
    """Powers of two (physical units) from ``start`` up to half the torus width."""
    h = grid.spacing
    start = start or 2 * h
    half = 0.5 * min(grid.lengths)
    r = start
    out = []
    while r <= half + 1e-12:
        out.append(r)
        r *= 2
    return out


def check_condition(table, spacing=1.0):
    """Partial sums of ``sum_m m delta_{2^m}^(1/3)`` and ``sum_m delta_{2^m}``.

    Keys of ``table`` are radii ``2^m h``; non-dyadic keys are ignored.
    """
    rows = []
    s13 = s1 = 0.0
    for r in sorted(table):
        m = np.log2(r / spacing)
        if abs(m - round(m)) > 1e-9 or m < 0:
            continue
        m = int(round(m))
        dlt = table[r]
        s13 += m * dlt ** (1 / 3)
        s1 += dlt
        rows.append({"m": m, "delta": dlt, "sum_m_delta13": s13, "sum_delta": s1})
    vals = [row["delta"] for row in rows]
    decaying = bool(all(b <= a for a, b in zip(vals, vals[1:])))
    return {"rows": rows, "sum_m_delta13": s13, "sum_delta": s1, "monotone_decay": decaying}


def fit_power_law(table, rmin=None, rmax=None):
    """Least-squares slope of ``log delta`` against ``log r``."""
    rs = np.array([r for r in sorted(table) if (rmin is None or r >= rmin) and (rmax is None or r <= rmax)])
    vals = np.array([table[r] for r in rs])
    keep = vals > 0
    if keep.sum() < 2:
        raise ValueError("need at least two positive entries to fit a power law")
    slope, _ = np.polyfit(np.log(rs[keep]), np.log(vals[keep]), 1)
    return float(slope)


def compute_correctors(field_, tol=S.DEFAULT_TOL, method="amg", radii=None):
    """Full whole-space corrector set with residuals and the delta table."""
    grid = field_.grid
    A = edge_coefficients(field_)
    op = S.Operator(grid, A, S.PERIODIC, method)
    phi = np.stack([compute_phi(field_, i, tol, operator=op) for i in range(grid.dim)])
    a_hom = compute_ahom(field_, phi)
    sigma, q = compute_sigma(field_, phi, a_hom)
    residuals = {}
    for i in range(grid.dim):
        g = [A[k] if k == i else np.zeros(grid.shape) for k in range(grid.dim)]
        residuals[f"phi_{i}"] = S.residual(grid, A, S.PERIODIC, phi[i], g=g, relative=True)
    residuals["sigma_div"] = sigma_divergence_residual(sigma, q, grid)
    out = CorrectorSet(grid, phi, sigma, a_hom, q, residuals)
    out.delta_table = delta_table(out, radii if radii is not None else dyadic_radii(grid))
    log.info("a_hom = %s, residuals %s", a_hom.tolist(), residuals)
    return out
