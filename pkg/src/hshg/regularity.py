"""Tilt-excess and related regularity diagnostics for a-harmonic functions on the half box.

Gradients live on edges, so every quantity here is a sum over directions
``k`` of averages over the ``k``-edges inside the half-ball.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import grid as G
from . import solver as S
from .fields import GridSpec, edge_coefficients, make_rng


class DegenerateError(ValueError):
    pass


def _pair(F, Gf, grid, region):
    d = grid.dim
    total = 0.0
    for k in range(d):
        m = G.region_mask(grid, region, G.edge_offset(k, d))
        if not m.any():
            raise ValueError(f"region {region} contains no {k}-edges")
        total += float(np.mean(F[k][m] * Gf[k][m]))
    return total


def tilt_field(phiH_d, grid):
    """``e_d + grad phi^H_d`` on edges (zero on edges outside the grid)."""
    d = grid.dim
    D = G.grad(phiH_d, grid)
    return [(D[k] + (k == d - 1)) * G.valid_mask(grid, G.edge_offset(k, d)) for k in range(d)]


def excess(u, phiH_d, grid, r):
    """``(Exc^H(r), b_min)``: least-squares fit of ``grad u`` by ``b (e_d + grad phi^H_d)`` on ``B_r^+``."""
    region = G.half_ball(r)
    E = tilt_field(phiH_d, grid)
    Du = G.grad(u, grid)
    ee = _pair(E, E, grid, region)
    if ee < 1e-14:
        raise DegenerateError(f"e_d + grad phi^H_d vanishes on the half-ball of radius {r}")
    b = _pair(Du, E, grid, region) / ee
    R = [Du[k] - b * E[k] for k in range(grid.dim)]
    return max(_pair(R, R, grid, region), 0.0), b


def excess_at(u, phiH_d, grid, r, b):
    """Excess functional evaluated at a given ``b``."""
    region = G.half_ball(r)
    E = tilt_field(phiH_d, grid)
    Du = G.grad(u, grid)
    R = [Du[k] - b * E[k] for k in range(grid.dim)]
    return _pair(R, R, grid, region)


def curvature(phiH_d, grid, r):
    """``avg_{B_r^+} |e_d + grad phi^H_d|^2``; the excess functional is ``Exc + curvature (b - b_min)^2``."""
    E = tilt_field(phiH_d, grid)
    return _pair(E, E, grid, G.half_ball(r))


def coercivity_check(phiH_d, grid, radii):
    d = grid.dim
    bound = 2.0 ** (-(d + 2))
    values = {float(r): curvature(phiH_d, grid, r) for r in radii}
    return {"curvature": values, "bound": bound, "passed": all(v >= bound for v in values.values())}


def energy(u, grid, r):
    Du = G.grad(u, grid)
    return _pair(Du, Du, grid, G.half_ball(r))


def mean_value_check(u, grid, radii):
    """Max over ``r < R`` of ``avg_{B_r^+}|grad u|^2 / avg_{B_R^+}|grad u|^2``."""
    radii = sorted(float(r) for r in radii)
    en = {r: energy(u, grid, r) for r in radii}
    ratios = {}
    for i, r in enumerate(radii):
        for R in radii[i + 1:]:
            ratios[(r, R)] = en[r] / en[R] if en[R] > 0 else float("nan")
    finite = [v for v in ratios.values() if np.isfinite(v)]
    return {"energies": en, "ratios": ratios, "max_ratio": max(finite) if finite else float("nan")}


def caccioppoli_ratio(u, grid, r):
    """``r^2 avg_{B_{r/2}^+}|grad u|^2 / avg_{B_r^+} u^2``."""
    num = energy(u, grid, r / 2)
    den = G.mean_square(u, grid, G.half_ball(r))
    if den == 0:
        raise DegenerateError("u vanishes on the half-ball")
    return r**2 * num / den


def caccioppoli_check(u, grid, radii, threshold=200.0):
    ratios = {float(r): caccioppoli_ratio(u, grid, r) for r in radii}
    return {"ratios": ratios, "threshold": threshold,
            "passed": all(np.isfinite(v) and v <= threshold for v in ratios.values())}


def excess_decay_check(u, phiH_d, grid, radii, alpha=0.5, c_pass=10.0, zero_tol=1e-20):
    """Worst ratio ``Exc(r) / ((r/R)^(2 alpha) Exc(R))`` over dyadic pairs ``r < R``."""
    radii = sorted(float(r) for r in radii)
    exc, bmin = {}, {}
    for r in radii:
        exc[r], bmin[r] = excess(u, phiH_d, grid, r)
    if max(exc.values()) <= zero_tol:
        return {"exc": exc, "b_min": bmin, "ratios": {}, "max_ratio": 0.0, "passed": True,
                "status": "identically zero excess"}
    ratios = {}
    for i, r in enumerate(radii):
        for R in radii[i + 1:]:
            ref = (r / R) ** (2 * alpha) * exc[R]
            ratios[(r, R)] = exc[r] / ref if ref > zero_tol else float("inf")
    worst = max(ratios.values()) if ratios else 0.0
    return {"exc": exc, "b_min": bmin, "ratios": ratios, "max_ratio": worst,
            "passed": bool(worst <= c_pass), "status": "ok"}


def decay_exponent(exc):
    """Slope of ``log Exc`` against ``log r``."""
    rs = np.array(sorted(exc))
    vals = np.array([exc[r] for r in rs])
    keep = vals > 0
    if keep.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(rs[keep]), np.log(vals[keep]), 1)[0])


def liouville_check(u, phiH_d, grid, radii, eps=0.05, b_tol=0.02):
    """Is ``u`` a multiple of ``x_d + phi^H_d`` on the analysis half-balls?"""
    radii = sorted(float(r) for r in radii)
    R = radii[-1]
    if energy(u, grid, R) == 0:
        return {"verdict": "trivial (zero)", "b": 0.0, "residuals": {}, "b_by_radius": {}}
    _, b = excess(u, phiH_d, grid, R)
    residuals, b_r = {}, {}
    for r in radii:
        residuals[r] = float(np.sqrt(excess_at(u, phiH_d, grid, r, b) / energy(u, grid, r)))
        b_r[r] = excess(u, phiH_d, grid, r)[1]
    spread = max(abs(x - b) for x in b_r.values()) / abs(b) if b != 0 else float("inf")
    ok = all(v <= eps for v in residuals.values()) and spread <= b_tol
    return {"verdict": "liouville-consistent" if ok else "not a multiple", "b": b,
            "residuals": residuals, "b_by_radius": b_r, "b_spread": spread}


# test functions -------------------------------------------------------------

def dirichlet_box(torus, height=None):
    """Non-periodic version of the upper half box, for all-Dirichlet samples."""
    d = torus.dim
    H = torus.cells[-1] - torus.origin[-1] if height is None else height
    cells = torus.cells[:-1] + (H + 1,)
    return GridSpec(d, cells, torus.spacing, torus.origin[:-1] + (0,), (False,) * d)


def harmonic_sample(grid, coef, data, tol=S.DEFAULT_TOL, method="amg"):
    """a-harmonic ``u`` with ``u = data`` on every non-periodic face.

    The flat boundary is the bottom face along the last axis; ``data`` must
    vanish there.
    """
    if grid.periodic[-1]:
        raise ValueError("the last axis must be non-periodic")
    if np.any(np.asarray(data)[..., 0] != 0):
        raise ValueError("boundary data must vanish on the flat boundary")
    faces = {k: ("dirichlet", "dirichlet") for k in range(grid.dim) if not grid.periodic[k]}
    bc = S.BCSpec(faces)
    return S.Operator(grid, coef, bc, method).solve(boundary=data, tol=tol)


def random_outer_data(grid, seed, modes=4):
    """``(x_d / H) g(x')`` with ``g`` a random low-mode trigonometric series.

    The coefficients decay like ``1/k`` and the mean mode carries unit weight,
    so the sample keeps a nonzero tilt along ``x_d + phi^H_d``.
    """
    rng = make_rng(seed)
    X = grid.mesh()
    d = grid.dim
    H = (grid.cells[-1] - 1) * grid.spacing
    g = np.full(grid.shape, 1.0 + 0.5 * rng.standard_normal())
    for k in range(d - 1):
        Lk = grid.cells[k] * grid.spacing
        for n in range(1, modes + 1):
            a, b = rng.standard_normal(2) / n
            g = g + a * np.cos(2 * np.pi * n * X[k] / Lk) + b * np.sin(2 * np.pi * n * X[k] / Lk)
    data = (X[-1] / H) * g
    data[..., 0] = 0.0
    return data


# two-scale expansion ----------------------------------------------------------

def node_gradient(u, grid):
    """Centred node gradient: average of the two adjacent edge differences."""
    return [G.to_nodes(G.dfwd(u, k, grid), k, grid) for k in range(grid.dim)]


def two_scale_error(field_, correctors, data_fn, interior=0.5, tol=S.DEFAULT_TOL, method="amg"):
    """Relative energy error of ``u_hom + sum_i phi_i d_i u_hom`` against ``u``.

    Both ``u`` and ``u_hom`` take the boundary values ``data_fn(X)`` on the
    faces of the (non-periodic) cell; the error is measured on the centred
    sub-box covering the fraction ``interior`` of each side.
    """
    torus = field_.grid
    d = torus.dim
    grid = GridSpec(d, torus.cells, torus.spacing, torus.origin, (False,) * d)
    a_hom = correctors.a_hom
    off = a_hom - np.diag(np.diag(a_hom))
    if np.abs(off).max() > 1e-3 * np.abs(a_hom).max():
        raise NotImplementedError("two-scale check supports diagonal a_hom only")
    X = grid.mesh()
    data = np.asarray(data_fn(X), dtype=float)
    bc = S.BCSpec({k: ("dirichlet", "dirichlet") for k in range(d)})
    coef = [c * G.valid_mask(grid, G.edge_offset(k, d)) for k, c in enumerate(edge_coefficients(field_))]
    u = S.Operator(grid, coef, bc, method).solve(boundary=data, tol=tol)
    coef_h = [np.full(grid.shape, a_hom[k, k]) for k in range(d)]
    u_hom = S.Operator(grid, coef_h, bc, method).solve(boundary=data, tol=tol)
    du = node_gradient(u_hom, grid)
    u2 = u_hom + sum(correctors.phi[i] * du[i] for i in range(d))
    lo = [(-interior / 2) * grid.lengths[k] for k in range(d)]
    hi = [(interior / 2) * grid.lengths[k] for k in range(d)]
    region = G.Region("box", radii=(tuple(lo), tuple(hi)))
    err = G.quad_avg(G.edge_components(G.grad(u - u2, grid), grid), grid, region)
    ref = G.quad_avg(G.edge_components(G.grad(u, grid), grid), grid, region)
    return err / ref


@dataclass
class ExcessReport:
    radii: list
    exc: dict
    b_min: dict
    decay_fit: float
    mean_value_ratios: dict
    coercivity_curvature: dict
    alpha: float
    max_decay_ratio: float = float("nan")
    passed: bool = False
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")

    def rows(self):
        """``(r, exc, b_min, mv_ratio, curvature)`` with ``mv_ratio`` relative to the largest radius."""
        R = max(self.radii)
        out = []
        for r in sorted(self.radii):
            mv = self.mean_value_ratios.get((r, R), 1.0 if r == R else float("nan"))
            out.append((r, self.exc[r], self.b_min[r], mv, self.coercivity_curvature[r]))
        return out


def excess_report(u, phiH_d, grid, radii, alpha=0.5, c_pass=10.0):
    radii = sorted(float(r) for r in radii)
    dec = excess_decay_check(u, phiH_d, grid, radii, alpha, c_pass)
    mv = mean_value_check(u, grid, radii)
    coer = coercivity_check(phiH_d, grid, radii)
    return ExcessReport(radii, dec["exc"], dec["b_min"], decay_exponent(dec["exc"]), mv["ratios"],
                        coer["curvature"], alpha, dec["max_ratio"], dec["passed"],
                        {"status": dec["status"], "mean_value_max": mv["max_ratio"],
                         "coercive": coer["passed"]})
