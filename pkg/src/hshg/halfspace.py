"""Dyadic adaptation of the whole-space corrector to a Dirichlet half-space.

The upper half of the torus (``x_d >= 0``, laterally periodic) is the
truncated half-space box. On scale ``m`` the boundary trace of ``phi_d`` is
cut out with ``chi_m = eta_m S_m`` and the a-harmonic correction ``phi_m``
is solved; ``phi^H_{d,M} = phi_d - sum_{m<=M} (phi_m + chi_m phi_d)``.
The flux potential is repaired by ``psi_jk = D_k v_j - D_j v_k`` where the
``v_j`` are sums of annulus-localised Laplace problems with their gradient at
the origin removed.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import correctors as C
from . import grid as G
from . import solver as S
from .fields import GridSpec, edge_coefficients

log = logging.getLogger(__name__)


class AdaptationError(RuntimeError):
    def __init__(self, message, scale=None, diagnostics=None):
        super().__init__(message)
        self.scale = scale
        self.diagnostics = diagnostics or {}


def tail_weight(d):
    return 2 ** (d / 2) / (1 - 2 ** (-d / 2))


# the truncated half-space --------------------------------------------------

@dataclass(frozen=True)
class HalfBox:
    """Upper half of a torus: rows ``origin_d .. origin_d + H`` along axis ``d``."""

    torus: GridSpec
    grid: GridSpec

    @classmethod
    def from_torus(cls, torus):
        d = torus.dim
        H = torus.cells[-1] - torus.origin[-1]
        cells = torus.cells[:-1] + (H + 1,)
        origin = torus.origin[:-1] + (0,)
        periodic = (True,) * (d - 1) + (False,)
        return cls(torus, GridSpec(d, cells, torus.spacing, origin, periodic))

    @property
    def height(self):
        return (self.grid.cells[-1] - 1) * self.grid.spacing

    @property
    def extent(self):
        """Largest radius of a half-ball about the origin that fits in the box."""
        lateral = min(self.torus.lengths[:-1]) / 2
        return min(lateral, self.height)

    def restrict(self, arr):
        rows = (self.torus.origin[-1] + np.arange(self.grid.cells[-1])) % self.torus.cells[-1]
        return np.take(arr, rows, axis=-1)

    def mesh(self, offset=None):
        return self.grid.mesh(offset)

    @property
    def origin_index(self):
        return self.grid.origin[:-1] + (0,)

    def vertical_bc(self, low="dirichlet", high="dirichlet"):
        return S.BCSpec({self.grid.dim - 1: (low, high)})

    def staggered_grid(self):
        """Grid of the ``d``-edge midpoints (one row fewer than the nodes)."""
        g = self.grid
        cells = g.cells[:-1] + (g.cells[-1] - 1,)
        return GridSpec(g.dim, cells, g.spacing, g.origin, g.periodic)


@dataclass
class ScaleLedger:
    r0: float
    m0: int
    M: int = -2
    L: dict = field(default_factory=dict)
    delta: dict = field(default_factory=dict)
    delta13_tail: float = float("nan")
    tail_threshold: float = float("nan")
    smallness_threshold: float = 0.1
    energies: dict = field(default_factory=dict)
    deltaH_checks: dict = field(default_factory=dict)
    n_max: int = -1

    def as_dict(self):
        return {
            "r0": self.r0, "m0": self.m0, "M": self.M,
            "L": {str(k): v for k, v in self.L.items()},
            "delta": {str(k): v for k, v in self.delta.items()},
            "delta13_tail": self.delta13_tail, "tail_threshold": self.tail_threshold,
            "smallness_threshold": self.smallness_threshold,
            "energies": {str(k): v for k, v in self.energies.items()},
            "deltaH_checks": {str(k): {str(r): x for r, x in v.items()} for k, v in self.deltaH_checks.items()},
            "n_max": self.n_max,
        }


@dataclass
class HalfSpaceCorrector:
    box: HalfBox
    phiH: np.ndarray
    sigmaH: np.ndarray
    phi_scales: dict
    tilde_phi: np.ndarray
    v: np.ndarray
    b: dict
    b_total: np.ndarray
    psi: np.ndarray
    ledger: ScaleLedger
    residuals: dict = field(default_factory=dict)

    @property
    def phiH_d(self):
        return self.phiH[-1]


def width_rule(delta, R, h):
    """``L = delta^(2/3) R`` clamped to ``[2h, R]``."""
    return float(np.clip(delta ** (2.0 / 3.0) * R, 2 * h, R))


def cutoff_nodes(cut, m, box, offset=None):
    return cut.chi(m, box.mesh(offset))


def check_margin(box, R, margin):
    if margin * R > box.extent + 1e-12:
        raise AdaptationError(
            f"truncation margin violated: {margin} x {R} exceeds box extent {box.extent}"
        )


def adapt_phi_scale(m, phi_d, cut, box, operator, coef, margin=4.0, tol=S.DEFAULT_TOL):
    """Solve ``-div(a grad phi_m) = div(a grad(chi_m phi_d))`` with zero Dirichlet data."""
    R = cut.r0 * 2.0 ** (m + 1)
    check_margin(box, R, margin)
    w = cut.chi(m, box.mesh()) * phi_d
    dw = G.grad(w, box.grid)
    g = [coef[k] * dw[k] for k in range(box.grid.dim)]
    return operator.solve(g=g, boundary=np.zeros(box.grid.shape), tol=tol), w


def build_phiH(phi_d, phi_scales, cut_terms, M, theta_M):
    """``phi_d - sum_{m<=M} (phi_m + chi_m phi_d)`` with the flat boundary row enforced."""
    missing = [m for m in range(-1, M + 1) if m not in phi_scales]
    if missing:
        raise AdaptationError(f"missing scales {missing}")
    tilde = np.zeros_like(phi_d)
    for m in range(-1, M + 1):
        tilde += phi_scales[m] + cut_terms[m]
    # each phi_m vanishes on the boundary and sum chi_m = theta_M there
    tilde[..., 0] = theta_M[..., 0] * phi_d[..., 0]
    return phi_d - tilde, tilde


def direct_oracle_phiH(field_, box, phi_d_torus=None, top="dirichlet", tol=S.DEFAULT_TOL, method="amg",
                       anchor="boundary-mean"):
    """Solve the half-space corrector equation directly on the box.

    Bottom: zero Dirichlet. Top: ``u = phi_d`` (``"dirichlet"``) or zero
    flux of ``a grad (u - phi_d)`` (``"neumann"``).
    """
    d = box.grid.dim
    coef = [box.restrict(c) for c in edge_coefficients(field_)]
    if top not in ("dirichlet", "neumann"):
        raise ValueError(f"unknown top condition {top!r}")
    if phi_d_torus is None:
        raise ValueError("the top condition needs the whole-space corrector")
    bc = box.vertical_bc("dirichlet", top)
    phi_d = anchor_phi(box.restrict(phi_d_torus), anchor, box.origin_index)
    data = np.zeros(box.grid.shape)
    g = [coef[k] if k == d - 1 else np.zeros(box.grid.shape) for k in range(d)]
    g[-1] = g[-1] * G.valid_mask(box.grid, G.edge_offset(d - 1, d))
    f = np.zeros(box.grid.shape)
    if top == "dirichlet":
        data[..., -1] = phi_d[..., -1]
    else:
        # the top-row balance of phi_d itself, so u - phi_d has zero flux there
        f[..., -1] = (S.apply(box.grid, coef, phi_d) - G.div(g, box.grid))[..., -1]
    return S.Operator(box.grid, coef, bc, method).solve(f=f, g=g, boundary=data, tol=tol)


# vector potential repair ----------------------------------------------------

class LaplaceSolvers:
    """One Laplace operator per direction ``j`` on the ``j``-edge locations."""

    def __init__(self, box, method="amg"):
        d = box.grid.dim
        self.box = box
        self.lateral = S.Operator(box.grid, None, box.vertical_bc("dirichlet", "dirichlet"), method)
        self.stag = box.staggered_grid()
        # mirrored conditions on both faces keep div v = 0 there
        self.normal = S.Operator(self.stag, None, S.BCSpec({d - 1: ("neumann", "neumann")}), method)

    def solve(self, j, rhs, tol):
        d = self.box.grid.dim
        if j < d - 1:
            rhs = rhs.copy()
            return self.lateral.solve(f=rhs, boundary=np.zeros_like(rhs), tol=tol)
        out = np.zeros(self.box.grid.shape)
        f = rhs[..., :-1]
        out[..., :-1] = self.normal.solve(f=f - f.mean(), tol=tol)
        return out


def vn_rhs(j, eta_nodes, flux, box):
    """Discrete ``div(eta x_j F)`` at the ``j``-edges, written as
    ``eta F_j + x_j (grad eta . F)``; linear in ``eta`` so the dyadic pieces
    sum to ``theta F_j`` exactly."""
    grid = box.grid
    d = grid.dim
    deta = G.grad(eta_nodes, grid)
    cross = sum(G.to_nodes(deta[k] * flux[k], k, grid) for k in range(d))
    off = G.edge_offset(j, d)
    X = box.mesh(off)
    eta_e = G.to_edges(eta_nodes, j, grid)
    return (eta_e * flux[j] + X[j] * G.to_edges(cross, j, grid)) * G.valid_mask(grid, off)


def gradient_at_origin(v, j, box, radius):
    """``D_k v_j`` at the origin for each ``k``.

    The difference quotients on the edges inside the half-ball of the given
    radius are fitted by ``c0 + c1 x_d`` and ``c0`` is returned, which keeps
    components forced to vanish on the flat boundary at zero.
    """
    grid = box.grid
    d = grid.dim
    out = np.zeros(d)
    for k in range(d):
        dv = G.dfwd(v, k, grid)
        off = list(G.edge_offset(j, d))
        off[k] += 0.5
        m = G.region_mask(grid, G.half_ball(radius), tuple(off))
        z = box.mesh(tuple(off))[-1][m]
        design = np.stack([np.ones_like(z), z], axis=1)
        out[k] = np.linalg.lstsq(design, dv[m], rcond=None)[0][0]
    return out


def solve_vn(j, n, flux, cut, box, laplace, tol=S.DEFAULT_TOL, b_radius=None):
    """``v_j^n`` and its gradient at the origin ``b_j^n`` (zero for ``n = -1``)."""
    if not any(np.any(f) for f in flux):
        return np.zeros(box.grid.shape), np.zeros(box.grid.dim)
    eta = cut.eta(n, box.mesh())
    v = laplace.solve(j, vn_rhs(j, eta, flux, box), tol)
    if n == -1:
        return v, np.zeros(box.grid.dim)
    return v, gradient_at_origin(v, j, box, b_radius or 4 * box.grid.spacing)


def build_psi(v, b_total, box):
    """``psi_jk = (D_k v_j - b_jk) - (D_j v_k - b_kj)`` on plaquettes; exactly skew."""
    grid = box.grid
    d = grid.dim
    psi = np.zeros((d, d) + grid.shape)
    for j in range(d):
        for k in range(j + 1, d):
            val = (G.dfwd(v[j], k, grid) - b_total[j, k]) - (G.dfwd(v[k], j, grid) - b_total[k, j])
            val = val * G.valid_mask(grid, G.plaquette_offset(j, k, d))
            psi[j, k] = val
            psi[k, j] = -val
    return psi


def psi_residual(psi, flux, box, radius, floor=0.0):
    """Relative residual of ``-sum_k D_k psi_jk = F_j`` on ``B_radius^+``.

    The denominator is ``max(|F|, floor)``; a positive ``floor`` keeps the
    ratio meaningful when ``F`` is itself at solver-noise level.
    """
    grid = box.grid
    d = grid.dim
    num = den = 0.0
    for j in range(d):
        lhs = -sum(G.dbwd(psi[j, k], k, grid) for k in range(d) if k != j)
        m = G.region_mask(grid, G.half_ball(radius), G.edge_offset(j, d))
        num += np.sum((lhs - flux[j])[m] ** 2)
        den += np.sum(flux[j][m] ** 2)
    den = max(np.sqrt(den), floor)
    return float(np.sqrt(num) / den) if den > 0 else float(np.sqrt(num))


def flux_norm(coef, phi, box, radius):
    """Euclidean norm of ``a (e_d + grad phi)`` over the edges in ``B_radius^+``."""
    grid = box.grid
    d = grid.dim
    dphi = G.grad(phi, grid)
    total = 0.0
    for k in range(d):
        m = G.region_mask(grid, G.half_ball(radius), G.edge_offset(k, d))
        total += np.sum((coef[k] * ((k == d - 1) + dphi[k]))[m] ** 2)
    return float(np.sqrt(total))


def corrector_residual(phiH_d, coef, box, radius):
    """Relative residual of ``-div(a grad phi) = div(a e_d)`` at interior nodes of ``B_radius^+``."""
    grid = box.grid
    d = grid.dim
    ed = [np.zeros(grid.shape) for _ in range(d)]
    ed[-1] = coef[-1] * G.valid_mask(grid, G.edge_offset(d - 1, d))
    lhs = S.apply(grid, coef, phiH_d)
    rhs = G.div(ed, grid)
    m = G.region_mask(grid, G.half_ball(radius))
    den = np.linalg.norm(rhs[m])
    num = np.linalg.norm((lhs - rhs)[m])
    return float(num / den) if den > 0 else float(num)


def sigma_residual(sigmaH_d, phiH_d, coef, a_hom, box, radius, floor=0.0):
    """Relative residual of ``sum_k D_k sigma^H_djk = a (e_d + grad phi^H) - a_hom e_d``.

    ``floor`` bounds the denominator from below as in :func:`psi_residual`.
    """
    grid = box.grid
    d = grid.dim
    dphi = G.grad(phiH_d, grid)
    num = den = 0.0
    for j in range(d):
        target = coef[j] * ((j == d - 1) + dphi[j]) - a_hom[j, d - 1]
        lhs = sum(G.dbwd(sigmaH_d[j, k], k, grid) for k in range(d) if k != j)
        m = G.region_mask(grid, G.half_ball(radius), G.edge_offset(j, d))
        num += np.sum((lhs - target)[m] ** 2)
        den += np.sum(target[m] ** 2)
    den = max(np.sqrt(den), floor)
    return float(np.sqrt(num) / den) if den > 0 else float(np.sqrt(num))


# sublinearity of the adapted corrector --------------------------------------

def deltaH_table(hs, correctors, radii):
    """``delta^H_r`` including the reflected half-ball term of the tangential ``phi_i``."""
    box = hs.box
    d = box.grid.dim
    comps = [(hs.phiH[i], None) for i in range(d)]
    for i in range(d):
        comps += G.tensor_components(hs.sigmaH, box.grid, lead=(i,))
    out = {}
    for r in radii:
        if r > box.extent + 1e-12:
            raise ValueError(f"radius {r} exceeds the box extent {box.extent}")
        plus = G.quad_avg(comps, box.grid, G.half_ball(r)) ** 2
        minus = 0.0
        if d > 1:
            minus = G.quad_avg([(correctors.phi[i], None) for i in range(d - 1)],
                               correctors.grid, G.neg_half_ball(r)) ** 2
        out[float(r)] = float(np.sqrt(plus + minus) / r)
    return out


def delta13_tail(table, m0, d, spacing=1.0):
    """``sum_{k >= m0} (k + c_d) delta_{2^k h}^(1/3)`` over the dyadic radii available."""
    cd = tail_weight(d)
    return float(sum((k + cd) * v ** (1 / 3) for k, v in _dyadic(table, spacing).items() if k >= m0))


def _dyadic(table, spacing=1.0):
    """``{k: delta}`` for the radii ``r = 2^k h`` of ``table``."""
    out = {}
    for r, v in table.items():
        k = np.log2(r / spacing)
        if abs(k - round(k)) < 1e-9:
            out[int(round(k))] = v
    return out


def select_m0(table, d, smallness_threshold, tail_threshold=float("inf"), m0_min=3, m0_max=None,
              spacing=1.0):
    """Smallest ``m0 >= m0_min`` whose dyadic tail of the whole-space table is small.

    Admissible means ``delta_{2^k} <= smallness_threshold`` for every tabulated
    ``k >= m0`` and ``sum_{k>=m0} (k + c_d) delta_{2^k}^(1/3) <= tail_threshold``.
    """
    dy = _dyadic(table, spacing)
    if not dy:
        raise AdaptationError("insufficient scale separation: empty delta table")
    m0_max = max(dy) if m0_max is None else m0_max
    tails = {}
    for m0 in range(m0_min, m0_max + 1):
        tails[m0] = delta13_tail(table, m0, d, spacing)
        if all(v <= smallness_threshold for k, v in dy.items() if k >= m0) and tails[m0] <= tail_threshold:
            return m0, tails[m0]
    raise AdaptationError("insufficient scale separation: no admissible r0 within the domain",
                          diagnostics={"tails": tails, "delta": dy})


@dataclass
class AdaptConfig:
    r0: float | None = None
    m0_min: int = 3
    M_max: int | None = None
    smallness_threshold: float = 0.1
    tail_threshold: float = float("inf")
    margin: float = 4.0
    tol: float = S.DEFAULT_TOL
    method: str = "amg"
    check_smallness: bool = True
    psi_tol: float | None = 0.02
    anchor: str | float | None = "boundary-mean"


def anchor_phi(phi_d, anchor, origin_index=None):
    """Fix the additive constant of the box restriction of ``phi_d``.

    ``"boundary-mean"`` gives the flat-boundary trace zero mean, a number
    sets the value at the origin, ``None`` keeps the torus normalisation.
    """
    if anchor is None:
        return phi_d
    if anchor == "boundary-mean":
        return phi_d - phi_d[..., 0].mean()
    return phi_d - phi_d[origin_index] + float(anchor)


def induction_driver(field_, correctors, config=None):
    """Run the scale-by-scale adaptation and return the adapted corrector."""
    cfg = config or AdaptConfig()
    torus = correctors.grid
    d = torus.dim
    h = torus.spacing
    box = HalfBox.from_torus(torus)
    table = dict(correctors.delta_table)

    if cfg.r0 is None:
        m0, tail = select_m0(table, d, cfg.smallness_threshold, cfg.tail_threshold, cfg.m0_min,
                             int(np.floor(np.log2(box.extent / (2 * cfg.margin * h)))), h)
        r0 = h * 2.0**m0
    else:
        r0 = float(cfg.r0)
        m0 = int(round(np.log2(r0 / h)))
        tail = delta13_tail(table, m0, d, h)
    if r0 < 8 * h - 1e-12:
        raise AdaptationError(f"r0 = {r0} is below 8 grid spacings")
    M_dom = int(np.floor(np.log2(box.extent / (cfg.margin * r0)))) - 1
    M_max = M_dom if cfg.M_max is None else min(cfg.M_max, M_dom)
    if M_max < -1:
        raise AdaptationError("insufficient scale separation: box too small for r0")
    n_max = int(np.floor(np.log2(box.extent / r0))) - 1
    ledger = ScaleLedger(r0=r0, m0=m0, delta13_tail=tail, tail_threshold=cfg.tail_threshold,
                         smallness_threshold=cfg.smallness_threshold, n_max=n_max)

    widths = []
    for m in range(-1, M_max + 1):
        R = r0 * 2.0 ** (m + 1)
        dl = table.get(R)
        if dl is None:
            dl = C.delta_table(correctors, [R])[R]
        ledger.delta[m] = dl
        widths.append(width_rule(dl, R, h))
        ledger.L[m] = widths[-1]
    cut = G.build_cutoffs(r0, M_max, widths, spacing=h)

    coef = [box.restrict(c) for c in edge_coefficients(field_)]
    a_op = S.Operator(box.grid, coef, box.vertical_bc("dirichlet", "dirichlet"), cfg.method)
    lap = LaplaceSolvers(box, cfg.method)
    phi_d = anchor_phi(box.restrict(correctors.phi[-1]), cfg.anchor, box.origin_index)
    sigma_d = box.restrict(correctors.sigma[-1])

    phiH = np.stack([box.restrict(correctors.phi[i]) for i in range(d)])
    sigma_rest = box.restrict(correctors.sigma)
    phi_scales, cut_terms = {}, {}
    v = np.zeros((d,) + box.grid.shape)
    b_table = {n: np.zeros((d, d)) for n in range(-1, n_max + 1)}
    hs = None
    for m in range(-1, M_max + 1):
        phi_m, w = adapt_phi_scale(m, phi_d, cut, box, a_op, coef, cfg.margin, cfg.tol)
        phi_scales[m], cut_terms[m] = phi_m, w
        R = r0 * 2.0 ** (m + 1)
        e_R = G.quad_avg(G.edge_components(G.grad(phi_m, box.grid), box.grid), box.grid, G.half_ball(R))
        scale = ledger.delta[m] ** (1 / 3)
        ledger.energies[m] = {"energy_at_R": e_R, "C1_measured": e_R / scale if scale > 0 else 0.0}

        theta_M = cut.theta(m, box.mesh())
        phiH_d, tilde = build_phiH(phi_d, phi_scales, cut_terms, m, theta_M)

        # increment of F = a grad(phi^H - phi_d) contributed by this scale
        dinc = G.grad(phi_m + w, box.grid)
        flux_inc = [-coef[k] * dinc[k] * G.valid_mask(box.grid, G.edge_offset(k, d)) for k in range(d)]
        for n in range(-1, n_max + 1):
            for j in range(d):
                vn, bn = solve_vn(j, n, flux_inc, cut, box, lap, cfg.tol)
                v[j] += vn
                b_table[n][j] += bn
        b_total = sum(b_table.values())
        psi = build_psi(v, b_total, box)
        sigmaH = sigma_rest.copy()
        sigmaH[-1] = sigma_d - psi
        phiH[-1] = phiH_d
        ledger.M = m
        hs = HalfSpaceCorrector(box, phiH.copy(), sigmaH, dict(phi_scales), tilde, v.copy(),
                                {n: b.copy() for n, b in b_table.items()}, b_total, psi, ledger)
        if cfg.check_smallness and m >= 0:
            radii = [r0 * 2.0**k for k in range(0, m + 1) if r0 * 2.0**k <= box.extent]
            dH = deltaH_table(hs, correctors, radii)
            ledger.deltaH_checks[m] = dH
            bad = {r: x for r, x in dH.items() if x > cfg.smallness_threshold}
            if bad:
                raise AdaptationError(
                    f"smallness violated at scale {m}: delta^H above {cfg.smallness_threshold} at {sorted(bad)}",
                    scale=m, diagnostics={"deltaH": dH, "ledger": ledger.as_dict()})
        log.info("scale %d done (L=%.3g, delta=%.3g)", m, ledger.L[m], ledger.delta[m])

    flux = [coef[k] * G.grad(hs.phiH_d - phi_d, box.grid)[k] * G.valid_mask(box.grid, G.edge_offset(k, d))
            for k in range(d)]
    r_check = r0 * 2.0 ** max(M_max - 1, -1)
    floor = 1e-6 * flux_norm(coef, phi_d, box, r_check)
    hs.residuals = {
        "radius": r_check,
        "corrector": corrector_residual(hs.phiH_d, coef, box, r0 * 2.0**M_max),
        "psi": psi_residual(hs.psi, flux, box, r_check, floor),
        "sigmaH": sigma_residual(hs.sigmaH[-1], hs.phiH_d, coef, correctors.a_hom, box, r_check, floor),
    }
    if cfg.psi_tol is not None and hs.residuals["psi"] > cfg.psi_tol:
        raise AdaptationError(
            f"psi residual {hs.residuals['psi']:.3g} above {cfg.psi_tol}: insufficient N_max "
            f"(= {n_max}) for the top scale; lower M_max or enlarge the box",
            scale=M_max, diagnostics={"residuals": hs.residuals, "ledger": ledger.as_dict(), "result": hs})
    return hs
