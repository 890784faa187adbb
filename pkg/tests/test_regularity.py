import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hshg import correctors as C
from hshg import grid as G
from hshg import halfspace as H
from hshg import regularity as R
from hshg.fields import GridSpec, edge_coefficients, gen_constant, gen_laminate, gen_poisson_inclusions


@pytest.fixture(scope="module")
def flat():
    """Upper half box of a 256^2 torus with a = Id."""
    box = H.HalfBox.from_torus(GridSpec(2, (256, 256)))
    return box.grid, np.zeros(box.grid.shape)


@pytest.fixture(scope="module")
def adapted():
    f = gen_poisson_inclusions(GridSpec(2, (256, 256)), 0.01, 3.0, 0.5 * np.eye(2), np.eye(2), 2)
    cs = C.compute_correctors(f)
    hs = H.induction_driver(f, cs)
    coef = [hs.box.restrict(c) for c in edge_coefficients(f)]
    return hs, coef


def test_linear_data_gives_linear_sample(flat):
    g, _ = flat
    xd = g.mesh()[-1]
    u = R.harmonic_sample(g, None, xd)
    assert np.max(np.abs(u - xd)) <= 1e-8


def test_bilinear_data_gives_bilinear_sample():
    g = R.dirichlet_box(GridSpec(2, (64, 64)))
    X = g.mesh()
    u = R.harmonic_sample(g, None, X[0] * X[1])
    assert np.max(np.abs(u - X[0] * X[1])) <= 1e-10 * np.abs(X[0] * X[1]).max()


def test_sample_rejects_nonzero_flat_data(flat):
    g, _ = flat
    with pytest.raises(ValueError, match="vanish"):
        R.harmonic_sample(g, None, np.ones(g.shape))


def test_random_samples_reproducible(adapted):
    hs, coef = adapted
    g = hs.box.grid
    a = R.harmonic_sample(g, coef, R.random_outer_data(g, 5))
    b = R.harmonic_sample(g, coef, R.random_outer_data(g, 5))
    assert np.array_equal(a, b)
    assert not np.array_equal(R.random_outer_data(g, 5), R.random_outer_data(g, 6))


def test_generator_recovery(adapted):
    hs, _ = adapted
    g = hs.box.grid
    gen = g.mesh()[-1] + hs.phiH_d
    for r in (8.0, 16.0, 32.0):
        exc, b = R.excess(3 * gen, hs.phiH_d, g, r)
        assert b == pytest.approx(3.0, abs=1e-12)
        assert exc <= 10 * 1e-20


# 2r stays clear of the lateral seam, where x_1 x_d jumps
@pytest.mark.parametrize("r", [8.0, 16.0, 32.0])
def test_tilted_bilinear_excess(flat, r):
    g, phi = flat
    X = g.mesh()
    u = X[1] + X[0] * X[1]
    exc, b = R.excess(u, phi, g, r)
    assert b == pytest.approx(1.0, abs=1e-12)
    # avg of x_1^2 + x_d^2 over the half-disc is r^2 / 2
    assert exc == pytest.approx(r**2 / 2, rel=0.03)
    assert exc / R.excess(u, phi, g, 2 * r)[0] == pytest.approx(0.25, rel=0.05)


def test_degenerate_tilt_field(flat):
    g, _ = flat
    with pytest.raises(R.DegenerateError):
        R.excess(np.zeros(g.shape), -g.mesh()[-1], g, 8.0)


def test_constant_coefficients_decay_with_margin(flat):
    g, phi = flat
    u = R.harmonic_sample(g, None, R.random_outer_data(g, 3))
    rep = R.excess_decay_check(u, phi, g, [4.0, 8.0, 16.0, 32.0, 64.0], alpha=0.9)
    assert rep["passed"] and rep["max_ratio"] <= 1.0


def test_zero_excess_status(adapted):
    hs, _ = adapted
    g = hs.box.grid
    u = 2 * (g.mesh()[-1] + hs.phiH_d)
    rep = R.excess_decay_check(u, hs.phiH_d, g, [8.0, 16.0, 32.0, 64.0])
    assert rep["status"] == "identically zero excess" and rep["passed"]


def test_mean_value_linear(flat):
    g, _ = flat
    rep = R.mean_value_check(g.mesh()[-1], g, [8.0, 16.0, 32.0, 64.0])
    assert all(abs(v - 1) <= 2 / r for (r, _), v in rep["ratios"].items())


def test_mean_value_bilinear_below_one(flat):
    g, _ = flat
    X = g.mesh()
    rep = R.mean_value_check(X[0] * X[1], g, [8.0, 16.0, 32.0, 64.0])
    assert all(v <= 1 + 2 / r for (r, _), v in rep["ratios"].items())


def test_random_samples_mean_value_and_caccioppoli(adapted):
    hs, coef = adapted
    g = hs.box.grid
    radii = [16.0, 32.0, 64.0, 128.0]
    for s in range(3):
        u = R.harmonic_sample(g, coef, R.random_outer_data(g, s))
        assert R.mean_value_check(u, g, radii)["max_ratio"] <= 50
        assert R.caccioppoli_check(u, g, radii)["passed"]


def test_coercivity_of_flat_corrector(flat):
    g, phi = flat
    rep = R.coercivity_check(phi, g, [8.0, 16.0])
    assert rep["bound"] == 1 / 16
    assert all(v == 1.0 for v in rep["curvature"].values())


def test_coercivity_of_laminate_closed_form():
    f = gen_laminate(GridSpec(2, (256, 256)), 1, [1.0, 0.25], [0.0, 0.5], 4.0)
    cs = C.compute_correctors(f)
    hs = H.induction_driver(f, cs)
    g = hs.box.grid
    A_d = hs.box.restrict(edge_coefficients(f)[1])
    # e_d + grad phi_d = (harmonic mean) / a on the d-edges, zero tangential part
    m = G.region_mask(g, G.half_ball(32.0), G.edge_offset(1, 2))
    closed = np.mean((0.4 / A_d[m]) ** 2)
    assert R.curvature(hs.phiH_d, g, 32.0) == pytest.approx(closed, rel=1e-6)
    assert closed >= 0.16


def test_caccioppoli_of_height(flat):
    g, _ = flat
    xd = g.mesh()[-1]
    for r in (16.0, 32.0, 64.0):
        assert R.caccioppoli_ratio(xd, g, r) == pytest.approx(4.0, rel=4 / r)
        assert R.caccioppoli_ratio(7 * xd, g, r) == pytest.approx(R.caccioppoli_ratio(xd, g, r), rel=1e-12)


def test_liouville_exact_multiple(adapted):
    hs, _ = adapted
    g = hs.box.grid
    u = 2 * (g.mesh()[-1] + hs.phiH_d)
    rep = R.liouville_check(u, hs.phiH_d, g, [4.0, 8.0, 16.0, 32.0])
    assert rep["verdict"] == "liouville-consistent"
    assert rep["b"] == pytest.approx(2.0, abs=1e-10)
    assert max(rep["residuals"].values()) <= 1e-9


def test_liouville_rejects_bilinear(flat):
    g, phi = flat
    X = g.mesh()
    assert R.liouville_check(X[0] * X[1], phi, g, [4.0, 8.0, 16.0, 32.0])["verdict"] == "not a multiple"


def test_liouville_zero(flat):
    g, phi = flat
    assert R.liouville_check(np.zeros(g.shape), phi, g, [8.0, 16.0])["verdict"] == "trivial (zero)"


def test_liouville_random_samples_far_boundary(adapted):
    hs, coef = adapted
    g = hs.box.grid
    # analysis region 16 inside a box of height 128
    for s in range(3):
        u = R.harmonic_sample(g, coef, R.random_outer_data(g, s))
        assert R.liouville_check(u, hs.phiH_d, g, [4.0, 8.0, 16.0])["verdict"] == "liouville-consistent"


def test_curvature_is_half_second_derivative(adapted):
    hs, coef = adapted
    g = hs.box.grid
    u = R.harmonic_sample(g, coef, R.random_outer_data(g, 1))
    for r in (8.0, 32.0):
        _, b = R.excess(u, hs.phiH_d, g, r)
        s = 1e-3
        second = (R.excess_at(u, hs.phiH_d, g, r, b + s) + R.excess_at(u, hs.phiH_d, g, r, b - s)
                  - 2 * R.excess_at(u, hs.phiH_d, g, r, b)) / s**2
        assert second == pytest.approx(2 * R.curvature(hs.phiH_d, g, r), rel=1e-6, abs=1e-8)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-3, 3), st.floats(0.1, 5))
def test_excess_shift_and_scale(adapted, seed, shift, t):
    hs, _ = adapted
    g = hs.box.grid
    rng = np.random.default_rng(seed)
    u = np.cumsum(rng.standard_normal(g.shape), axis=1)
    gen = g.mesh()[-1] + hs.phiH_d
    exc, b = R.excess(u, hs.phiH_d, g, 16.0)
    exc2, b2 = R.excess(u + shift * gen, hs.phiH_d, g, 16.0)
    assert exc2 == pytest.approx(exc, rel=1e-9)
    assert b2 == pytest.approx(b + shift, abs=1e-9)
    exc3, b3 = R.excess(t * u, hs.phiH_d, g, 16.0)
    assert exc3 == pytest.approx(t**2 * exc, rel=1e-9)
    assert b3 == pytest.approx(t * b, rel=1e-9)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_b_min_is_grid_argmin(adapted, seed):
    hs, _ = adapted
    g = hs.box.grid
    u = np.cumsum(np.random.default_rng(seed).standard_normal(g.shape), axis=1)
    exc, b = R.excess(u, hs.phiH_d, g, 16.0)
    for bb in b + np.linspace(-1, 1, 41):
        assert R.excess_at(u, hs.phiH_d, g, 16.0, bb) >= exc - 1e-12


def test_two_scale_identity():
    f = gen_constant(GridSpec(2, (64, 64)), np.eye(2))
    cs = C.compute_correctors(f, radii=[])
    err = R.two_scale_error(f, cs, lambda X: np.sin(2 * np.pi * X[0] / 64) * np.cosh(2 * np.pi * X[1] / 64))
    assert err <= 10 * 1e-10


def test_two_scale_laminate_refinement():
    errs = []
    for n in (128, 256):
        f = gen_laminate(GridSpec(2, (n, n)), 0, [1.0, 0.25], [0.0, 0.5], 8.0)
        cs = C.compute_correctors(f, radii=[])
        data = lambda X: np.sin(2 * np.pi * X[0] / n) * np.cosh(2 * np.pi * X[1] / n) + X[1] / n  # noqa: E731
        errs.append(R.two_scale_error(f, cs, data))
    assert errs[1] <= 0.10 and errs[1] < errs[0]


def test_two_scale_error_tracks_solver_tolerance():
    f = gen_laminate(GridSpec(2, (128, 128)), 0, [1.0, 0.25], [0.0, 0.5], 8.0)
    data = lambda X: np.sin(2 * np.pi * X[0] / 128) * np.cosh(2 * np.pi * X[1] / 128)  # noqa: E731
    tols = (1e-4, 1e-6, 1e-8, 1e-12)
    runs = [C.compute_correctors(f, tol, radii=[]) for tol in tols]
    errs = [R.two_scale_error(f, cs, data, tol=tol) for cs, tol in zip(runs, tols)]
    gaps = [abs(e - errs[-1]) for e in errs[:-1]]
    sig = [cs.residuals["sigma_div"] + max(cs.residuals["phi_0"], cs.residuals["phi_1"]) for cs in runs[:-1]]
    # smaller corrector residuals bring the error closer to its converged value
    assert all(b <= a for a, b in zip(sig, sig[1:]))
    assert all(b <= a + 1e-14 for a, b in zip(gaps, gaps[1:]))


def test_report_rows(adapted):
    hs, coef = adapted
    g = hs.box.grid
    u = R.harmonic_sample(g, coef, R.random_outer_data(g, 0))
    rep = R.excess_report(u, hs.phiH_d, g, [16.0, 32.0, 64.0])
    rows = rep.rows()
    assert [r[0] for r in rows] == [16.0, 32.0, 64.0]
    assert rows[-1][3] == 1.0
    with pytest.raises(ValueError):
        R.excess_report(u, hs.phiH_d, g, [16.0, 32.0], alpha=1.0)
