import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from hshg import HalfSpaceAdapter, TiltExcess, WholeSpaceCorrector
from hshg.fields import GridSpec, gen_constant, gen_laminate


@pytest.fixture(scope="module")
def laminate():
    return gen_laminate(GridSpec(2, (256, 256)), 1, [1.0, 0.25], [0.0, 0.5], 4.0)


def test_params_roundtrip_and_clone():
    est = HalfSpaceAdapter(M_max=1, anchor=0.0)
    assert est.get_params()["M_max"] == 1
    twin = clone(est)
    assert twin.get_params() == est.get_params() and twin is not est
    assert WholeSpaceCorrector().set_params(method="cg").method == "cg"


def test_not_fitted():
    with pytest.raises(NotFittedError):
        HalfSpaceAdapter().transform(gen_constant(GridSpec(2, (8, 8)), np.eye(2)))
    with pytest.raises(NotFittedError):
        TiltExcess(grid=GridSpec(2, (8, 8))).transform(np.zeros((8, 8)))


def test_rejects_non_fields():
    with pytest.raises(TypeError):
        WholeSpaceCorrector().fit(np.eye(2))


def test_whole_space_corrector(laminate):
    est = WholeSpaceCorrector(radii=[8.0, 16.0]).fit(laminate)
    assert np.allclose(np.diag(est.a_hom_), [0.625, 0.4], rtol=1e-2)
    assert est.transform(laminate).shape == (2, 256, 256)
    with pytest.raises(ValueError, match="grid"):
        est.transform(gen_constant(GridSpec(2, (32, 32)), np.eye(2)))


def test_adapter_and_excess_pipeline(laminate):
    ws = WholeSpaceCorrector().fit(laminate)
    ad = HalfSpaceAdapter().fit(laminate, correctors=ws.correctors_)
    phi = ad.transform(laminate)
    grid = ad.result_.box.grid
    assert phi.shape == grid.shape
    dH = ad.deltaH([8.0, 16.0])
    assert all(v > 0 for v in dH.values())
    te = TiltExcess(grid=grid, radii=(8.0, 16.0, 32.0)).fit(phi)
    u = 2.5 * (grid.mesh()[-1] + phi)
    assert np.allclose(te.predict(u), 2.5, atol=1e-10)
    assert np.all(te.transform(u) <= 1e-18)
    assert te.report(u).extra["status"] == "identically zero excess"


def test_tilt_excess_validates_input():
    g = GridSpec(2, (16, 9), origin=(8, 0), periodic=(True, False))
    te = TiltExcess(grid=g, radii=(4.0,)).fit(np.zeros(g.shape))
    with pytest.raises(ValueError, match="shape"):
        te.transform(np.zeros((3, 3)))
    bad = np.zeros(g.shape)
    bad[1, 1] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        te.predict(bad)
    with pytest.raises(ValueError, match="alpha"):
        TiltExcess(grid=g, alpha=1.5).fit(np.zeros(g.shape))
