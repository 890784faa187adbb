import json

import numpy as np
import pytest

from hshg import cli
from hshg import config as K
from hshg import correctors as C
from hshg import halfspace as H
from hshg import io as IO
from hshg import regularity as R
from hshg.fields import GridSpec, gen_constant, gen_poisson_inclusions

IDENTITY = {"schema_version": 1, "grid": {"cells": [128, 128]}, "field": {"generator": "constant"},
            "regularity": {"samples": 2}}


def write_config(path, cfg):
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="module")
def identity_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = write_config(root / "c.json", IDENTITY)
    assert cli.main(["run", "--config", str(cfg), "--out", str(root / "out")]) == 0
    return root


def test_field_roundtrip(tmp_path):
    f = gen_poisson_inclusions(GridSpec(2, (32, 16)), 0.02, 2.5, 0.25 * np.eye(2), np.eye(2), 1)
    g = IO.read_field(IO.write_field(tmp_path / "f.hshg", f))
    assert g.grid == f.grid and g.lam == f.lam
    assert np.array_equal(g.cells, f.cells)
    assert g.provenance == json.loads(json.dumps(f.provenance))


def test_bad_magic(tmp_path):
    p = tmp_path / "x.hshg"
    p.write_bytes(b"NOPE" + bytes(40))
    with pytest.raises(IO.FormatError, match="not an HSHG"):
        IO.read_field(p)


def test_truncated_field(tmp_path):
    p = IO.write_field(tmp_path / "f.hshg", gen_constant(GridSpec(2, (8, 8)), np.eye(2)))
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(IO.FormatError, match="truncated"):
        IO.read_field(p)


def test_sections_roundtrip_and_truncation(tmp_path):
    g = GridSpec(2, (8, 8))
    secs = {"a": np.arange(64.0).reshape(8, 8), "b/1": np.ones((2, 3, 4))}
    p = IO.write_sections(tmp_path / "s.hshg", g, 0.5, secs, {"note": "x"})
    g2, out, meta = IO.read_sections(p)
    assert g2 == g and meta["note"] == "x"
    assert all(np.array_equal(out[k], v) for k, v in secs.items())
    p.write_bytes(p.read_bytes()[:-1])
    with pytest.raises(IO.FormatError):
        IO.read_sections(p)


def test_field_reader_rejects_sections(tmp_path):
    p = IO.write_sections(tmp_path / "s.hshg", GridSpec(2, (8, 8)), 0.5, {"a": np.zeros(3)})
    with pytest.raises(IO.FormatError, match="coefficient field"):
        IO.read_field(p)


def test_corrector_and_halfspace_snapshots(tmp_path):
    f = gen_poisson_inclusions(GridSpec(2, (256, 256)), 0.01, 3.0, 0.5 * np.eye(2), np.eye(2), 2)
    cs = C.compute_correctors(f)
    cs2 = IO.load_correctors(IO.save_correctors(tmp_path / "c.hshg", cs, f.lam))
    assert np.array_equal(cs2.phi, cs.phi) and np.array_equal(cs2.sigma, cs.sigma)
    assert cs2.delta_table == cs.delta_table
    hs = H.induction_driver(f, cs)
    hs2 = IO.load_halfspace(IO.save_halfspace(tmp_path / "h.hshg", hs, f.lam))
    assert np.array_equal(hs2.phiH, hs.phiH) and np.array_equal(hs2.psi, hs.psi)
    assert hs2.ledger.as_dict() == json.loads(json.dumps(hs.ledger.as_dict()))
    assert sorted(hs2.phi_scales) == sorted(hs.phi_scales)


def test_csv_header_units(tmp_path):
    p = IO.write_csv(tmp_path / "t.csv", [("r", "length"), ("x", "1")], [(1.0, 0.1), (2.0, 0.3)])
    assert p.read_text().splitlines()[0] == "r [length],x [1]"
    header, rows = IO.read_csv(p)
    assert header == ["r", "x"] and rows == [[1.0, 0.1], [2.0, 0.3]]


def test_config_rejects_unknown_keys(tmp_path):
    with pytest.raises(K.ConfigError, match="invalid config"):
        K.load(write_config(tmp_path / "c.json", dict(IDENTITY, extra=1)))
    with pytest.raises(K.ConfigError):
        K.load(write_config(tmp_path / "c.json", dict(IDENTITY, schema_version=2)))


def test_config_hash_ignores_key_order_and_tracks_seed(tmp_path):
    a = K.load(write_config(tmp_path / "a.json", IDENTITY))
    b = K.load(write_config(tmp_path / "b.json", dict(reversed(list(IDENTITY.items())))))
    assert K.config_hash(a) == K.config_hash(b)
    c = K.load(tmp_path / "a.json", seed_override=7)
    assert c["field"]["seed"] == 7 and K.config_hash(c) != K.config_hash(a)


def test_pipeline_identity_all_pass(identity_run):
    out = identity_run / "out"
    summary = IO.load_json(out / "summary.json")
    assert summary["passed"]
    _, rows = IO.read_csv(out / "delta.csv")
    assert all(r[1] == 0 for r in rows)
    _, rows = IO.read_csv(out / "deltaH.csv")
    assert all(r[1] == 0 and r[2] == 0 for r in rows)
    hs = IO.load_halfspace(out / "halfspace.hshg")
    xd = hs.box.mesh()[-1]
    for r in (8.0, 16.0, 32.0):
        assert R.excess(xd, hs.phiH_d, hs.box.grid, r)[0] == 0


def test_every_csv_has_units(identity_run):
    for p in (identity_run / "out").glob("*.csv"):
        header = p.read_text().splitlines()[0].split(",")
        assert all(h.endswith("]") and " [" in h for h in header)


def test_rerun_is_bitwise_identical(identity_run, tmp_path):
    cfg = write_config(tmp_path / "c.json", IDENTITY)
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "out")]) == 0
    first, second = identity_run / "out", tmp_path / "out"
    for p in first.glob("*.csv"):
        assert (second / p.name).read_bytes() == p.read_bytes()
    for st in cli.STAGES:
        a = IO.load_json(cli.record_path(first, st))
        b = IO.load_json(cli.record_path(second, st))
        assert a["record_hash"] == b["record_hash"]


def test_up_to_date_stage_is_skipped(identity_run, capsys):
    out = identity_run / "out"
    before = cli.record_path(out, "cell-problem").read_text()
    cfg = identity_run / "c.json"
    assert cli.main(["cell-problem", "--config", str(cfg), "--out", str(out)]) == 0
    assert cli.record_path(out, "cell-problem").read_text() == before


def test_missing_upstream_exits_2(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", IDENTITY)
    assert cli.main(["regularity", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "needs the output" in capsys.readouterr().err


def test_bad_config_exits_2(tmp_path):
    cfg = write_config(tmp_path / "c.json", {"schema_version": 1})
    assert cli.main(["gen-field", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_invariant_failure_exits_3(tmp_path, capsys):
    bad = dict(IDENTITY, field={"generator": "constant", "params": {"matrix": [[2.0, 0.0], [0.0, 1.0]]}})
    cfg = write_config(tmp_path / "c.json", bad)
    assert cli.main(["gen-field", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3
    assert "ellipticity" in capsys.readouterr().err


def test_adaptation_failure_exits_3(tmp_path, capsys):
    cfg = dict(IDENTITY, grid={"cells": [64, 64]},
               field={"generator": "poisson", "params": {"intensity": 0.02}, "seed": 1},
               adapt={"r0": 8.0, "smallness_threshold": 1e-6})
    path = write_config(tmp_path / "c.json", cfg)
    assert cli.main(["run", "--config", str(path), "--out", str(tmp_path / "o")]) == 3
    assert "adaptation" in capsys.readouterr().err


def test_report_prints_stage_lines(identity_run, capsys):
    assert cli.main(["report", "--out", str(identity_run / "out")]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 4 and all("PASS" in ln for ln in lines)
