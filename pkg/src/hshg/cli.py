"""Command-line pipeline: field -> correctors -> half-space adaptation -> regularity -> report.

Each stage writes its artifacts plus ``record_<stage>.json`` into the output
directory. A stage whose record carries the current config hash and whose
artifacts exist is skipped. Exit codes: 0 success, 2 missing upstream
artifact or bad config, 3 failed invariant.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np

from . import config as K
from . import correctors as C
from . import halfspace as H
from . import io as IO
from . import regularity as R
from .fields import EllipticityError, certify, edge_coefficients

log = logging.getLogger("hshg")

STAGES = ["gen-field", "cell-problem", "adapt", "regularity", "report"]
UPSTREAM = {"gen-field": None, "cell-problem": "gen-field", "adapt": "cell-problem",
            "regularity": "adapt", "report": None}
ARTIFACTS = {
    "gen-field": ["field.hshg"],
    "cell-problem": ["correctors.hshg", "delta.csv"],
    "adapt": ["halfspace.hshg", "deltaH.csv"],
    "regularity": ["excess.csv", "excess.json"],
    "report": ["summary.json"],
}


class MissingUpstream(RuntimeError):
    pass


class InvariantFailure(RuntimeError):
    def __init__(self, check, detail=""):
        super().__init__(f"invariant failed: {check} {detail}".strip())
        self.check = check


def tool_version():
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "unknown"


def file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def record_path(out, stage):
    return Path(out) / f"record_{stage.replace('-', '_')}.json"


def up_to_date(out, stage, chash):
    rp = record_path(out, stage)
    if not rp.exists():
        return False
    rec = IO.load_json(rp)
    return rec.get("config_hash") == chash and rec.get("passed") and all(
        (Path(out) / a).exists() for a in ARTIFACTS[stage])


def require(out, stage, chash):
    up = UPSTREAM[stage]
    if up is None:
        return
    if not up_to_date(out, up, chash):
        raise MissingUpstream(f"stage {stage!r} needs the output of {up!r} for this config in {out}")


# stages -----------------------------------------------------------------------

def _gen_field(cfg, out, workers):
    try:
        field = K.build_field(cfg)
        certify(field)
    except EllipticityError as exc:
        raise InvariantFailure("ellipticity", str(exc)) from None
    IO.write_field(out / "field.hshg", field)
    return {"ellipticity_certified": True}, {"lam": field.lam, "provenance": field.provenance}


def _cell_problem(cfg, out, workers):
    field = IO.read_field(out / "field.hshg")
    cs = C.compute_correctors(field, cfg["solver"]["tol"], cfg["solver"]["method"])
    IO.save_correctors(out / "correctors.hshg", cs, field.lam)
    IO.write_delta_table(out / "delta.csv", cs.delta_table)
    phi_ok = all(v <= 1e-8 for k, v in cs.residuals.items() if k.startswith("phi_"))
    checks = {"phi_residual": phi_ok, "sigma_divergence": cs.residuals["sigma_div"] <= 1e-8,
              "sigma_skew": bool(np.array_equal(cs.sigma, -np.swapaxes(cs.sigma, 1, 2)))}
    cond = C.check_condition(cs.delta_table, field.grid.spacing)
    return checks, {"a_hom": cs.a_hom.tolist(), "residuals": cs.residuals,
                    "sum_m_delta13": cond["sum_m_delta13"], "sum_delta": cond["sum_delta"]}


def _adapt_config(cfg):
    a, s = cfg["adapt"], cfg["solver"]
    return H.AdaptConfig(r0=a["r0"], M_max=a["M_max"], smallness_threshold=a["smallness_threshold"],
                         tail_threshold=float("inf") if a["tail_threshold"] is None else a["tail_threshold"],
                         margin=a["margin"], tol=s["tol"], method=s["method"], anchor=a["anchor"],
                         psi_tol=a["psi_tol"])


def _adapt(cfg, out, workers):
    field = IO.read_field(out / "field.hshg")
    cs = IO.load_correctors(out / "correctors.hshg")
    try:
        hs = H.induction_driver(field, cs, _adapt_config(cfg))
    except H.AdaptationError as exc:
        raise InvariantFailure("adaptation", str(exc)) from None
    IO.save_halfspace(out / "halfspace.hshg", hs, field.lam)
    r0 = hs.ledger.r0
    radii = [r0 * 2.0**k for k in range(64) if r0 * 2.0**k <= hs.box.extent]
    table_h = H.deltaH_table(hs, cs, radii)
    whole = {r: v for r, v in cs.delta_table.items()}
    missing = [r for r in radii if r not in whole and r <= 0.5 * min(cs.grid.lengths)]
    whole.update(C.delta_table(cs, missing))
    IO.write_deltaH_table(out / "deltaH.csv", table_h, whole)
    tol = cfg["solver"]["tol"]
    checks = {
        "flat_boundary_zero": bool(np.all(hs.phiH_d[..., 0][_inner_boundary(hs)] == 0)),
        "corrector_residual": hs.residuals["corrector"] <= 10 * tol,
        "psi_residual": hs.residuals["psi"] <= (cfg["adapt"]["psi_tol"] or np.inf),
        "sigmaH_skew": bool(np.array_equal(hs.sigmaH, -np.swapaxes(hs.sigmaH, 1, 2))),
    }
    return checks, {"ledger": hs.ledger.as_dict(), "residuals": hs.residuals}


def _inner_boundary(hs):
    X = hs.box.mesh()
    r = np.sqrt(sum(x**2 for x in X[:-1]))[..., 0]
    return r < hs.ledger.r0 * 2.0**hs.ledger.M


def _one_sample(args):
    grid, coef, phiH_d, radii, alpha, c_pass, modes, seed, tol, method = args
    u = R.harmonic_sample(grid, coef, R.random_outer_data(grid, seed, modes), tol, method)
    return R.excess_report(u, phiH_d, grid, radii, alpha, c_pass)


def _regularity(cfg, out, workers):
    field = IO.read_field(out / "field.hshg")
    hs = IO.load_halfspace(out / "halfspace.hshg")
    rc = cfg["regularity"]
    grid = hs.box.grid
    r0 = hs.ledger.r0
    radii = rc["radii"] or [r0 * 2.0**k for k in range(64) if r0 * 2.0**k <= hs.box.extent]
    if max(radii) > hs.box.extent:
        raise K.ConfigError(f"analysis radius {max(radii)} exceeds the box extent {hs.box.extent}")
    coef = [hs.box.restrict(c) for c in edge_coefficients(field)]
    seed0 = cfg["field"].get("seed", 0)
    jobs = [(grid, coef, hs.phiH_d, radii, alpha, rc["c_pass"], rc["modes"], seed0 * 1000 + s,
             cfg["solver"]["tol"], cfg["solver"]["method"])
            for alpha in rc["alpha"] for s in range(rc["samples"])]
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        reports = list(pool.map(_one_sample, jobs))
    first = reports[0]
    IO.write_excess_report(out / "excess.csv", first)
    for i, rep in enumerate(reports):
        IO.write_excess_report(out / f"excess_{i:03d}.csv", rep)
    summary = [{"sample": i, "alpha": rep.alpha, "max_decay_ratio": rep.max_decay_ratio,
                "decay_fit": rep.decay_fit, "passed": rep.passed, "status": rep.extra["status"],
                "mean_value_max": rep.extra["mean_value_max"], "coercive": rep.extra["coercive"]}
               for i, rep in enumerate(reports)]
    frac = sum(s["passed"] for s in summary) / len(summary)
    IO.dump_json({"radii": radii, "samples": summary, "pass_fraction": frac}, out / "excess.json")
    checks = {"excess_decay": frac >= rc["min_pass_fraction"],
              "coercivity": all(s["coercive"] for s in summary)}
    return checks, {"pass_fraction": frac}


def _report(cfg, out, workers):
    stages = {}
    for st in STAGES[:-1]:
        rp = record_path(out, st)
        if not rp.exists():
            raise MissingUpstream(f"no record for stage {st!r} in {out}")
        rec = IO.load_json(rp)
        stages[st] = {"passed": rec["passed"], "checks": rec["checks"], "config_hash": rec["config_hash"]}
    ok = all(s["passed"] for s in stages.values())
    IO.dump_json({"passed": ok, "stages": stages, "tool_version": tool_version()}, out / "summary.json")
    for st, s in stages.items():
        print(f"{st:13s} {'PASS' if s['passed'] else 'FAIL'}  " +
              ", ".join(f"{k}={'ok' if v else 'FAIL'}" for k, v in s["checks"].items()))
    return {"all_stages_passed": ok}, {}


RUNNERS = {"gen-field": _gen_field, "cell-problem": _cell_problem, "adapt": _adapt,
           "regularity": _regularity, "report": _report}


def run_stage(stage, cfg, out, workers=1, force=False):
    """Run one stage; returns its record. Raises on missing inputs or failed checks."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    chash = K.config_hash(cfg)
    IO.dump_json(cfg, out / "config.json")
    if stage != "report" and not force and up_to_date(out, stage, chash):
        log.info("%s: up to date (config %s)", stage, chash[:12])
        return IO.load_json(record_path(out, stage))
    require(out, stage, chash)
    t = time.perf_counter()
    checks, info = RUNNERS[stage](cfg, out, workers)
    digests = {a: file_digest(out / a) for a in ARTIFACTS[stage]}
    rec = {"stage": stage, "config_hash": chash, "tool_version": tool_version(),
           "artifacts": ARTIFACTS[stage], "artifact_sha256": digests,
           "seconds": round(time.perf_counter() - t, 3),
           "checks": checks, "passed": all(checks.values()), "info": info}
    # everything except the timing enters the record hash
    body = json.dumps({k: v for k, v in rec.items() if k != "seconds"}, sort_keys=True, default=IO.jsonable)
    rec["record_hash"] = hashlib.sha256(body.encode()).hexdigest()
    IO.dump_json(rec, record_path(out, stage))
    failed = [k for k, v in checks.items() if not v]
    if failed:
        raise InvariantFailure(failed[0])
    return rec


def build_parser():
    p = argparse.ArgumentParser(prog="hshg", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in STAGES + ["run"]:
        sp = sub.add_parser(name, help="run all stages in order" if name == "run" else f"run the {name} stage")
        sp.add_argument("--config", required=name != "report", type=Path)
        sp.add_argument("--out", required=True, type=Path)
        sp.add_argument("--seed-override", type=int, default=None)
        sp.add_argument("--workers", type=int, default=1)
        sp.add_argument("--force", action="store_true", help="recompute even when up to date")
        if name == "run":
            sp.add_argument("--stage", choices=STAGES + ["all"], default="all")
    return p


def main(argv=None):
    logging.basicConfig(level=os.environ.get("HSHG_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.config is not None:
            cfg = K.load(args.config, args.seed_override)
        else:
            cfg = IO.load_json(args.out / "config.json")
        if args.command == "run":
            stages = STAGES if args.stage == "all" else [args.stage]
        else:
            stages = [args.command]
        for st in stages:
            run_stage(st, cfg, args.out, args.workers, args.force)
    except (MissingUpstream, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except K.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except InvariantFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
