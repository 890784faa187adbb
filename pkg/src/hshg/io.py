"""Binary snapshots with JSON sidecars, and CSV tables.

Container layout (little endian)::

    b"HSHG" | u16 version | u8 dim | u32[dim] cells | f64 spacing | f64 lambda | u8 layout | payload

Layout 0 stores the cell matrices ``(*cells, dim, dim)`` as f64. Layout 1
stores named sections: ``u32 count`` then, per section, ``u16 name length |
name (utf-8) | u8 ndim | u32[ndim] shape | f64 data``. Grid origin,
periodicity and provenance go into the ``<path>.json`` sidecar.
"""
from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .fields import CoefficientField, GridSpec

MAGIC = b"HSHG"
VERSION = 1
LAYOUT_CELLS = 0
LAYOUT_SECTIONS = 1


class FormatError(ValueError):
    pass


def sidecar(path):
    path = Path(path)
    return path.with_name(path.name + ".json")


def dump_json(obj, path):
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2, default=jsonable) + "\n")


def load_json(path):
    return json.loads(Path(path).read_text())


def jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"cannot serialise {type(x).__name__}")


def _header(grid, lam, layout):
    d = grid.dim
    return (MAGIC + struct.pack("<HB", VERSION, d) + struct.pack(f"<{d}I", *grid.cells)
            + struct.pack("<ddB", grid.spacing, lam, layout))


def _read_header(buf):
    if buf[:4] != MAGIC:
        raise FormatError("not an HSHG container")
    version, d = struct.unpack_from("<HB", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    off = 7
    cells = struct.unpack_from(f"<{d}I", buf, off)
    off += 4 * d
    spacing, lam, layout = struct.unpack_from("<ddB", buf, off)
    off += 17
    return {"dim": d, "cells": tuple(cells), "spacing": spacing, "lam": lam, "layout": layout}, off


def _grid_meta(grid):
    return {"dim": grid.dim, "cells": list(grid.cells), "spacing": grid.spacing,
            "origin": list(grid.origin), "periodic": list(grid.periodic)}


def _grid_from(header, meta):
    g = meta.get("grid", {})
    return GridSpec(header["dim"], header["cells"], header["spacing"],
                    tuple(g["origin"]) if "origin" in g else None,
                    tuple(g["periodic"]) if "periodic" in g else None)


def write_field(path, field):
    path = Path(path)
    data = np.ascontiguousarray(field.cells, dtype="<f8")
    path.write_bytes(_header(field.grid, field.lam, LAYOUT_CELLS) + data.tobytes())
    dump_json({"kind": "coefficient_field", "grid": _grid_meta(field.grid), "lam": field.lam,
               "symmetric": bool(field.symmetric), "provenance": field.provenance}, sidecar(path))
    return path


def read_field(path):
    path = Path(path)
    buf = path.read_bytes()
    header, off = _read_header(buf)
    if header["layout"] != LAYOUT_CELLS:
        raise FormatError("container does not hold a coefficient field")
    d = header["dim"]
    shape = header["cells"] + (d, d)
    expected = off + 8 * int(np.prod(shape))
    if len(buf) != expected:
        raise FormatError(f"truncated container: {len(buf)} bytes, expected {expected}")
    cells = np.frombuffer(buf, dtype="<f8", offset=off).reshape(shape).astype(float)
    meta = load_json(sidecar(path)) if sidecar(path).exists() else {}
    grid = _grid_from(header, meta)
    return CoefficientField(grid, cells, header["lam"], meta.get("symmetric", True),
                            meta.get("provenance", {}))


def write_sections(path, grid, lam, sections, meta=None):
    """Store named arrays on one grid; ``meta`` goes to the sidecar."""
    path = Path(path)
    parts = [_header(grid, lam, LAYOUT_SECTIONS), struct.pack("<I", len(sections))]
    for name in sorted(sections):
        arr = np.ascontiguousarray(sections[name], dtype="<f8")
        key = name.encode()
        parts.append(struct.pack("<H", len(key)) + key)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    path.write_bytes(b"".join(parts))
    full = {"grid": _grid_meta(grid), "lam": lam}
    full.update(meta or {})
    dump_json(full, sidecar(path))
    return path


def read_sections(path):
    path = Path(path)
    buf = path.read_bytes()
    header, off = _read_header(buf)
    if header["layout"] != LAYOUT_SECTIONS:
        raise FormatError("container does not hold sections")
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + n].decode()
        off += n
        (ndim,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        size = int(np.prod(shape))
        if off + 8 * size > len(buf):
            raise FormatError(f"truncated section {name!r}")
        out[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape).astype(float)
        off += 8 * size
    if off != len(buf):
        raise FormatError("trailing bytes after the last section")
    meta = load_json(sidecar(path)) if sidecar(path).exists() else {}
    return _grid_from(header, meta), out, meta


# tables -----------------------------------------------------------------------

def fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path, columns, rows):
    """``columns`` is a list of ``(name, unit)``; the header row reads ``name [unit]``."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"{name} [{unit}]" for name, unit in columns])
        for row in rows:
            w.writerow([fmt(x) for x in row])
    return path


def read_csv(path):
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    header = [h.rsplit(" [", 1)[0] for h in rows[0]]
    return header, [[float(x) for x in r] for r in rows[1:]]


DELTA_COLUMNS = [("r", "length"), ("delta", "1")]
DELTAH_COLUMNS = [("r", "length"), ("deltaH", "1"), ("delta_wholespace", "1")]
EXCESS_COLUMNS = [("r", "length"), ("exc", "gradient^2"), ("b_min", "1"), ("mv_ratio", "1"),
                  ("curvature", "1")]


def write_delta_table(path, table):
    return write_csv(path, DELTA_COLUMNS, [(r, table[r]) for r in sorted(table)])


def write_deltaH_table(path, table_h, table):
    return write_csv(path, DELTAH_COLUMNS,
                     [(r, table_h[r], table.get(r, float("nan"))) for r in sorted(table_h)])


def write_excess_report(path, report):
    return write_csv(path, EXCESS_COLUMNS, report.rows())


# snapshots of the corrector stages --------------------------------------------

def save_correctors(path, cs, lam=0.0):
    sections = {"phi": cs.phi, "sigma": cs.sigma, "a_hom": cs.a_hom}
    meta = {"kind": "corrector_set", "residuals": cs.residuals,
            "delta_table": {repr(r): v for r, v in sorted(cs.delta_table.items())}}
    return write_sections(path, cs.grid, lam, sections, meta)


def load_correctors(path):
    from .correctors import CorrectorSet

    grid, sec, meta = read_sections(path)
    if meta.get("kind") != "corrector_set":
        raise FormatError("snapshot does not hold a corrector set")
    table = {float(r): v for r, v in meta["delta_table"].items()}
    return CorrectorSet(grid, sec["phi"], sec["sigma"], sec["a_hom"], None, meta["residuals"], table)


def save_halfspace(path, hs, lam=0.0):
    sections = {"phiH": hs.phiH, "sigmaH": hs.sigmaH, "psi": hs.psi, "v": hs.v,
                "tilde_phi": hs.tilde_phi, "b_total": hs.b_total}
    for m, arr in hs.phi_scales.items():
        sections[f"phi_m/{m}"] = arr
    meta = {"kind": "halfspace_corrector", "torus": _grid_meta(hs.box.torus),
            "ledger": hs.ledger.as_dict(), "residuals": hs.residuals,
            "b": {str(n): b.tolist() for n, b in sorted(hs.b.items())}}
    return write_sections(path, hs.box.grid, lam, sections, meta)


def load_halfspace(path):
    from .halfspace import HalfBox, HalfSpaceCorrector, ScaleLedger

    grid, sec, meta = read_sections(path)
    if meta.get("kind") != "halfspace_corrector":
        raise FormatError("snapshot does not hold a half-space corrector")
    t = meta["torus"]
    torus = GridSpec(t["dim"], tuple(t["cells"]), t["spacing"], tuple(t["origin"]), tuple(t["periodic"]))
    box = HalfBox.from_torus(torus)
    if box.grid != grid:
        raise FormatError("stored box grid does not match its torus")
    led = meta["ledger"]
    ledger = ScaleLedger(led["r0"], led["m0"], led["M"],
                         {int(k): v for k, v in led["L"].items()},
                         {int(k): v for k, v in led["delta"].items()},
                         led["delta13_tail"], led["tail_threshold"], led["smallness_threshold"],
                         {int(k): v for k, v in led["energies"].items()},
                         {int(k): {float(r): x for r, x in v.items()} for k, v in led["deltaH_checks"].items()},
                         led["n_max"])
    scales = {int(k.split("/")[1]): v for k, v in sec.items() if k.startswith("phi_m/")}
    b = {int(n): np.array(v) for n, v in meta["b"].items()}
    return HalfSpaceCorrector(box, sec["phiH"], sec["sigmaH"], scales, sec["tilde_phi"], sec["v"],
                              b, sec["b_total"], sec["psi"], ledger, meta["residuals"])
