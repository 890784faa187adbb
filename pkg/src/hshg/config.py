"""Experiment configuration: JSON schema, defaults, hashing, field construction."""
from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import jsonschema
import numpy as np

from . import fields as F

SCHEMA_VERSION = 1

_matrix = {"type": "array", "items": {"type": "array", "items": {"type": "number"}}}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema_version", "grid", "field"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "grid": {
            "type": "object",
            "required": ["cells"],
            "additionalProperties": False,
            "properties": {
                "cells": {"type": "array", "items": {"type": "integer", "minimum": 8},
                          "minItems": 2, "maxItems": 3},
                "spacing": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "field": {
            "type": "object",
            "required": ["generator"],
            "additionalProperties": False,
            "properties": {
                "generator": {"enum": ["constant", "laminate", "checkerboard", "poisson", "gaussian"]},
                "params": {"type": "object"},
                "seed": {"type": "integer", "minimum": 0},
            },
        },
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "tol": {"type": "number", "minimum": 1e-14, "maximum": 1e-4},
                "method": {"enum": ["amg", "cg", "direct"]},
            },
        },
        "adapt": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "r0": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "M_max": {"type": ["integer", "null"], "minimum": -1},
                "smallness_threshold": {"type": "number", "exclusiveMinimum": 0},
                "tail_threshold": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "anchor": {"type": ["string", "number", "null"]},
                "margin": {"type": "number", "minimum": 1},
                "psi_tol": {"type": ["number", "null"], "exclusiveMinimum": 0},
            },
        },
        "regularity": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "samples": {"type": "integer", "minimum": 1},
                "alpha": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0,
                                                     "exclusiveMaximum": 1}, "minItems": 1},
                "radii": {"type": ["array", "null"], "items": {"type": "number", "exclusiveMinimum": 0}},
                "c_pass": {"type": "number", "exclusiveMinimum": 0},
                "modes": {"type": "integer", "minimum": 0},
                "min_pass_fraction": {"type": "number", "minimum": 0, "maximum": 1},
            },
        },
    },
}

DEFAULTS = {
    "grid": {"spacing": 1.0},
    "field": {"params": {}, "seed": 0},
    "solver": {"tol": 1e-10, "method": "amg"},
    "adapt": {"r0": None, "M_max": None, "smallness_threshold": 0.1, "tail_threshold": None,
              "anchor": "boundary-mean", "margin": 4.0, "psi_tol": 0.02},
    "regularity": {"samples": 4, "alpha": [0.5], "radii": None, "c_pass": 10.0, "modes": 4,
                   "min_pass_fraction": 0.9},
}


class ConfigError(ValueError):
    pass


def with_defaults(cfg):
    out = copy.deepcopy(cfg)
    for key, sub in DEFAULTS.items():
        block = out.setdefault(key, {})
        for k, v in sub.items():
            block.setdefault(k, copy.deepcopy(v))
    return out


def validate(cfg):
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {path}: {exc.message}") from None
    return cfg


def load(path, seed_override=None):
    try:
        cfg = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    validate(cfg)
    cfg = with_defaults(cfg)
    if seed_override is not None:
        cfg["field"]["seed"] = int(seed_override)
    return validate(cfg)


def canonical(cfg):
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def config_hash(cfg):
    return hashlib.sha256(canonical(cfg).encode()).hexdigest()


def grid_of(cfg):
    g = cfg["grid"]
    return F.GridSpec(len(g["cells"]), tuple(g["cells"]), float(g.get("spacing", 1.0)))


def build_field(cfg):
    grid = grid_of(cfg)
    fcfg = cfg["field"]
    p = dict(fcfg.get("params", {}))
    seed = fcfg.get("seed", 0)
    kind = fcfg["generator"]
    d = grid.dim
    if kind == "constant":
        return F.gen_constant(grid, np.asarray(p.get("matrix", np.eye(d)), float))
    if kind == "laminate":
        return F.gen_laminate(grid, p.get("axis", d - 1), p.get("values", [0.25, 1.0]),
                              p.get("breakpoints", [0.0, 0.5]), p.get("period", 16 * grid.spacing))
    if kind == "checkerboard":
        return F.gen_checkerboard(grid, tuple(p.get("values", (1.0, 0.25))), p.get("blocks", 2))
    if kind == "poisson":
        inside = np.asarray(p.get("a_matrix", 0.5 * np.eye(d)), float)
        outside = np.asarray(p.get("b_matrix", np.eye(d)), float)
        return F.gen_poisson_inclusions(grid, p.get("intensity", 0.01), p.get("radius", 3 * grid.spacing),
                                        inside, outside, seed)
    if kind == "gaussian":
        return F.gen_gaussian_lipschitz(grid, p.get("beta", 1.0), tuple(p.get("xi_range", (0.25, 1.0))), seed)
    raise ConfigError(f"unknown generator {kind!r}")
