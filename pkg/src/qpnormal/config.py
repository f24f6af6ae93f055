"""Experiment configuration: INI syntax, one [experiment] section, dotted keys, JSON values.

    [experiment]
    schema = 1
    model.kind = "ising"
    model.L = 1
    frequencies = [1.0, 1.4142135623730951]

Unknown keys, bad types and a wrong schema number are all ConfigError.
"""

from __future__ import annotations

import configparser
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

SCHEMA_VERSION = 1
SECTION = "experiment"


def _num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _numlist(v):
    return isinstance(v, list) and all(_num(x) for x in v)


def _modes(v):
    return isinstance(v, list) and all(
        isinstance(d, dict) and set(d) == {"l", "amplitude"} and isinstance(d["l"], list)
        and all(_int(x) for x in d["l"]) and (_num(d["amplitude"]) or _numlist(d["amplitude"]))
        for d in v)


def _observables(v):
    return isinstance(v, list) and all(
        isinstance(d, dict) and "site" in d and len({"pauli", "matrix"} & set(d)) == 1
        and set(d) <= {"site", "pauli", "matrix"} for d in v)


def _oneof(*opts):
    f = lambda v: v in opts
    f.__doc__ = " | ".join(map(str, opts))
    return f


# key -> (validator, default); default None with required=True means the key must be given
SCHEMA = {
    "schema": (_int, None),
    "seed": (_int, 0),
    "model.kind": (_oneof("ising", "hubbard", "custom"), None),
    "model.L": (_int, 1),
    "model.J": (lambda v: _num(v) or _numlist(v), 1.0),
    "model.h": (_numlist, [0.0, 0.0, 0.0]),
    "model.range": (_int, 1),
    "model.drive.modes": (_modes, []),
    "model.regime": (_oneof("small", "fast"), "small"),
    "model.epsilon": (_num, 0.05),
    "model.lambda": (_num, 1.0),
    "model.custom": (lambda v: isinstance(v, dict), None),
    "frequencies": (_numlist, None),
    "diophantine.tau": (_num, 1.0),
    "diophantine.k_max": (_int, 20),
    "diophantine.joint_k_max": (_int, 3),
    "diophantine.tau_J": (_num, None),
    "normalform.variant": (_oneof("inv", "obs"), "inv"),
    "normalform.steps": (lambda v: v is None or _int(v), None),
    "normalform.kappa": (_num, 1.0),
    "normalform.rho": (_num, 1.0),
    "normalform.tol": (_num, 1e-8),
    "normalform.lmax": (lambda v: v is None or _int(v), 8),
    "normalform.guard": (_oneof("report", "strict"), "report"),
    "dynamics.t_max": (_num, 5.0),
    "dynamics.dt": (lambda v: v is None or _num(v), None),
    "dynamics.method": (_oneof("midpoint", "magnus4"), "midpoint"),
    "dynamics.snapshot_every": (_int, 10),
    "dynamics.observables": (_observables, [{"site": "center", "pauli": "Z"}]),
    "recurrence.delta": (_num, 0.05),
    "recurrence.j_count": (_int, 5),
    "recurrence.window": (_num, 300.0),
    "output.directory": (lambda v: isinstance(v, str), "out"),
    "output.formats": (lambda v: isinstance(v, list) and set(v) <= {"csv", "op"}, ["csv"]),
}
REQUIRED = ("schema", "model.kind", "frequencies")


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=dict)
    source: str | None = None

    def __getitem__(self, key):
        if key not in SCHEMA:
            raise KeyError(key)
        return self.values.get(key, SCHEMA[key][1])

    def set(self, key, value):
        _check(key, value)
        self.values[key] = value

    def resolved(self):
        """Every schema key with its effective value (sorted, for the manifest)."""
        return {k: self[k] for k in sorted(SCHEMA)}


def _check(key, value):
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    ok, _ = SCHEMA[key]
    if not ok(value):
        raise ConfigError(f"bad value for {key}: {value!r}")


def parse_config(text, source=None):
    cp = configparser.ConfigParser(interpolation=None, strict=True)
    cp.optionxform = str
    try:
        cp.read_string(text, source=source or "<config>")
    except configparser.Error as exc:
        raise ConfigError(f"config syntax: {exc}") from exc
    extra = [s for s in cp.sections() if s != SECTION]
    if extra:
        raise ConfigError(f"unknown config section(s): {', '.join(extra)}")
    if not cp.has_section(SECTION):
        raise ConfigError(f"config needs an [{SECTION}] section")
    vals = {}
    for key, raw in cp.items(SECTION):
        try:
            v = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{key}: value is not JSON ({exc.msg})") from exc
        _check(key, v)
        vals[key] = v
    for key in REQUIRED:
        if key not in vals:
            raise ConfigError(f"missing required key {key!r}")
    if vals["schema"] != SCHEMA_VERSION:
        raise ConfigError(f"schema {vals['schema']} not supported (expected {SCHEMA_VERSION})")
    if vals["model.kind"] == "custom" and "model.custom" not in vals:
        raise ConfigError("model.kind = custom needs model.custom")
    return ExperimentConfig(vals, source)


def load_config(path):
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(p))
