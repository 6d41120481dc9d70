"""Experiment configuration: YAML files checked against a strict schema.

A config names one operation, its parameters and, optionally, the
acceptance thresholds to enforce.  Unknown keys are rejected and every
error carries the dotted path of the offending field.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

import yaml

from ..catalog import CATALOG

OPERATIONS = ("ibp-check", "matrix-limit", "dual-limit", "rates", "lln",
              "coupling", "tails", "negmom", "paths-debug")
TOP_KEYS = ("experiment", "operation", "seed", "output", "threads", "params", "checks")
MAX_SEED = (1 << 64) - 1


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class Field:
    kind: Callable[[str, Any], Any]
    default: Any = None


# ---------------------------------------------------------------- validators

def _int(lo=None, hi=None):
    def check(path, v):
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError(path, f"expected an integer, got {v!r}")
        if lo is not None and v < lo or hi is not None and v > hi:
            raise ConfigError(path, f"{v} outside [{lo}, {hi}]")
        return v
    return check


def _float(lo=None, hi=None, open_lo=False):
    def check(path, v):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(path, f"expected a number, got {v!r}")
        v = float(v)
        if not math.isfinite(v):
            raise ConfigError(path, "must be finite")
        if lo is not None and (v < lo or open_lo and v == lo) or hi is not None and v > hi:
            raise ConfigError(path, f"{v} outside {'(' if open_lo else '['}{lo}, {hi}]")
        return v
    return check


def _opt(inner):
    def check(path, v):
        return None if v is None else inner(path, v)
    return check


def _list(inner, min_len=1):
    def check(path, v):
        if not isinstance(v, (list, tuple)):
            v = [v]
        if len(v) < min_len:
            raise ConfigError(path, f"need at least {min_len} entries")
        return [inner(f"{path}[{i}]", x) for i, x in enumerate(v)]
    return check


def _choice(*options):
    def check(path, v):
        if v not in options:
            raise ConfigError(path, f"{v!r} not one of {list(options)}")
        return v
    return check


def _bool(path, v):
    if not isinstance(v, bool):
        raise ConfigError(path, f"expected true/false, got {v!r}")
    return v


def _vector(path, v):
    if isinstance(v, str):
        named = {"horizontal": [1.0, 0.0, 0.0], "vertical": [0.0, 1.0, 0.0],
                 "vertical-im": [0.0, 0.0, 1.0]}
        if v not in named:
            raise ConfigError(path, f"unknown direction {v!r}")
        return named[v]
    vals = _list(_float(), 3)(path, v)
    if len(vals) != 3:
        raise ConfigError(path, "direction needs 3 components (v_R, Re v_C, Im v_C)")
    return vals


def _state(path, v):
    if not isinstance(v, dict):
        raise ConfigError(path, "expected a mapping with u, z")
    _reject_unknown(path, v, ("u", "z", "circle"))
    u = _float()(f"{path}.u", v.get("u", 0.0))
    z = _list(_float(), 2)(f"{path}.z", v.get("z", [0.0, 0.0]))
    if len(z) != 2:
        raise ConfigError(f"{path}.z", "expected [re, im]")
    return {"u": u, "z": z, "circle": _bool(f"{path}.circle", v.get("circle", False))}


_function = _choice(*CATALOG)
_positive = _float(0.0, open_lo=True)
_T_list = _list(_positive)

SCHEMAS = {
    "ibp-check": {
        "params": {
            "functions": Field(_list(_function), list(CATALOG)),
            "directions": Field(_list(_vector), ["horizontal", "vertical"]),
            "x": Field(_state, {"u": 0.3, "z": [0.2, -0.1]}),
            "T": Field(_T_list, [4.0]),
            "paths": Field(_int(2, 10 ** 8), 10_000),
            "grid": Field(_opt(_int(2)), None),
            "eps": Field(_opt(_positive), None),
        },
        "checks": {"k_sigma": Field(_positive, 3.0)},
    },
    "matrix-limit": {
        "params": {
            "T": Field(_float(math.sqrt(2.0)), 4096.0),
            "paths": Field(_int(2, 10 ** 7), 2000),
            "grid": Field(_opt(_int(2)), None),
            "limit_paths": Field(_opt(_int(2)), None),
            "limit_grid": Field(_int(64), 4096),
            "refine": Field(_int(2), 4),
            "inverse_T": Field(_list(_float(math.sqrt(2.0))), [2.0, 8.0, 32.0, 128.0]),
            "inverse_p": Field(_list(_positive), [2.0]),
            "inverse_paths": Field(_int(2, 10 ** 8), 10_000),
            "resamples": Field(_int(10), 1000),
        },
        "checks": {
            "k_sigma": Field(_positive, 3.0),
            "max_ratio": Field(_positive, 10.0),
            "singular_rate": Field(_float(0.0, 1.0), 1e-3),
        },
    },
    "dual-limit": {
        "params": {
            "T": Field(_T_list, [64.0, 128.0, 256.0, 512.0, 1024.0, 2048.0, 4096.0]),
            "paths": Field(_int(2, 10 ** 7), 2000),
            "grid": Field(_opt(_int(2)), None),
            "limit_paths": Field(_opt(_int(2)), None),
            "limit_grid": Field(_int(64), 4096),
            "resamples": Field(_int(10), 1000),
        },
        "checks": {
            "vertical_slope": Field(_list(_float(), 2), [-0.6, -0.4]),
            "horizontal_slope": Field(_list(_float(), 2), [-0.1, 0.1]),
            "k_sigma": Field(_positive, 3.0),
        },
    },
    "rates": {
        "params": {
            "function": Field(_function, "tanh_re_z"),
            "x": Field(_state, {"u": 0.3, "z": [0.2, -0.1]}),
            "T": Field(_T_list, [64.0, 128.0, 256.0, 512.0, 1024.0]),
            "paths": Field(_int(2, 10 ** 8), 2000),
            "grid": Field(_opt(_int(2)), None),
        },
        "checks": {
            "vertical_slope": Field(_list(_float(), 2), [-0.6, -0.4]),
            "mixed_slope": Field(_list(_float(), 2), [-0.35, -0.15]),
        },
    },
    "lln": {
        "params": {
            "f": Field(_choice("sin2", "cos", "sin"), "cos"),
            "g": Field(_choice("one", "s", "sin2pi"), "one"),
            "lam": Field(_T_list, [10.0, 30.0, 100.0]),
            "paths": Field(_int(2, 10 ** 7), 200),
            "grid": Field(_opt(_int(2)), None),
        },
        "checks": {
            "max_deviation": Field(_opt(_positive), None),
            "decreasing": Field(_bool, True),
            "k_sigma": Field(_positive, 3.0),
        },
    },
    "coupling": {
        "params": {
            "function": Field(_function, "tanh_re_z"),
            "u0": Field(_positive, 0.05),
            "z": Field(_list(_float(), 2), [0.0, 0.0]),
            "center": Field(_float(), math.pi / 2),
            "modes": Field(_list(_choice("line", "circle")), ["line", "circle"]),
            "T": Field(_T_list, [16.0, 32.0, 64.0, 128.0, 256.0, 512.0, 1024.0]),
            "paths": Field(_int(2, 10 ** 8), 20_000),
            "grid": Field(_int(2), 8),
        },
        "checks": {
            "k_sigma": Field(_positive, 3.0),
            "max_slope": Field(_float(), -0.4),
        },
    },
    "tails": {
        "params": {
            "theta": Field(_float(), 0.3),
            "t": Field(_list(_float(1.0)), [4.0, 16.0, 64.0]),
            "thresholds": Field(_list(_positive, 2), [0.25, 0.5, 0.75, 1.0]),
            "paths": Field(_int(2, 10 ** 8), 20_000),
            "grid": Field(_int(2), 64),
        },
        "checks": {"max_ratio": Field(_float(1.0), 2.0)},
    },
    "negmom": {
        "params": {
            "alpha": Field(_float(0.0, 1.0, open_lo=True), 0.5),
            "t": Field(_positive, 1.0),
            "a": Field(_list(_float()), [0.0, 0.25, 0.5, 1.0, 2.0, -0.5, -1.5]),
        },
        "checks": {"closed_form_tol": Field(_positive, 1e-6)},
    },
    "paths-debug": {
        "params": {
            "T": Field(_positive, 1.0),
            "grid": Field(_int(2), 64),
            "paths": Field(_int(1, 1000), 1),
            "basis": Field(_choice("increments", "kl", "schauder"), "increments"),
            "K": Field(_int(1), 64),
        },
        "checks": {},
    },
}


def _reject_unknown(path: str, table: dict, allowed) -> None:
    for k in table:
        if k not in allowed:
            where = f"{path}.{k}" if path else str(k)
            raise ConfigError(where, f"unknown key; allowed: {sorted(allowed)}")


def _section(path: str, raw, schema: dict, fill: bool) -> dict:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(path, "expected a mapping")
    _reject_unknown(path, raw, schema)
    out = {}
    for k, f in schema.items():
        if k in raw:
            out[k] = f.kind(f"{path}.{k}", raw[k])
        elif fill:
            out[k] = f.kind(f"{path}.{k}", f.default) if f.default is not None else None
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    operation: str
    seed: int
    output: Optional[str]
    threads: int
    params: dict
    checks: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"experiment": self.experiment, "operation": self.operation,
                "seed": self.seed, "output": self.output, "threads": self.threads,
                "params": self.params, "checks": self.checks}

    def serialized(self) -> str:
        """Canonical JSON of the fields that determine the results."""
        d = self.to_dict()
        for k in ("output", "threads"):
            d.pop(k)
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.serialized().encode()).hexdigest()


def parse_config(raw: dict) -> ExperimentConfig:
    """Validate a raw mapping.  Declared ``checks`` keys are filled with defaults."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "expected a mapping")
    _reject_unknown("", raw, TOP_KEYS)
    if "operation" not in raw:
        raise ConfigError("operation", "missing")
    op = _choice(*OPERATIONS)("operation", raw["operation"])
    schema = SCHEMAS[op]
    seed = _int(0, MAX_SEED)("seed", raw.get("seed", 0))
    threads = _int(1, 256)("threads", raw.get("threads", 1))
    name = raw.get("experiment", op)
    if not isinstance(name, str) or not name:
        raise ConfigError("experiment", "expected a nonempty string")
    out = raw.get("output")
    if out is not None and not isinstance(out, str):
        raise ConfigError("output", "expected a path string")
    params = _section("params", raw.get("params"), schema["params"], fill=True)
    checks = raw.get("checks")
    if checks is None:
        checks = {}
    elif checks is True:
        checks = _section("checks", {}, schema["checks"], fill=True)
    else:
        checks = _section("checks", checks, schema["checks"], fill=True)
    return ExperimentConfig(name, op, seed, out, threads, params, checks)


def load_config(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise ConfigError("<file>", f"invalid YAML: {exc}") from None
    return {} if raw is None else raw
