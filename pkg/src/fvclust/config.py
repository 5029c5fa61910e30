"""Declarative run configuration (JSON) shared by every subcommand.

Example::

    {
      "data": {"simulate": {"cluster_sizes": [150, 150, 150]}, "seed": 1},
      "basis": {"n_knots": 30},
      "hyper": {"nu": 1.0},
      "sampler": {"n_chains": 3, "n_sweeps": 4000, "seed": 7, "backend": "pcg"},
      "diagnostics": {"burn_fraction": 0.5, "thin": 5, "monitor_points": 5},
      "summary": {"grid_points": 100},
      "replicate": {"n_replicates": 20, "nu_values": [0.1, 1, 10]},
      "output": "runs/desk"
    }

A CSV source replaces ``simulate`` by ``{"csv": path, "schema": {...}}``
(``schema`` may also be a path to a JSON file), optionally with
``"time_range": [lo, hi]``.  Relative paths are resolved against the config
file's directory.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ValidationError
from .sampler.chain import BACKENDS

TOP_KEYS = {"data", "basis", "hyper", "sampler", "diagnostics", "summary", "replicate", "output", "threads"}
SECTION_KEYS = {
    "data": {"simulate", "seed", "csv", "schema", "time_range"},
    "basis": {"n_knots", "knots"},
    "sampler": {"n_chains", "n_sweeps", "seed", "backend", "record_b", "checkpoint_every"},
    "diagnostics": {"burn_fraction", "thin", "monitor_points", "threshold"},
    "summary": {"grid_points"},
    "replicate": {"n_replicates", "nu_values", "seed"},
}
DEFAULTS = {
    "basis": {"n_knots": 30},
    "hyper": {},
    "sampler": {"n_chains": 3, "n_sweeps": 4000, "seed": 0, "backend": "pcg", "record_b": False,
                "checkpoint_every": 0},
    "diagnostics": {"burn_fraction": 0.5, "thin": 5, "monitor_points": 5, "threshold": 1.1},
    "summary": {"grid_points": 100},
    "replicate": {"n_replicates": 2, "nu_values": None, "seed": None},
    "output": "fvclust-out",
    "threads": None,
}


@dataclass
class RunConfig:
    """Validated configuration with defaults filled in (``raw`` is the resolved dict)."""

    raw: dict
    base_dir: Path

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> "RunConfig":
        if not isinstance(d, dict):
            raise ValidationError("config must be a JSON object")
        unknown = set(d) - TOP_KEYS
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        raw = copy.deepcopy(DEFAULTS)
        for key, val in d.items():
            if isinstance(raw.get(key), dict) and key in SECTION_KEYS:
                if not isinstance(val, dict):
                    raise ValidationError(f"config section {key!r} must be an object")
                bad = set(val) - SECTION_KEYS[key]
                if bad:
                    raise ValidationError(f"unknown keys in {key!r}: {sorted(bad)}")
                raw[key].update(val)
            else:
                raw[key] = copy.deepcopy(val)
        cfg = cls(raw, Path(base_dir))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(d, path.parent)

    def override(self, **kw) -> "RunConfig":
        """Apply CLI flag overrides (``None`` values are ignored)."""
        raw = copy.deepcopy(self.raw)
        mapping = {"seed": ("sampler", "seed"), "chains": ("sampler", "n_chains"),
                   "sweeps": ("sampler", "n_sweeps"), "backend": ("sampler", "backend"),
                   "out": (None, "output"), "threads": (None, "threads")}
        for k, v in kw.items():
            if v is None:
                continue
            sec, key = mapping[k]
            if sec is None:
                raw[key] = str(v) if k == "out" else v
            else:
                raw[sec][key] = v
        cfg = RunConfig(raw, self.base_dir)
        cfg.validate()
        return cfg

    # -- validation ----------------------------------------------------------
    def validate(self) -> None:
        r = self.raw
        data = r.get("data")
        if not isinstance(data, dict):
            raise ValidationError("config needs a 'data' section")
        bad = set(data) - SECTION_KEYS["data"]
        if bad:
            raise ValidationError(f"unknown keys in 'data': {sorted(bad)}")
        if ("simulate" in data) == ("csv" in data):
            raise ValidationError("data needs exactly one of 'simulate' or 'csv'")
        if "csv" in data and "schema" not in data:
            raise ValidationError("a CSV source needs a 'schema'")
        if "simulate" in data:
            from .data import SimulationSpec
            SimulationSpec.from_dict(data["simulate"])
        if "time_range" in data:
            tr = data["time_range"]
            if not (isinstance(tr, (list, tuple)) and len(tr) == 2 and float(tr[0]) < float(tr[1])):
                raise ValidationError("time_range must be [lo, hi] with lo < hi")
        s = r["sampler"]
        _pos_int(s["n_chains"], "sampler.n_chains")
        _pos_int(s["n_sweeps"], "sampler.n_sweeps")
        _nonneg_int(s["seed"], "sampler.seed")
        _nonneg_int(s["checkpoint_every"], "sampler.checkpoint_every")
        if s["backend"] not in BACKENDS:
            raise ValidationError(f"sampler.backend must be one of {BACKENDS}")
        dg = r["diagnostics"]
        if not 0 <= float(dg["burn_fraction"]) < 1:
            raise ValidationError("diagnostics.burn_fraction must lie in [0, 1)")
        _pos_int(dg["thin"], "diagnostics.thin")
        _pos_int(dg["monitor_points"], "diagnostics.monitor_points")
        _pos_int(r["summary"]["grid_points"], "summary.grid_points")
        b = r["basis"]
        if "knots" in b:
            if not isinstance(b["knots"], list) or not b["knots"]:
                raise ValidationError("basis.knots must be a non-empty list of knot lists")
        else:
            _pos_int(b["n_knots"], "basis.n_knots")
        if not isinstance(r["hyper"], dict):
            raise ValidationError("hyper must be an object")
        rep = r["replicate"]
        _pos_int(rep["n_replicates"], "replicate.n_replicates")
        if rep["nu_values"] is not None:
            if not isinstance(rep["nu_values"], list) or not all(float(v) > 0 for v in rep["nu_values"]):
                raise ValidationError("replicate.nu_values must be a list of positive numbers")
        if r["threads"] is not None:
            _pos_int(r["threads"], "threads")
        if not isinstance(r["output"], str) or not r["output"]:
            raise ValidationError("output must be a directory path")

    # -- accessors -------------------------------------------------------------
    def path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def output(self) -> Path:
        return self.path(self.raw["output"])

    @property
    def sampler(self) -> dict:
        return self.raw["sampler"]

    @property
    def diagnostics(self) -> dict:
        return self.raw["diagnostics"]

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)


def _pos_int(v, name):
    if isinstance(v, bool) or not isinstance(v, int) or v < 1:
        raise ValidationError(f"{name} must be a positive integer")


def _nonneg_int(v, name):
    if isinstance(v, bool) or not isinstance(v, int) or v < 0:
        raise ValidationError(f"{name} must be a non-negative integer")
