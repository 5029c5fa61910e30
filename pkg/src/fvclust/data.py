"""Longitudinal binary datasets: representation, CSV ingestion, simulation."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import SchemaError, ValidationError
from .rand import SIMULATE, RngStream, cholesky

INTERCEPT = "1"


@dataclass(frozen=True)
class SubjectRecord:
    """One subject's observations, sorted by time.

    ``W``, ``X`` and ``Z`` are the dynamic (varying-effect), fixed-effect and
    random-effect design matrices; each has one row per observation.
    """

    subject_id: str
    times: np.ndarray
    y: np.ndarray
    W: np.ndarray
    X: np.ndarray
    Z: np.ndarray

    def __post_init__(self):
        n = self.times.shape[0]
        if n < 1:
            raise ValidationError(f"subject {self.subject_id!r} has no observations")
        for name in ("y", "W", "X", "Z"):
            if getattr(self, name).shape[0] != n:
                raise ValidationError(f"subject {self.subject_id!r}: {name} has wrong row count")
        if not np.all((self.y == 0) | (self.y == 1)):
            raise ValidationError(f"subject {self.subject_id!r}: responses must be 0 or 1")

    @property
    def n(self) -> int:
        return self.times.shape[0]


@dataclass(frozen=True)
class LongitudinalDataset:
    subjects: tuple[SubjectRecord, ...]
    time_range: tuple[float, float]
    dims: tuple[int, int, int]

    def __post_init__(self):
        if len(self.subjects) < 1:
            raise ValidationError("dataset has no subjects")
        p, q, r = self.dims
        lo, hi = self.time_range
        for s in self.subjects:
            if s.W.shape[1] != p or s.X.shape[1] != q or s.Z.shape[1] != r:
                raise ValidationError(f"subject {s.subject_id!r} has dims inconsistent with {self.dims}")
            if s.times.min() < lo or s.times.max() > hi:
                raise ValidationError(f"subject {s.subject_id!r} has times outside {self.time_range}")

    @classmethod
    def from_subjects(cls, subjects: Sequence[SubjectRecord], time_range=None) -> "LongitudinalDataset":
        subjects = tuple(subjects)
        if not subjects:
            raise ValidationError("dataset has no subjects")
        s0 = subjects[0]
        dims = (s0.W.shape[1], s0.X.shape[1], s0.Z.shape[1])
        if time_range is None:
            t = np.concatenate([s.times for s in subjects])
            time_range = (float(t.min()), float(t.max()))
        return cls(subjects, (float(time_range[0]), float(time_range[1])), dims)

    @property
    def N(self) -> int:
        return len(self.subjects)

    @cached_property
    def offsets(self) -> np.ndarray:
        """Row offsets of each subject in the stacked arrays (length N + 1)."""
        return np.concatenate([[0], np.cumsum([s.n for s in self.subjects])]).astype(np.int64)

    @cached_property
    def stacked(self) -> dict[str, np.ndarray]:
        """All observations stacked subject-major: t, y, W, X, Z, subject index."""
        subj = np.repeat(np.arange(self.N), [s.n for s in self.subjects])
        return {
            "t": np.concatenate([s.times for s in self.subjects]),
            "y": np.concatenate([s.y for s in self.subjects]).astype(np.int8),
            "W": np.concatenate([s.W for s in self.subjects]),
            "X": np.concatenate([s.X for s in self.subjects]),
            "Z": np.concatenate([s.Z for s in self.subjects]),
            "subject": subj,
        }


@dataclass(frozen=True)
class ColumnSchema:
    """Column-role mapping for CSV files.

    ``W``, ``X`` and ``Z`` list covariate columns; the token ``"1"`` stands for
    a constant intercept column that need not exist in the file.
    """

    subject: str
    time: str
    response: str
    W: tuple[str, ...] = ()
    X: tuple[str, ...] = ()
    Z: tuple[str, ...] = ()

    @classmethod
    def from_dict(cls, d: Mapping) -> "ColumnSchema":
        try:
            return cls(d["subject"], d["time"], d["response"],
                       tuple(d.get("W", ())), tuple(d.get("X", ())), tuple(d.get("Z", ())))
        except KeyError as exc:
            raise SchemaError(f"schema is missing role {exc.args[0]!r}") from exc

    @classmethod
    def load(cls, path) -> "ColumnSchema":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {"subject": self.subject, "time": self.time, "response": self.response,
                "W": list(self.W), "X": list(self.X), "Z": list(self.Z)}

    def data_columns(self) -> list[str]:
        cols = [self.subject, self.time, self.response]
        for c in (*self.W, *self.X, *self.Z):
            if c != INTERCEPT and c not in cols:
                cols.append(c)
        return cols


def _role_matrix(cols, rows, names):
    n = len(rows)
    out = np.empty((n, len(names)))
    for j, name in enumerate(names):
        out[:, j] = 1.0 if name == INTERCEPT else [float(row[name]) for row in rows]
    return out


def load_csv(path, schema: ColumnSchema | Mapping, time_range=None) -> LongitudinalDataset:
    """Read a long-format CSV (one observation per row) into a dataset.

    Rows are grouped by subject in order of first appearance and sorted by time
    within subject (stable, so tied times keep file order).
    """
    if not isinstance(schema, ColumnSchema):
        schema = ColumnSchema.from_dict(schema)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in schema.data_columns() if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}")
        groups: dict[str, list[dict]] = {}
        for row in reader:
            groups.setdefault(row[schema.subject], []).append(row)
    if not groups:
        raise ValidationError(f"{path}: no observations")
    subjects = []
    for sid, rows in groups.items():
        try:
            t = np.array([float(r[schema.time]) for r in rows])
            yv = np.array([float(r[schema.response]) for r in rows])
        except ValueError as exc:
            raise ValidationError(f"{path}: non-numeric value for subject {sid!r}") from exc
        if not np.all((yv == 0) | (yv == 1)):
            raise ValidationError(f"{path}: subject {sid!r} has a non-binary response")
        order = np.argsort(t, kind="stable")
        rows = [rows[i] for i in order]
        subjects.append(SubjectRecord(
            sid, t[order], yv[order].astype(np.int8),
            _role_matrix(schema.W, rows, schema.W),
            _role_matrix(schema.X, rows, schema.X),
            _role_matrix(schema.Z, rows, schema.Z)))
    return LongitudinalDataset.from_subjects(subjects, time_range)


def write_csv(dataset: LongitudinalDataset, path, schema: ColumnSchema | Mapping) -> None:
    """Write ``dataset`` in the long format understood by :func:`load_csv`.

    Floats are written with ``repr`` so values survive a round trip exactly.
    """
    if not isinstance(schema, ColumnSchema):
        schema = ColumnSchema.from_dict(schema)
    p, q, r = dataset.dims
    if (len(schema.W), len(schema.X), len(schema.Z)) != (p, q, r):
        raise SchemaError("schema role counts do not match dataset dims")
    cols = schema.data_columns()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for s in dataset.subjects:
            for j in range(s.n):
                row = {schema.subject: s.subject_id, schema.time: repr(float(s.times[j])),
                       schema.response: str(int(s.y[j]))}
                for names, mat in ((schema.W, s.W), (schema.X, s.X), (schema.Z, s.Z)):
                    for c, name in enumerate(names):
                        if name != INTERCEPT:
                            row[name] = repr(float(mat[j, c]))
                w.writerow([row[c] for c in cols])


# --------------------------------------------------------------------------
# simulation

def _a11(t):
    return 2 * np.exp(-200 * (t - 0.2) ** 2) + np.exp(-10 * (t - 0.6) ** 2)


def _a12(t):
    return np.sin(2 * np.pi * t ** 3)


def _a21(t):
    return np.sin(8 * (t - 0.5)) + 1.5 * np.exp(-400 * (t - 0.5) ** 2)


def _a22(t):
    return 2 * np.asarray(t, dtype=float)


def _a31(t):
    return -2 * np.asarray(t, dtype=float)


def _a32(t):
    return np.zeros_like(np.asarray(t, dtype=float))


_CATALOG = {"a11": _a11, "a12": _a12, "a21": _a21, "a22": _a22, "a31": _a31, "a32": _a32}


def true_alpha_catalog() -> dict[str, Callable[[np.ndarray], np.ndarray]]:
    """The six benchmark coefficient functions, keyed ``"a<cluster><covariate>"``."""
    return dict(_CATALOG)


def alpha_function(spec) -> Callable[[np.ndarray], np.ndarray]:
    """Resolve a function spec: a catalog name, ``{"poly": [c0, c1, ...]}`` or
    ``{"sine": {"amp", "freq", "phase", "power"}}`` (``amp*sin(freq*t**power + phase)``)."""
    if isinstance(spec, str):
        try:
            return _CATALOG[spec]
        except KeyError:
            raise ValidationError(f"unknown catalog function {spec!r}") from None
    if isinstance(spec, Mapping) and "poly" in spec:
        coef = np.asarray(spec["poly"], dtype=float)
        return lambda t: np.polynomial.polynomial.polyval(np.asarray(t, dtype=float), coef)
    if isinstance(spec, Mapping) and "sine" in spec:
        s = spec["sine"]
        amp, freq = float(s.get("amp", 1.0)), float(s.get("freq", 2 * math.pi))
        phase, power = float(s.get("phase", 0.0)), float(s.get("power", 1.0))
        return lambda t: amp * np.sin(freq * np.asarray(t, dtype=float) ** power + phase)
    raise ValidationError(f"cannot interpret function spec {spec!r}")


@dataclass(frozen=True)
class SimulationSpec:
    """Design of a synthetic dataset.

    ``alpha[k][l]`` describes the coefficient function of covariate ``l``
    in true cluster ``k``.  Subjects are generated cluster by cluster.
    """

    cluster_sizes: tuple[int, ...] = (400, 400, 400)
    alpha: tuple[tuple, ...] = (("a11", "a12"), ("a21", "a22"), ("a31", "a32"))
    beta: tuple[float, ...] = (1.0, -1.0)
    psi: tuple[tuple[float, ...], ...] = ((0.5, 0.25), (0.25, 0.8))
    mean_extra_obs: float = 10.0
    time_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if len(self.cluster_sizes) < 1 or any(int(n) < 1 for n in self.cluster_sizes):
            raise ValidationError("simulation needs at least one cluster with at least one subject")
        if len(self.alpha) != len(self.cluster_sizes):
            raise ValidationError("alpha must list one function row per cluster")
        if len({len(row) for row in self.alpha}) != 1 or len(self.alpha[0]) < 1:
            raise ValidationError("every cluster needs the same number (>= 1) of coefficient functions")
        psi = np.asarray(self.psi, dtype=float).reshape(len(self.psi), -1) if len(self.psi) else np.zeros((0, 0))
        if psi.shape[0] != psi.shape[1] or not np.allclose(psi, psi.T):
            raise ValidationError("psi must be a symmetric square matrix")
        if psi.shape[0]:
            try:
                np.linalg.cholesky(psi)
            except np.linalg.LinAlgError:
                raise ValidationError("psi must be positive definite") from None

    @property
    def dims(self) -> tuple[int, int, int]:
        return len(self.alpha[0]), len(self.beta), len(self.psi)

    @classmethod
    def from_dict(cls, d: Mapping) -> "SimulationSpec":
        kw = {}
        if "cluster_sizes" in d:
            kw["cluster_sizes"] = tuple(int(n) for n in d["cluster_sizes"])
        if "alpha" in d:
            kw["alpha"] = tuple(tuple(row) for row in d["alpha"])
        if "beta" in d:
            kw["beta"] = tuple(float(v) for v in d["beta"])
        if "psi" in d:
            kw["psi"] = tuple(tuple(float(v) for v in row) for row in d["psi"])
        for key in ("mean_extra_obs",):
            if key in d:
                kw[key] = float(d[key])
        if "time_range" in d:
            kw["time_range"] = tuple(float(v) for v in d["time_range"])
        return cls(**kw)

    def to_dict(self) -> dict:
        return {"cluster_sizes": list(self.cluster_sizes),
                "alpha": [list(row) for row in self.alpha],
                "beta": list(self.beta), "psi": [list(r) for r in self.psi],
                "mean_extra_obs": self.mean_extra_obs, "time_range": list(self.time_range)}


@dataclass
class SimulationTruth:
    cluster_of: np.ndarray  # 0-based true cluster per subject
    alpha_specs: tuple
    beta_true: np.ndarray
    psi_true: np.ndarray
    b_true: np.ndarray
    L_true: np.ndarray  # stacked, subject-major
    alpha_true: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if not self.alpha_true:
            self.alpha_true = [[alpha_function(f) for f in row] for row in self.alpha_specs]

    def alpha(self, k: int, l: int, t) -> np.ndarray:
        return self.alpha_true[k][l](np.asarray(t, dtype=float))

    def to_dict(self) -> dict:
        return {"cluster_of": [int(c) + 1 for c in self.cluster_of],
                "alpha": [list(row) for row in self.alpha_specs],
                "beta": self.beta_true.tolist(), "psi": self.psi_true.tolist(),
                "b": self.b_true.tolist(), "L": self.L_true.tolist()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "SimulationTruth":
        return cls(np.asarray(d["cluster_of"], dtype=np.int64) - 1,
                   tuple(tuple(row) for row in d["alpha"]),
                   np.asarray(d["beta"], dtype=float), np.asarray(d["psi"], dtype=float),
                   np.asarray(d["b"], dtype=float), np.asarray(d["L"], dtype=float))


def simulate_dataset(spec: SimulationSpec, seed: int) -> tuple[LongitudinalDataset, SimulationTruth]:
    """Generate a probit varying-coefficient mixed-model dataset.

    ``n_i ~ Poisson(mean_extra_obs) + 1``, times uniform on ``time_range``
    (stored sorted), covariates standard normal except constant first columns
    of W and Z, ``b_i ~ N(0, psi)``, ``L = W alpha(t) + X beta + Z b + eps``.
    """
    rng = RngStream(seed).child(SIMULATE).generator()
    p, q, r = spec.dims
    psi = np.asarray(spec.psi, dtype=float).reshape(r, r)
    beta = np.asarray(spec.beta, dtype=float)
    fns = [[alpha_function(f) for f in row] for row in spec.alpha]
    cluster_of = np.repeat(np.arange(len(spec.cluster_sizes)), spec.cluster_sizes)
    N = cluster_of.shape[0]
    lo, hi = spec.time_range
    n = rng.poisson(spec.mean_extra_obs, size=N) + 1
    b = rng.standard_normal((N, r)) @ cholesky(psi, "psi").T if r else np.zeros((N, 0))
    subjects, latent = [], []
    for i in range(N):
        t = np.sort(rng.uniform(lo, hi, size=n[i]))
        W = rng.standard_normal((n[i], p))
        W[:, 0] = 1.0
        X = rng.standard_normal((n[i], q))
        Z = rng.standard_normal((n[i], r))
        if r:
            Z[:, 0] = 1.0
        k = cluster_of[i]
        mu = sum(W[:, l] * fns[k][l](t) for l in range(p)) + X @ beta + Z @ b[i]
        L = mu + rng.standard_normal(n[i])
        latent.append(L)
        subjects.append(SubjectRecord(str(i + 1), t, (L > 0).astype(np.int8), W, X, Z))
    data = LongitudinalDataset.from_subjects(subjects, (lo, hi))
    truth = SimulationTruth(cluster_of, spec.alpha, beta, psi, b, np.concatenate(latent))
    return data, truth


def default_schema(dims: tuple[int, int, int]) -> ColumnSchema:
    """Column schema used for simulated data: intercepts in W and Z."""
    p, q, r = dims
    W = (INTERCEPT,) + tuple(f"w{l + 1}" for l in range(1, p))
    Z = ((INTERCEPT,) + tuple(f"z{l + 1}" for l in range(1, r))) if r else ()
    X = tuple(f"x{l + 1}" for l in range(q))
    return ColumnSchema("subject", "time", "y", W, X, Z)
