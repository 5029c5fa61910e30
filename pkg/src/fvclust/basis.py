"""Cubic radial basis with knot-inclusion indicators.

For covariate ``l`` the basis at time ``t`` is
``(1, t, |t - w_1|^3, ..., |t - w_M|^3)``.  An indicator vector of the same
length selects columns; its first entry (the constant) is always on.

Throughout the package a cluster's indicators are also handled as one flat
boolean *mask* over the concatenation of all covariates' basis columns
("full" columns, covariate-major).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import LongitudinalDataset, SubjectRecord
from .errors import ValidationError


@dataclass(frozen=True)
class BasisConfig:
    """Knot-candidate locations per covariate."""

    knots: tuple[np.ndarray, ...]

    def __post_init__(self):
        for l, w in enumerate(self.knots):
            if w.ndim != 1:
                raise ValidationError(f"knots for covariate {l} must be a vector")
            if w.size > 1 and not np.all(np.diff(w) > 0):
                raise ValidationError(f"knots for covariate {l} must be strictly increasing")

    @property
    def p(self) -> int:
        return len(self.knots)

    @property
    def M(self) -> tuple[int, ...]:
        return tuple(w.size for w in self.knots)

    @property
    def sizes(self) -> tuple[int, ...]:
        """Number of basis terms per covariate (``M_l + 2``)."""
        return tuple(w.size + 2 for w in self.knots)

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.sizes)]).astype(np.int64)

    @property
    def n_full(self) -> int:
        return int(sum(self.sizes))

    def column_owner(self) -> np.ndarray:
        """Covariate index of each full column."""
        return np.repeat(np.arange(self.p), self.sizes)

    def selectable(self) -> np.ndarray:
        """Full-column positions of the non-constant indicators, in scan order."""
        off = self.offsets
        return np.concatenate([np.arange(off[l] + 1, off[l + 1]) for l in range(self.p)]).astype(np.int64)

    def to_dict(self) -> dict:
        return {"knots": [w.tolist() for w in self.knots]}

    @classmethod
    def from_dict(cls, d) -> "BasisConfig":
        return cls(tuple(np.asarray(w, dtype=float) for w in d["knots"]))

    def validate_for(self, dataset: LongitudinalDataset) -> None:
        lo, hi = dataset.time_range
        n_distinct = np.unique(dataset.stacked["t"]).size
        if self.p != dataset.dims[0]:
            raise ValidationError(f"basis has {self.p} covariates, data has p={dataset.dims[0]}")
        for l, w in enumerate(self.knots):
            if w.size and (w[0] < lo or w[-1] > hi):
                raise ValidationError(f"knots for covariate {l} fall outside the time range")
            if w.size > n_distinct:
                raise ValidationError(f"covariate {l}: {w.size} knots exceed {n_distinct} distinct times")


def default_knots(dataset: LongitudinalDataset, M: int = 30, p: int | None = None) -> BasisConfig:
    """Knots at the pooled sample quantiles ``m / (M + 1)``, ``m = 1..M``.

    Quantiles use linear interpolation; tied quantiles are collapsed, so fewer
    than ``M`` knots may result when times are heavily repeated.
    """
    if M < 1:
        raise ValidationError("need at least one knot candidate")
    t = dataset.stacked["t"]
    if M > np.unique(t).size:
        raise ValidationError(f"M={M} exceeds the number of distinct time values")
    w = np.unique(np.quantile(t, np.arange(1, M + 1) / (M + 1)))
    return BasisConfig(tuple(w.copy() for _ in range(dataset.dims[0] if p is None else p)))


def basis_row(t: float, omega: np.ndarray) -> np.ndarray:
    return np.concatenate([[1.0, t], np.abs(t - np.asarray(omega, dtype=float)) ** 3])


def basis_matrix(t: np.ndarray, omega: np.ndarray) -> np.ndarray:
    """Basis evaluated at each entry of ``t``: shape ``(len(t), M + 2)``."""
    t = np.asarray(t, dtype=float)
    out = np.empty((t.shape[0], np.size(omega) + 2))
    out[:, 0] = 1.0
    out[:, 1] = t
    out[:, 2:] = np.abs(t[:, None] - np.asarray(omega, dtype=float)[None, :]) ** 3
    return out


def full_design(times: np.ndarray, W: np.ndarray, basis: BasisConfig) -> np.ndarray:
    """All basis columns for all covariates, each multiplied by its W column."""
    return np.hstack([W[:, [l]] * basis_matrix(times, w) for l, w in enumerate(basis.knots)])


def flat_mask(gamma: Sequence[np.ndarray], basis: BasisConfig) -> np.ndarray:
    if len(gamma) != basis.p or any(np.size(g) != s for g, s in zip(gamma, basis.sizes)):
        raise ValueError("indicator dimensions do not match the basis")
    mask = np.concatenate([np.asarray(g, dtype=bool) for g in gamma])
    if not mask[basis.offsets[:-1]].all():
        raise ValueError("the constant indicator of every covariate must be 1")
    return mask


def split_mask(mask: np.ndarray, basis: BasisConfig) -> list[np.ndarray]:
    off = basis.offsets
    return [np.asarray(mask[off[l]:off[l + 1]], dtype=bool) for l in range(basis.p)]


def build_design(subject: SubjectRecord, gamma: Sequence[np.ndarray], basis: BasisConfig) -> np.ndarray:
    """Per-subject design restricted to the selected basis columns."""
    mask = flat_mask(gamma, basis)
    return full_design(subject.times, subject.W, basis)[:, mask]


def gram(dataset: LongitudinalDataset, gamma: Sequence[np.ndarray], basis: BasisConfig) -> np.ndarray:
    """Pooled cross-product of selected design columns over all subjects."""
    mask = flat_mask(gamma, basis)
    st = dataset.stacked
    F = full_design(st["t"], st["W"], basis)[:, mask]
    return F.T @ F


def eval_alpha(gamma_l: np.ndarray, phi_l: np.ndarray, omega_l: np.ndarray, grid) -> np.ndarray:
    gamma_l = np.asarray(gamma_l, dtype=bool)
    phi_l = np.asarray(phi_l, dtype=float)
    if gamma_l.size != np.size(omega_l) + 2 or phi_l.size != gamma_l.sum():
        raise ValueError("indicator / coefficient lengths do not match")
    return basis_matrix(np.atleast_1d(grid), omega_l)[:, gamma_l] @ phi_l


def curve_matrix(grid: np.ndarray, basis: BasisConfig) -> list[np.ndarray]:
    """Per-covariate basis matrices on ``grid`` for evaluating many draws at once."""
    return [basis_matrix(grid, w) for w in basis.knots]
