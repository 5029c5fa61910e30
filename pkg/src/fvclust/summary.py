"""Posterior summaries: curve bands, memberships, clustering metrics, quantile tables, coverage.

Quantiles use linear interpolation between order statistics (``numpy``'s
default, Hyndman-Fan type 7).  Cluster labels are 0-based in memory and
1-based in every file written here.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .basis import BasisConfig, curve_matrix
from .diagnostics import PosteriorSamples
from .errors import ValidationError

DEFAULT_PROBS = (0.025, 0.5, 0.975)
MINOR_SHARE = 0.01


def default_grid(time_range, n: int = 100) -> np.ndarray:
    return np.linspace(float(time_range[0]), float(time_range[1]), int(n))


# ---------------------------------------------------------------------------
# curves


@dataclass
class CurveSummary:
    """Point-wise median and 95% band of every covariate's coefficient function per cluster.

    ``median``, ``lower`` and ``upper`` map a cluster label to a (p, len(grid))
    array.  Clusters never occupied in the retained draws are listed in
    ``omitted``; ``share`` is each cluster's mean fraction of subjects.
    """

    grid: np.ndarray
    median: dict[int, np.ndarray]
    lower: dict[int, np.ndarray]
    upper: dict[int, np.ndarray]
    share: np.ndarray
    n_draws: dict[int, int]
    omitted: list[int] = field(default_factory=list)
    probs: tuple[float, float, float] = DEFAULT_PROBS

    @property
    def clusters(self) -> list[int]:
        return sorted(self.median)

    def minor(self, min_share: float = MINOR_SHARE) -> list[int]:
        return [k for k in self.clusters if self.share[k] < min_share]

    def major(self, min_share: float = MINOR_SHARE) -> list[int]:
        return [k for k in self.clusters if self.share[k] >= min_share]

    def rows(self):
        for k in self.clusters:
            for l in range(self.median[k].shape[0]):
                for g, t in enumerate(self.grid):
                    yield {"cluster": k + 1, "covariate": l + 1, "t": float(t),
                           "median": float(self.median[k][l, g]), "lower": float(self.lower[k][l, g]),
                           "upper": float(self.upper[k][l, g]), "share": float(self.share[k]),
                           "minor": bool(self.share[k] < MINOR_SHARE)}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["cluster", "covariate", "t", "median", "lower", "upper",
                                               "share", "minor"])
            w.writeheader()
            w.writerows(self.rows())


def curve_draws(phi: np.ndarray, basis: BasisConfig, grid: np.ndarray) -> np.ndarray:
    """Coefficient-function values (draws, p, len(grid)) from full-width coefficient vectors (draws, P)."""
    B = curve_matrix(np.asarray(grid, dtype=float), basis)
    off = basis.offsets
    out = np.empty((phi.shape[0], basis.p, len(grid)))
    for l in range(basis.p):
        out[:, l, :] = phi[:, off[l]:off[l + 1]] @ B[l].T
    return out


def summarize_curves(samples: PosteriorSamples, basis: BasisConfig, grid: np.ndarray | None = None,
                     time_range=None, probs: Sequence[float] = DEFAULT_PROBS) -> CurveSummary:
    """Point-wise percentiles of each cluster's coefficient functions.

    For cluster k only the draws in which k has at least one member enter its
    summary; draws where it is empty carry prior draws, not posterior
    information about a group of subjects.
    """
    if grid is None:
        if time_range is None:
            raise ValidationError("either a grid or a time range is required")
        grid = default_grid(time_range)
    grid = np.asarray(grid, dtype=float)
    probs = tuple(float(p) for p in probs)
    if len(probs) != 3 or not 0 <= probs[0] <= probs[1] <= probs[2] <= 1:
        raise ValidationError("probs must be increasing (lower, centre, upper) in [0, 1]")
    C = samples["C"]
    K = samples.K
    counts = np.stack([np.bincount(c, minlength=K) for c in C]) if len(C) else np.zeros((0, K))
    share = counts.mean(axis=0) / C.shape[1] if len(C) else np.zeros(K)
    med, lo, hi, nd, omitted = {}, {}, {}, {}, []
    for k in range(K):
        occ = counts[:, k] > 0
        if not occ.any():
            omitted.append(k)
            continue
        vals = curve_draws(samples["phi"][occ, k, :], basis, grid)
        q = np.quantile(vals, probs, axis=0)
        lo[k], med[k], hi[k] = q[0], q[1], q[2]
        nd[k] = int(occ.sum())
    return CurveSummary(grid, med, lo, hi, share, nd, omitted, probs)


# ---------------------------------------------------------------------------
# memberships and clustering metrics


def modal_membership(samples) -> np.ndarray:
    """Most frequent label of each subject across draws; ties go to the lowest label."""
    C = samples["C"] if not isinstance(samples, np.ndarray) else samples
    C = np.asarray(C, dtype=np.int64)
    if C.ndim != 2 or C.shape[0] == 0:
        raise ValidationError("membership draws must be a non-empty (draws, subjects) array")
    K = int(getattr(samples, "K", C.max() + 1))
    N = C.shape[1]
    counts = np.zeros((N, K), dtype=np.int64)
    np.add.at(counts, (np.tile(np.arange(N), C.shape[0]), C.ravel()), 1)
    return counts.argmax(axis=1)


@dataclass
class ClusteringReport:
    """Modal memberships with optional truth-matched metrics.

    ``confusion[j, e]`` counts subjects of true cluster j assigned to estimated
    cluster e; ``matching[j]`` is the estimated cluster matched to true
    cluster j (-1 when unmatched).
    """

    membership: np.ndarray
    proportions: np.ndarray
    confusion: np.ndarray | None = None
    matching: np.ndarray | None = None
    accuracy: float | None = None
    precision: np.ndarray | None = None
    recall: np.ndarray | None = None
    f1: np.ndarray | None = None

    def to_dict(self) -> dict:
        d = {"membership": (self.membership + 1).tolist(), "proportions": self.proportions.tolist()}
        if self.confusion is not None:
            d.update({"confusion": self.confusion.tolist(),
                      "matching": [int(m) + 1 if m >= 0 else None for m in self.matching],
                      "accuracy": self.accuracy, "precision": self.precision.tolist(),
                      "recall": self.recall.tolist(), "f1": self.f1.tolist()})
        return d


def clustering_metrics(membership: np.ndarray, truth: np.ndarray | None = None, K: int | None = None) -> ClusteringReport:
    """Accuracy and per-true-cluster precision/recall/F1 after optimal label matching.

    Estimated clusters are matched one-to-one to true clusters by maximizing
    the matched counts of the confusion matrix (Hungarian method); accuracy is
    the matched fraction of subjects.
    """
    membership = np.asarray(membership, dtype=np.int64)
    K = int(K if K is not None else membership.max() + 1)
    props = np.bincount(membership, minlength=K) / membership.size
    if truth is None:
        return ClusteringReport(membership, props)
    truth = np.asarray(truth, dtype=np.int64)
    if truth.shape != membership.shape:
        raise ValidationError("truth and membership lengths differ")
    T = int(truth.max()) + 1
    conf = np.zeros((T, K), dtype=np.int64)
    np.add.at(conf, (truth, membership), 1)
    rows, cols = linear_sum_assignment(-conf)
    match = np.full(T, -1, dtype=np.int64)
    match[rows] = cols
    hit = np.array([conf[j, match[j]] if match[j] >= 0 else 0 for j in range(T)], dtype=float)
    size_true = conf.sum(axis=1).astype(float)
    size_est = np.array([conf[:, match[j]].sum() if match[j] >= 0 else 0 for j in range(T)], dtype=float)
    with np.errstate(invalid="ignore", divide="ignore"):
        prec = np.where(size_est > 0, hit / size_est, 0.0)
        rec = np.where(size_true > 0, hit / size_true, 0.0)
        f1 = np.where(prec + rec > 0, 2 * prec * rec / (prec + rec), 0.0)
    return ClusteringReport(membership, props, conf, match, float(hit.sum() / membership.size), prec, rec, f1)


# ---------------------------------------------------------------------------
# fixed-dimensional parameters


def fixed_param_table(samples, probs: Sequence[float] = DEFAULT_PROBS) -> list[dict]:
    """Empirical quantiles of each beta entry and each upper-triangle Psi entry."""
    rows = []
    beta = np.asarray(samples["beta"], dtype=float)
    Psi = np.asarray(samples["Psi"], dtype=float)
    probs = [float(p) for p in probs]
    for j in range(beta.shape[1]):
        rows.append(_qrow(f"beta[{j + 1}]", beta[:, j], probs))
    for a in range(Psi.shape[1]):
        for b in range(a, Psi.shape[2]):
            rows.append(_qrow(f"Psi[{a + 1},{b + 1}]", Psi[:, a, b], probs))
    return rows


def _qrow(name: str, x: np.ndarray, probs) -> dict:
    q = np.quantile(x, probs)
    return {"parameter": name, "mean": float(x.mean()),
            "quantiles": {f"{p:g}": float(v) for p, v in zip(probs, q)}}


# ---------------------------------------------------------------------------
# coverage


def band_coverage(curves: CurveSummary, report: ClusteringReport, true_alpha) -> np.ndarray:
    """Whether each true function lies inside its matched cluster's band, (T, p, grid).

    ``true_alpha(j, l, grid)`` evaluates the truth.  True clusters with no
    matched estimated cluster, or matched to an omitted one, count as not
    covered.
    """
    if report.matching is None:
        raise ValidationError("coverage needs a truth-matched clustering report")
    T = len(report.matching)
    p = next(iter(curves.median.values())).shape[0] if curves.median else 0
    out = np.zeros((T, p, len(curves.grid)), dtype=bool)
    for j in range(T):
        e = int(report.matching[j])
        if e < 0 or e not in curves.median:
            continue
        for l in range(p):
            truth = np.asarray(true_alpha(j, l, curves.grid), dtype=float)
            out[j, l] = (curves.lower[e][l] <= truth) & (truth <= curves.upper[e][l])
    return out


def coverage_study(replicates: Sequence[np.ndarray]) -> np.ndarray:
    """Point-wise coverage: fraction of replicates whose band contains the truth.

    Each replicate contributes a boolean array of identical shape (for
    example the output of :func:`band_coverage`).
    """
    if len(replicates) < 1:
        raise ValidationError("coverage needs at least one replicate")
    arr = np.stack([np.asarray(r, dtype=bool) for r in replicates])
    return arr.mean(axis=0)


# ---------------------------------------------------------------------------
# output


def write_summary(out_dir, curves: CurveSummary | None = None, report: ClusteringReport | None = None,
                  table: list[dict] | None = None, extra: dict | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if curves is not None:
        curves.write_csv(out / "curves.csv")
    doc = dict(extra or {})
    if curves is not None:
        doc["clusters"] = {"share": curves.share.tolist(), "omitted": [k + 1 for k in curves.omitted],
                           "minor": [k + 1 for k in curves.minor()], "draws": {str(k + 1): n for k, n in curves.n_draws.items()}}
    if report is not None:
        doc["clustering"] = report.to_dict()
        with open(out / "membership.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["subject_index", "cluster"])
            for i, c in enumerate(report.membership):
                w.writerow([i + 1, int(c) + 1])
    if table is not None:
        doc["fixed_parameters"] = table
    (out / "summary.json").write_text(json.dumps(doc, indent=2))
