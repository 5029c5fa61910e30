"""Multi-chain convergence checks, label-switching correction and burn-in/thinning.

The typical workflow is::

    chains = ChainCollection.load(paths)
    relabeled = relabel_ecr(chains, burn_fraction=0.5)
    samples = burn_thin(relabeled, burn_fraction=0.5, thin=5)
    report = diagnose(relabeled, basis, time_range)
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .basis import BasisConfig, curve_matrix
from .errors import ValidationError
from .state import stick_weights
from .store import DrawStore

#: manifest keys allowed to differ between chains of one collection
PER_CHAIN_KEYS = ("seed", "chain")


# ---------------------------------------------------------------------------
# chain collections


@dataclass
class ChainCollection:
    """Draw stores of several chains of the same run (same data, priors and basis)."""

    stores: list[DrawStore]

    def __post_init__(self):
        if not self.stores:
            raise ValidationError("a chain collection needs at least one chain")
        lengths = {len(s) for s in self.stores}
        if len(lengths) != 1:
            raise ValidationError(f"chains have unequal sweep counts: {sorted(lengths)}")
        dims = {json.dumps(s.dims, sort_keys=True) for s in self.stores}
        if len(dims) != 1:
            raise ValidationError("chains have different dimensions")
        ref = _shared_manifest(self.stores[0].manifest)
        for s in self.stores[1:]:
            if _shared_manifest(s.manifest) != ref:
                raise ValidationError("chain manifests differ beyond seed/chain id")

    @classmethod
    def load(cls, paths: Sequence) -> "ChainCollection":
        return cls([DrawStore.load(p) for p in paths])

    def __len__(self) -> int:
        return len(self.stores)

    @property
    def K(self) -> int:
        return int(self.stores[0].dims["K"])

    @property
    def manifest(self) -> dict:
        return self.stores[0].manifest

    @property
    def n_sweeps(self) -> int:
        """Recorded sweeps per chain, not counting the initial state."""
        return len(self.stores[0]) - 1


def _shared_manifest(man: dict) -> str:
    return json.dumps({k: v for k, v in man.items() if k not in PER_CHAIN_KEYS}, sort_keys=True)


def _as_collection(chains) -> ChainCollection:
    if isinstance(chains, ChainCollection):
        return chains
    return ChainCollection(list(chains))


# ---------------------------------------------------------------------------
# Gelman-Rubin


@dataclass(frozen=True)
class RhatResult:
    """Square-root potential scale reduction; ``degenerate`` flags zero within-chain variance."""

    value: float
    degenerate: bool = False

    def __float__(self) -> float:
        return self.value


def rhat(traces) -> RhatResult:
    """Classic R^{1/2} of equal-length traces, shape (chains, draws).

    ``sqrt(Vhat / W)`` with ``Vhat = (n-1)/n W + B/n``; values below 1 (which
    happen when the between-chain spread is smaller than expected) are reported
    as 1.
    """
    x = np.asarray(traces, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValidationError("R-hat needs at least two chains")
    m, n = x.shape
    if n < 2:
        raise ValidationError("R-hat needs at least two draws per chain")
    means = x.mean(axis=1)
    W = float(x.var(axis=1, ddof=1).mean())
    if not W > 0 or not np.isfinite(W):
        return RhatResult(1.0, True)
    B = n * float(means.var(ddof=1))
    vhat = (n - 1) / n * W + B / n
    return RhatResult(max(1.0, float(np.sqrt(vhat / W))), False)


def gelman_rubin(chains, selector: Callable[[np.ndarray], np.ndarray] | None = None) -> RhatResult:
    """R^{1/2} from the second half of each chain.

    ``chains`` is either an array (chains, draws) of scalar traces, or a chain
    collection / list of relabeled chains paired with ``selector``, which maps
    one chain's record array to its scalar trace.  The initial-state record is
    excluded before halving.
    """
    if selector is None:
        traces = np.asarray(chains, dtype=float)
    else:
        recs = [_records(c)[1:] for c in (chains.stores if isinstance(chains, ChainCollection) else chains)]
        traces = np.stack([np.asarray(selector(r), dtype=float) for r in recs])
    n = traces.shape[1]
    return rhat(traces[:, n - n // 2:] if n >= 4 else traces)


def _records(chain) -> np.ndarray:
    return chain.records if hasattr(chain, "records") else chain


# ---------------------------------------------------------------------------
# relabeling


def relabel_dtype(store_dtype: np.dtype) -> np.dtype:
    """Record dtype after relabeling: stick variables are replaced by weights ``w``."""
    fields = []
    for name in store_dtype.names:
        sub = store_dtype.fields[name][0]
        if name == "V":
            fields.append(("w", sub.base, sub.shape))
        else:
            fields.append((name, sub.base, sub.shape))
    return np.dtype(fields)


def best_permutation(C: np.ndarray, pivot: np.ndarray, K: int) -> np.ndarray:
    """Permutation ``sigma`` (old label -> new label) maximizing agreement with the pivot.

    Solved exactly as an assignment problem; among equally good permutations
    the one keeping the most labels fixed wins.
    """
    agree = np.bincount(np.asarray(C) * K + np.asarray(pivot), minlength=K * K).reshape(K, K)
    cost = -(agree.astype(np.int64) * (K + 1) + np.eye(K, dtype=np.int64))
    rows, cols = linear_sum_assignment(cost)
    sigma = np.empty(K, dtype=np.int64)
    sigma[rows] = cols
    return sigma


def apply_permutation(rec: np.ndarray, sigma: np.ndarray, out: np.ndarray) -> None:
    """Write the relabeled version of one store record into ``out`` (relabeled dtype)."""
    for name in rec.dtype.names:
        if name not in ("mask", "phi", "tau", "V", "C"):
            out[name] = rec[name]
    for name in ("mask", "phi", "tau"):
        out[name][sigma] = rec[name]
    w = stick_weights(rec["V"]) if "V" in rec.dtype.names else rec["w"]
    out["w"][sigma] = w
    out["C"] = sigma[rec["C"]]


@dataclass
class RelabeledChains:
    """Relabeled records per chain plus the permutations that produced them."""

    records: list[np.ndarray]
    permutations: list[np.ndarray]  # (n_records, K) old -> new label
    pivot: tuple[int, int]  # (chain, record index)
    manifest: dict = field(default_factory=dict)
    dims: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def K(self) -> int:
        return int(self.dims["K"])


def select_pivot(chains: ChainCollection, burn_fraction: float = 0.0) -> tuple[int, int]:
    """(chain, record) with the highest complete-data log posterior among post-burn-in sweeps."""
    n = chains.n_sweeps
    start = 1 + int(np.floor(burn_fraction * n)) if n else 0
    best, where = -np.inf, (0, 0)
    for c, store in enumerate(chains.stores):
        lp = store.records["logpost"][start:]
        if lp.size == 0:
            continue
        j = int(np.argmax(lp))
        if lp[j] > best:
            best, where = float(lp[j]), (c, start + j)
    return where


def relabel_ecr(chains, pivot: np.ndarray | None = None, burn_fraction: float = 0.0,
                canonical: bool = True) -> RelabeledChains:
    """Align cluster labels of every recorded sweep to a pivot allocation.

    By default the pivot is the allocation of the sweep with the highest
    complete-data log posterior across all chains (after ``burn_fraction``).
    Cluster-indexed blocks (indicators, coefficients, scales, weights and
    allocations) are permuted; everything else is copied unchanged.

    With ``canonical=True`` the aligned labels are finally renumbered by
    decreasing mean occupancy over the post-burn-in sweeps (stable for ties),
    so the output does not depend on how the input chains happened to name
    their clusters.
    """
    chains = _as_collection(chains)
    K = chains.K
    if pivot is None:
        where = select_pivot(chains, burn_fraction)
        pivot_alloc = chains.stores[where[0]].records["C"][where[1]]
    else:
        where = (-1, -1)
        pivot_alloc = np.asarray(pivot)
    pivot_alloc = np.asarray(pivot_alloc, dtype=np.int64)
    if pivot_alloc.shape != chains.stores[0].records["C"].shape[1:]:
        raise ValidationError("pivot allocation has the wrong length")
    if pivot_alloc.size and (pivot_alloc.min() < 0 or pivot_alloc.max() >= K):
        raise ValidationError("pivot labels out of range")
    out_recs, perms = [], []
    for store in chains.stores:
        recs = store.records
        out = np.zeros(len(recs), dtype=relabel_dtype(recs.dtype))
        sig = np.empty((len(recs), K), dtype=np.int64)
        for s in range(len(recs)):
            sig[s] = best_permutation(recs["C"][s], pivot_alloc, K)
            apply_permutation(recs[s], sig[s], out[s])
        out_recs.append(out)
        perms.append(sig)
    if canonical:
        rank = _occupancy_rank(out_recs, K, burn_fraction)
        for out, sig in zip(out_recs, perms):
            _renumber(out, rank)
            sig[:] = rank[sig]
    return RelabeledChains(out_recs, perms, where, dict(chains.manifest), dict(chains.stores[0].dims))


def _occupancy_rank(records: Sequence[np.ndarray], K: int, burn_fraction: float) -> np.ndarray:
    """rank[old] = new label, ordering clusters by decreasing post-burn-in occupancy."""
    share = np.zeros(K)
    for recs in records:
        idx = retained_index(len(recs) - 1, burn_fraction, 1)
        if idx.size:
            share += np.bincount(recs["C"][idx].ravel(), minlength=K)
    order = np.argsort(-share, kind="stable")
    rank = np.empty(K, dtype=np.int64)
    rank[order] = np.arange(K)
    return rank


def _renumber(recs: np.ndarray, rank: np.ndarray) -> None:
    for name in ("mask", "phi", "tau", "w"):
        vals = recs[name].copy()
        recs[name][:, rank] = vals
    recs["C"] = rank[recs["C"]]


def relabel_records(records: Sequence[np.ndarray], pivot: np.ndarray, K: int) -> list[np.ndarray]:
    """Relabel already-relabeled record arrays again (idempotence checks)."""
    res = []
    for recs in records:
        out = np.zeros_like(recs)
        for s in range(len(recs)):
            apply_permutation(recs[s], best_permutation(recs["C"][s], pivot, K), out[s])
        res.append(out)
    return res


# ---------------------------------------------------------------------------
# burn-in and thinning


@dataclass
class PosteriorSamples:
    """Retained draws pooled across chains, with (chain, sweep) provenance per draw."""

    draws: np.ndarray
    chain: np.ndarray
    sweep: np.ndarray
    K: int
    manifest: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.draws)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.draws[name]


def retained_index(n_sweeps: int, burn_fraction: float, thin: int) -> np.ndarray:
    """Record indices kept from one chain: sweeps 1..n, first floor(burn * n) dropped, every thin-th kept."""
    first = 1 + int(np.floor(burn_fraction * n_sweeps))
    return np.arange(first, n_sweeps + 1)[thin - 1::thin]


def burn_thin(chains, burn_fraction: float = 0.5, thin: int = 5) -> PosteriorSamples:
    """Drop the burn-in, thin, and pool the chains (relabeled chains or raw stores)."""
    if not 0 <= burn_fraction < 1:
        raise ValidationError("burn_fraction must lie in [0, 1)")
    if int(thin) != thin or thin < 1:
        raise ValidationError("thin must be a positive integer")
    thin = int(thin)
    if isinstance(chains, RelabeledChains):
        recs, K, man = chains.records, chains.K, chains.manifest
    else:
        coll = _as_collection(chains)
        recs, K, man = [s.records for s in coll.stores], coll.K, coll.manifest
    parts, ch, sw = [], [], []
    for c, r in enumerate(recs):
        idx = retained_index(len(r) - 1, burn_fraction, thin)
        parts.append(r[idx])
        ch.append(np.full(idx.size, c, dtype=np.int64))
        sw.append(r["sweep"][idx].astype(np.int64))
    draws = np.concatenate(parts) if parts else np.zeros(0)
    if len(draws) == 0:
        raise ValidationError("no draws retained after burn-in and thinning")
    return PosteriorSamples(draws, np.concatenate(ch), np.concatenate(sw), K, dict(man))


# ---------------------------------------------------------------------------
# monitored quantities


@dataclass(frozen=True)
class Selector:
    """A named scalar trace extractor."""

    name: str
    fn: Callable[[np.ndarray], np.ndarray]

    def __call__(self, recs: np.ndarray) -> np.ndarray:
        return self.fn(recs)


def monitor_grid(time_range: tuple[float, float], n_points: int = 5) -> np.ndarray:
    return np.linspace(time_range[0], time_range[1], n_points)


def curve_values(recs: np.ndarray, basis: BasisConfig, grid: np.ndarray) -> np.ndarray:
    """Varying-coefficient values (draws, K, p, len(grid)) of every cluster."""
    B = curve_matrix(np.asarray(grid, dtype=float), basis)
    off = basis.offsets
    out = np.empty((len(recs), recs["phi"].shape[1], basis.p, len(grid)))
    for l in range(basis.p):
        out[:, :, l, :] = recs["phi"][:, :, off[l]:off[l + 1]] @ B[l].T
    return out


def default_selectors(relabeled: RelabeledChains, basis: BasisConfig, time_range, n_points: int = 5,
                      burn_fraction: float = 0.5, min_share: float = 0.01) -> list[Selector]:
    """beta entries, Psi upper-triangle entries, and curve values of the major clusters.

    A cluster is monitored when its mean share of subjects over the retained
    sweeps of all chains is at least ``min_share``.
    """
    sels = []
    q = relabeled.records[0]["beta"].shape[1]
    r = relabeled.records[0]["Psi"].shape[1]
    for j in range(q):
        sels.append(Selector(f"beta[{j + 1}]", lambda x, j=j: x["beta"][:, j]))
    for a in range(r):
        for b in range(a, r):
            sels.append(Selector(f"Psi[{a + 1},{b + 1}]", lambda x, a=a, b=b: x["Psi"][:, a, b]))
    grid = monitor_grid(time_range, n_points)
    B = curve_matrix(grid, basis)
    off = basis.offsets
    for k in major_clusters(relabeled, burn_fraction, min_share):
        for l in range(basis.p):
            for g, t in enumerate(grid):
                row = B[l][g]
                sels.append(Selector(f"alpha[{k + 1},{l + 1}](t={t:.4g})",
                                     lambda x, k=k, s=slice(off[l], off[l + 1]), row=row: x["phi"][:, k, s] @ row))
    return sels


def major_clusters(relabeled: RelabeledChains, burn_fraction: float = 0.5, min_share: float = 0.01) -> list[int]:
    K = relabeled.K
    share = np.zeros(K)
    total = 0
    for recs in relabeled.records:
        idx = retained_index(len(recs) - 1, burn_fraction, 1)
        C = recs["C"][idx]
        if C.size == 0:
            continue
        share += np.bincount(C.ravel(), minlength=K)
        total += C.size
    if total == 0:
        return []
    share /= total
    return [int(k) for k in np.flatnonzero(share >= min_share)]


@dataclass
class DiagnosticsReport:
    rows: list[dict]
    threshold: float = 1.1

    @property
    def max_rhat(self) -> float:
        return max((r["rhat"] for r in self.rows), default=1.0)

    @property
    def all_below(self) -> bool:
        return all(r["rhat"] < self.threshold for r in self.rows)

    def to_dict(self) -> dict:
        return {"threshold": self.threshold, "max_rhat": self.max_rhat, "all_below": self.all_below,
                "statistics": self.rows}

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "diagnostics.json").write_text(json.dumps(self.to_dict(), indent=2))
        with open(out / "diagnostics.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["selector", "rhat", "degenerate"])
            w.writeheader()
            for r in self.rows:
                w.writerow(r)


def diagnose(relabeled: RelabeledChains, basis: BasisConfig, time_range, n_points: int = 5,
             burn_fraction: float = 0.5, selectors: Sequence[Selector] | None = None,
             threshold: float = 1.1) -> DiagnosticsReport:
    """R^{1/2} of every monitored quantity (second halves of the relabeled chains)."""
    if len(relabeled) < 2:
        raise ValidationError("convergence diagnostics need at least two chains")
    if selectors is None:
        selectors = default_selectors(relabeled, basis, time_range, n_points, burn_fraction)
    rows = []
    for sel in selectors:
        res = gelman_rubin(relabeled.records, sel)
        rows.append({"selector": sel.name, "rhat": res.value, "degenerate": res.degenerate})
    return DiagnosticsReport(rows, threshold)
