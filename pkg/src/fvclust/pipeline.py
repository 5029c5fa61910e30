"""Multi-chain fitting, post-processing and replicate studies.

Chains and replicates are independent, so they fan out over worker processes.
Every worker pins BLAS to one thread: each chain is then a fixed sequence of
floating-point operations, and outputs do not depend on the number of
workers.
"""
from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .basis import BasisConfig, default_knots
from .data import LongitudinalDataset, SimulationSpec, SimulationTruth, simulate_dataset
from .diagnostics import (ChainCollection, DiagnosticsReport, PosteriorSamples, RelabeledChains, burn_thin,
                          diagnose, relabel_ecr)
from .rand import REPLICATE
from .sampler import InitSpec, ModelData, run_chain
from .state import Hyperparams
from .store import DrawStore
from .summary import (ClusteringReport, CurveSummary, band_coverage, clustering_metrics, default_grid,
                      fixed_param_table, modal_membership, summarize_curves)

log = logging.getLogger(__name__)

THREADS_ENV = "FVCLUST_THREADS"


def default_workers() -> int:
    """Worker count from ``FVCLUST_THREADS`` (default 1)."""
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def derived_seed(seed: int, *keys: int) -> int:
    """A 63-bit seed derived from ``seed`` and a key path (used for replicates)."""
    words = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys)).generate_state(2, np.uint32)
    return int((int(words[0]) << 31) ^ int(words[1]))


def _map(fn: Callable, items: Sequence, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------------------
# fitting


@dataclass(frozen=True)
class ChainJob:
    dataset: LongitudinalDataset
    hyper: Hyperparams
    basis: BasisConfig
    n_sweeps: int
    seed: int
    chain_id: int
    backend: str = "pcg"
    path: str | None = None
    init: InitSpec | None = None
    record_b: bool = False
    manifest: dict | None = None
    checkpoint_every: int = 0


def _run_job(job: ChainJob) -> DrawStore:
    with threadpool_limits(limits=1):
        ckpt = None
        if job.path is not None and job.checkpoint_every:
            ckpt = str(job.path) + ".ckpt.npz"
        return run_chain(ModelData(job.dataset, job.basis), job.hyper, job.basis, init=job.init,
                         n_sweeps=job.n_sweeps, seed=job.seed, chain_id=job.chain_id, backend=job.backend,
                         store_path=job.path, record_b=job.record_b, manifest=job.manifest,
                         checkpoint_path=ckpt, checkpoint_every=job.checkpoint_every)


def fit_chains(dataset: LongitudinalDataset, hyper: Hyperparams, basis: BasisConfig, n_chains: int = 3,
               n_sweeps: int = 4000, seed: int = 0, backend: str = "pcg", out_dir=None,
               workers: int | None = None, init: InitSpec | None = None, record_b: bool = False,
               manifest: dict | None = None, checkpoint_every: int = 0) -> list[DrawStore]:
    """Run ``n_chains`` chains (chain ids 0..n-1 of one seed); stores go to ``out_dir`` if given."""
    if n_chains < 1:
        raise ValueError("n_chains must be at least 1")
    workers = default_workers() if workers is None else int(workers)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    jobs = [ChainJob(dataset, hyper, basis, n_sweeps, seed, c, backend,
                     None if out_dir is None else str(Path(out_dir) / f"chain{c + 1}.draws"),
                     init, record_b, manifest, checkpoint_every) for c in range(n_chains)]
    return _map(_run_job, jobs, workers)


# ---------------------------------------------------------------------------
# analysis


@dataclass
class Analysis:
    relabeled: RelabeledChains
    samples: PosteriorSamples
    curves: CurveSummary
    clustering: ClusteringReport
    table: list[dict]
    diagnostics: DiagnosticsReport | None = None
    coverage: np.ndarray | None = None

    def to_dict(self) -> dict:
        d = {"n_draws": len(self.samples), "clustering": self.clustering.to_dict(), "fixed_parameters": self.table,
             "pivot": list(self.relabeled.pivot)}
        if self.diagnostics is not None:
            d["diagnostics"] = self.diagnostics.to_dict()
        if self.coverage is not None:
            d["coverage"] = self.coverage.tolist()
        return d


def analyze(stores: Sequence[DrawStore], basis: BasisConfig, time_range, burn_fraction: float = 0.5,
            thin: int = 5, grid_points: int = 100, monitor_points: int = 5,
            truth: SimulationTruth | None = None) -> Analysis:
    """Relabel, burn/thin, diagnose (with two or more chains) and summarize."""
    chains = ChainCollection(list(stores))
    relabeled = relabel_ecr(chains, burn_fraction=burn_fraction)
    samples = burn_thin(relabeled, burn_fraction, thin)
    basis_grid = default_grid(time_range, grid_points)
    curves = summarize_curves(samples, basis, basis_grid)
    membership = modal_membership(samples)
    report = clustering_metrics(membership, None if truth is None else truth.cluster_of, samples.K)
    table = fixed_param_table(samples)
    diag = diagnose(relabeled, basis, time_range, monitor_points, burn_fraction) if len(stores) >= 2 else None
    cov = None
    if truth is not None:
        cov = band_coverage(curves, report, truth.alpha)
    return Analysis(relabeled, samples, curves, report, table, diag, cov)


# ---------------------------------------------------------------------------
# replicate studies


@dataclass(frozen=True)
class ReplicateJob:
    spec: SimulationSpec
    index: int
    seed: int
    n_chains: int
    n_sweeps: int
    burn_fraction: float
    thin: int
    hyper_overrides: dict = field(default_factory=dict)
    n_knots: int = 30
    backend: str = "pcg"
    grid_points: int = 100
    monitor_points: int = 5


@dataclass
class ReplicateResult:
    index: int
    data_seed: int
    accuracy: float
    f1: list[float]
    coverage: np.ndarray  # (T, p, grid) booleans
    fixed_parameters: list[dict]
    max_rhat: float | None
    beta_true: list[float]

    def to_dict(self) -> dict:
        return {"index": self.index, "data_seed": self.data_seed, "accuracy": self.accuracy, "f1": self.f1,
                "mean_coverage": float(self.coverage.mean()), "fixed_parameters": self.fixed_parameters,
                "max_rhat": self.max_rhat, "beta_true": self.beta_true}


def run_replicate(job: ReplicateJob) -> ReplicateResult:
    """Simulate one dataset, fit it, and score the fit against the truth."""
    with threadpool_limits(limits=1):
        seed = derived_seed(job.seed, REPLICATE, job.index)
        data, truth = simulate_dataset(job.spec, seed)
        basis = default_knots(data, job.n_knots)
        hyper = Hyperparams.default(data.N, data.dims[1], data.dims[2], **job.hyper_overrides)
        md = ModelData(data, basis)
        stores = [run_chain(md, hyper, basis, n_sweeps=job.n_sweeps, seed=seed, chain_id=c, backend=job.backend)
                  for c in range(job.n_chains)]
        res = analyze(stores, basis, data.time_range, job.burn_fraction, job.thin, job.grid_points,
                      job.monitor_points, truth)
    return ReplicateResult(job.index, seed, res.clustering.accuracy, res.clustering.f1.tolist(), res.coverage,
                           res.table, None if res.diagnostics is None else res.diagnostics.max_rhat,
                           truth.beta_true.tolist())


def run_replicates(spec: SimulationSpec, n_replicates: int, seed: int = 0, n_chains: int = 3,
                   n_sweeps: int = 4000, burn_fraction: float = 0.5, thin: int = 5,
                   hyper_overrides: dict | None = None, workers: int | None = None, **kw) -> list[ReplicateResult]:
    workers = default_workers() if workers is None else int(workers)
    jobs = [ReplicateJob(spec, i, seed, n_chains, n_sweeps, burn_fraction, thin, dict(hyper_overrides or {}), **kw)
            for i in range(n_replicates)]
    return _map(run_replicate, jobs, workers)
