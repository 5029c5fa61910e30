"""Chain drivers: the partially collapsed sampler and the plain Gibbs backend."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np
from scipy.special import log_ndtr

from .. import __version__
from ..basis import BasisConfig
from ..data import LongitudinalDataset
from ..errors import FvclustError, NumericalError
from ..rand import CHAIN, INIT, RngStream, inv_gamma, mvn_prec, trunc_normal
from ..state import ChainState, Hyperparams, stick_weights
from ..store import DrawStore
from . import steps
from .design import ModelData
from .stats import WoodburyCore

log = logging.getLogger(__name__)

BLOCKS = ("gamma", "V", "phi", "b", "tau", "Psi", "L", "C", "beta")
BACKENDS = ("pcg", "gibbs")


@dataclass
class InitSpec:
    """Starting values.

    Defaults: uniform allocations, indicators Bernoulli(``gamma_prob``) beyond
    the constants, coefficients and scales from the base measure,
    ``beta ~ N(0, I)``, ``b = 0``, ``Psi = I``, ``V_k = 0.5``, and latent
    utilities drawn given the initial linear predictor.  ``gamma="constant"``
    starts every cluster with constant-only coefficient functions; explicit
    arrays override the corresponding block.
    """

    gamma_prob: float = 0.5
    gamma: str | np.ndarray | None = None
    C: np.ndarray | None = None
    beta: np.ndarray | None = None
    Psi: np.ndarray | None = None
    tau: np.ndarray | None = None


def initial_state(data: ModelData, hyper: Hyperparams, init: InitSpec, rng: np.random.Generator) -> ChainState:
    K, P, N = hyper.K, data.P, data.N
    C = rng.integers(0, K, size=N) if init.C is None else np.asarray(init.C, dtype=np.int64).copy()
    if isinstance(init.gamma, np.ndarray):
        mask = np.broadcast_to(init.gamma.astype(bool), (K, P)).copy()
    elif init.gamma == "constant":
        mask = np.zeros((K, P), dtype=bool)
    else:
        mask = rng.random((K, P)) < init.gamma_prob
    mask[:, data.const_pos] = True
    tau = (inv_gamma(hyper.tau_shape, hyper.tau_scale, rng, size=K) if init.tau is None
           else np.asarray(init.tau, dtype=float).copy())
    phi = np.zeros((K, P))
    for k in range(K):
        R = data.R_full[np.ix_(mask[k], mask[k])]
        phi[k, mask[k]] = mvn_prec(np.zeros(R.shape[0]), R / tau[k], rng)
    beta = rng.standard_normal(data.q) if init.beta is None else np.asarray(init.beta, dtype=float).copy()
    Psi = np.eye(data.r) if init.Psi is None else np.asarray(init.Psi, dtype=float).copy()
    V = np.full(K, 0.5)
    V[-1] = 1.0
    state = ChainState(mask, phi, np.asarray(tau, dtype=float), V, C.astype(np.int64), beta,
                       np.zeros((N, data.r)), Psi, np.zeros(data.n_obs))
    state.L = trunc_normal(steps.linear_predictor(state, data), data.y, rng)
    return state


def log_posterior(state: ChainState, data: ModelData, vv=None) -> float:
    """Complete-data log density used to pick the relabeling pivot.

    ``sum log pi_{C_i} + sum log Phi(+-mu_ij) + sum log N(b_i; 0, Psi)``.
    """
    mu = steps.linear_predictor(state, data, vv)
    with np.errstate(divide="ignore"):
        lp = float(np.log(stick_weights(state.V))[state.C].sum())
    lp += float(log_ndtr(np.where(data.y, mu, -mu)).sum())
    if data.r:
        c = np.linalg.cholesky(state.Psi)
        z = np.linalg.solve(c, state.b.T)
        lp += float(-0.5 * (z * z).sum() - data.N * np.log(np.diag(c)).sum())
    return lp


def sweep(state: ChainState, data: ModelData, hyper: Hyperparams, stream: RngStream,
          backend: str = "pcg", freeze: Iterable[str] = ()) -> dict:
    """One full iteration, Steps 1 through 9 in order.

    ``stream`` is the sweep's substream; step ``s`` draws from child ``s``.
    Returns the sweep trace: accepted indicator flips, the complete-data log
    posterior and the cluster occupancy counts.
    Blocks named in ``freeze`` are held at their current values (conditioning,
    for validation runs); the order of the remaining steps is unchanged.
    """
    frozen = set(freeze)
    gen = lambda s: stream.child(s).generator()  # noqa: E731
    trace = {}
    step = 0
    try:
        step = 1
        core = WoodburyCore.build(data, state.Psi) if data.r else None
        if backend == "pcg":
            stats = steps.pcg_stats(state, data, core) if {"gamma", "phi"} - frozen else {}
        else:
            stats = steps.gibbs_stats(state, data) if {"gamma", "phi"} - frozen else {}
        if "gamma" not in frozen:
            trace["flips"] = steps.step1_update_gamma(state, data, hyper, gen(1), stats)
        step = 2
        if "V" not in frozen:
            steps.step2_update_sticks(state, data, hyper, gen(2))
        step = 3
        if "phi" not in frozen:
            steps.step3_update_phi(state, data, hyper, gen(3), stats)
        vv = steps.varying_all(state, data)
        step = 4
        if "b" not in frozen and data.r:
            steps.step4_update_random_effects(state, data, hyper, gen(4), core, vv)
        step = 5
        if "tau" not in frozen:
            steps.step5_update_tau(state, data, hyper, gen(5))
        step = 6
        if "Psi" not in frozen:
            steps.step6_update_psi(state, data, hyper, gen(6))
        step = 7
        if "L" not in frozen:
            steps.step7_update_latent(state, data, hyper, gen(7), vv)
        step = 8
        if "C" not in frozen:
            steps.step8_update_allocations(state, data, hyper, gen(8), vv)
        step = 9
        if "beta" not in frozen:
            steps.step9_update_beta(state, data, hyper, gen(9), vv)
        trace["logpost"] = log_posterior(state, data, vv)
        trace["occupancy"] = state.counts()
    except FvclustError as exc:
        raise type(exc)(f"step {step}: {exc}") from exc
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"step {step}: {exc}") from exc
    return trace


def store_dims(data: ModelData, hyper: Hyperparams, record_b: bool = False) -> dict:
    return {"K": int(hyper.K), "P": data.P, "N": data.N, "q": data.q, "r": data.r, "record_b": bool(record_b)}


def run_chain(dataset: LongitudinalDataset | ModelData, hyper: Hyperparams, basis: BasisConfig,
              init: InitSpec | None = None, n_sweeps: int = 1000, seed: int = 0, chain_id: int = 0,
              backend: str = "pcg", store_path=None, record_b: bool = False, freeze: Iterable[str] = (),
              resume: tuple[ChainState, DrawStore] | None = None, checkpoint_path=None,
              checkpoint_every: int = 0, manifest: dict | None = None,
              progress: Callable[[int, dict], None] | None = None) -> DrawStore:
    """Run one chain and return its draw store (every sweep recorded).

    The substream of sweep ``s`` is ``(seed; CHAIN, chain_id, s)``, so a chain
    resumed from a checkpoint continues bit-identically.  ``resume`` is a
    ``(state, store)`` pair whose last record is the state.
    """
    if backend not in BACKENDS:
        raise ValueError(f"unknown backend {backend!r}")
    data = dataset if isinstance(dataset, ModelData) else ModelData(dataset, basis)
    frozen = tuple(sorted(set(freeze)))
    unknown = set(frozen) - set(BLOCKS)
    if unknown:
        raise ValueError(f"unknown blocks to freeze: {sorted(unknown)}")
    chain = RngStream(seed).child(CHAIN, chain_id)
    if resume is None:
        man = {"version": __version__, "seed": int(seed), "chain": int(chain_id), "backend": backend,
               "hyper": hyper.to_dict(), "basis": basis.to_dict(), "freeze": list(frozen)}
        man.update(manifest or {})
        store = DrawStore(store_dims(data, hyper, record_b), man, store_path)
        state = initial_state(data, hyper, init or InitSpec(), RngStream(seed).child(INIT, chain_id).generator())
        store.append(state, 0, log_posterior(state, data))
        start = 1
    else:
        state, store = resume
        start = int(store.records["sweep"][-1]) + 1
    for s in range(start, start + n_sweeps):
        trace = sweep(state, data, hyper, chain.child(s), backend, frozen)
        store.append(state, s, trace["logpost"])
        if checkpoint_path is not None and checkpoint_every and s % checkpoint_every == 0:
            state.save(checkpoint_path, sweep=s, seed=int(seed), chain=int(chain_id))
        if progress is not None:
            progress(s, trace)
    if checkpoint_path is not None:
        state.save(checkpoint_path, sweep=start + n_sweeps - 1, seed=int(seed), chain=int(chain_id))
    store.close()
    store.final_state = state
    return store


def run_plain_gibbs(dataset, hyper, basis, **kwargs) -> DrawStore:
    """Same as :func:`run_chain` with Steps 1-3 conditioned on the random effects."""
    return run_chain(dataset, hyper, basis, backend="gibbs", **kwargs)
