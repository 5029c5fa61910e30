"""The nine conditional draws of one sweep.

Each function updates ``state`` in place from its conditional distribution
given the rest of the state.  They are exposed for conditional-moment testing;
chains must be run through :func:`fvclust.sampler.chain.run_chain`, which
fixes the order (reordering the collapsed steps changes the stationary
distribution).
"""
from __future__ import annotations

import numpy as np
from scipy import linalg

from .. import kernels
from ..errors import NumericalError
from ..rand import categorical_rows, inv_gamma, inv_wishart, mvn_prec, mvn_prec_canonical, trunc_normal
from ..state import ChainState, Hyperparams
from .design import ModelData
from .stats import ClusterSufficientStats, WoodburyCore, cluster_stats


def varying_all(state: ChainState, data: ModelData) -> np.ndarray:
    """Varying-coefficient term of every observation under every cluster: (n_obs, K)."""
    return data.F @ state.phi.T


def varying_own(state: ChainState, data: ModelData, vv: np.ndarray | None = None) -> np.ndarray:
    if vv is None:
        vv = varying_all(state, data)
    return vv[np.arange(data.n_obs), state.C[data.subject]]


def pcg_stats(state: ChainState, data: ModelData, core: WoodburyCore | None = None):
    """Statistics with random effects integrated out (collapsed steps)."""
    if core is None:
        core = WoodburyCore.build(data, state.Psi)
    return cluster_stats(data, state.C, state.K, state.L - data.Xbeta(state.beta), core)


def gibbs_stats(state: ChainState, data: ModelData):
    """Statistics conditional on the current random effects."""
    resid = state.L - data.Xbeta(state.beta) - data.Zb(state.b)
    return cluster_stats(data, state.C, state.K, resid, None)


def step1_update_gamma(state: ChainState, data: ModelData, hyper: Hyperparams, rng: np.random.Generator,
                       stats: dict[int, ClusterSufficientStats]) -> int:
    """Scan every selectable indicator of every cluster (k, then l, then m).

    Occupied clusters use the collapsed mass; empty clusters fall back to the
    beta-binomial prior.  Returns the total number of flips.
    """
    U = rng.random((state.K, data.positions.size))
    dummy = np.zeros((data.P, data.P))
    dummy_v = np.zeros(data.P)
    flips = 0
    for k in range(state.K):
        m = state.mask[k].astype(np.uint8)
        st = stats.get(k)
        if st is None:
            res = kernels.scan_cluster(dummy, dummy_v, data.R_full, m, data.positions, data.owner,
                                       data.is_const, data.M, hyper.a, hyper.b, float(state.tau[k]),
                                       U[k], False)
        else:
            res = kernels.scan_cluster(st.Xi, st.xi, data.R_full, m, data.positions, data.owner,
                                       data.is_const, data.M, hyper.a, hyper.b, float(state.tau[k]),
                                       U[k], True)
        if res < 0:
            raise NumericalError(f"indicator scan failed for cluster {k}")
        flips += res
        state.mask[k] = m.astype(bool)
    return flips


def stick_params(counts: np.ndarray, nu: float) -> tuple[np.ndarray, np.ndarray]:
    """Beta parameters of V_1..V_{K-1}: (1 + m_k, nu + sum_{h>k} m_h)."""
    tail = np.cumsum(counts[::-1])[::-1]
    above = np.concatenate([tail[1:], [0]])
    return 1.0 + counts[:-1], nu + above[:-1]


def step2_update_sticks(state: ChainState, data: ModelData, hyper: Hyperparams, rng: np.random.Generator) -> None:
    a, b = stick_params(state.counts(), hyper.nu)
    state.V[:-1] = rng.beta(a, b)
    state.V[-1] = 1.0


def phi_posterior(mask, st: ClusterSufficientStats, R_full, tau) -> tuple[np.ndarray, np.ndarray]:
    """Posterior precision and mean of an occupied cluster's coefficients."""
    Xi, xi = st.select(mask)
    A = Xi + R_full[np.ix_(mask, mask)] / tau
    c = np.linalg.cholesky(A)
    return A, linalg.cho_solve((c, True), xi)


def step3_update_phi(state: ChainState, data: ModelData, hyper: Hyperparams, rng: np.random.Generator,
                     stats: dict[int, ClusterSufficientStats]) -> None:
    for k in range(state.K):
        mask = state.mask[k]
        R = data.R_full[np.ix_(mask, mask)]
        tau = float(state.tau[k])
        st = stats.get(k)
        if st is None:
            phi = mvn_prec(np.zeros(R.shape[0]), R / tau, rng)
        else:
            Xi, xi = st.select(mask)
            phi = mvn_prec_canonical(xi, Xi + R / tau, rng)
        state.phi[k] = 0.0
        state.phi[k, mask] = phi


def random_effect_moments(state: ChainState, data: ModelData, core: WoodburyCore, vv=None):
    """Per-subject posterior mean ``U_i`` of b_i and the Cholesky factor of its precision."""
    e = state.L - varying_own(state, data, vv) - data.Xbeta(state.beta)
    Zte = data.subject_sum(data.Z * e[:, None])
    w = core.solve_lower(Zte[:, :, None])
    return core.solve_upper(w)[:, :, 0], w


def step4_update_random_effects(state: ChainState, data: ModelData, hyper: Hyperparams,
                                rng: np.random.Generator, core: WoodburyCore | None = None, vv=None) -> None:
    """b_i ~ N(U_i, A) with precision ``Psi^-1 + Z_i'Z_i`` (Woodbury form of A)."""
    if data.r == 0:
        return
    if core is None:
        core = WoodburyCore.build(data, state.Psi)
    _, w = random_effect_moments(state, data, core, vv)
    z = rng.standard_normal((data.N, data.r, 1))
    state.b = core.solve_upper(w + z)[:, :, 0]


def tau_params(state: ChainState, data: ModelData, hyper: Hyperparams) -> tuple[np.ndarray, np.ndarray]:
    d = state.mask.sum(axis=1)
    quad = np.einsum("kp,pq,kq->k", state.phi, data.R_full, state.phi)
    return hyper.tau_shape + 0.5 * d, hyper.tau_scale + 0.5 * quad


def step5_update_tau(state: ChainState, data: ModelData, hyper: Hyperparams, rng: np.random.Generator) -> None:
    shape, scale = tau_params(state, data, hyper)
    state.tau = np.asarray(inv_gamma(shape, scale, rng, size=state.K), dtype=float)


def step6_update_psi(state: ChainState, data: ModelData, hyper: Hyperparams, rng: np.random.Generator) -> None:
    if data.r == 0:
        return
    state.Psi = inv_wishart(hyper.u + data.N, hyper.D + state.b.T @ state.b, rng)


def linear_predictor(state: ChainState, data: ModelData, vv=None) -> np.ndarray:
    return varying_own(state, data, vv) + data.Xbeta(state.beta) + data.Zb(state.b)


def step7_update_latent(state: ChainState, data: ModelData, hyper: Hyperparams, rng: np.random.Generator,
                        vv=None) -> None:
    state.L = trunc_normal(linear_predictor(state, data, vv), data.y, rng)


def allocation_log_weights(state: ChainState, data: ModelData, vv=None) -> np.ndarray:
    """(N, K) log pi_k - 0.5 ||L_i - mu_ik||^2, mu_ik using cluster k's curve."""
    if vv is None:
        vv = varying_all(state, data)
    rest = state.L - data.Xbeta(state.beta) - data.Zb(state.b)
    sq = data.subject_sum((rest[:, None] - vv) ** 2)
    with np.errstate(divide="ignore"):
        logpi = np.log(state.weights)
    return logpi[None, :] - 0.5 * sq


def step8_update_allocations(state: ChainState, data: ModelData, hyper: Hyperparams, rng: np.random.Generator,
                             vv=None) -> None:
    state.C = categorical_rows(allocation_log_weights(state, data, vv), rng).astype(np.int64)


def beta_posterior(state: ChainState, data: ModelData, hyper: Hyperparams, vv=None):
    """Precision ``Delta = P^-1 + sum X'X`` and canonical vector ``sum X'(L - W*phi - Zb)``."""
    Pinv = linalg.cho_solve((np.linalg.cholesky(hyper.P), True), np.eye(data.q))
    Delta = Pinv + data.XtX
    h = data.X.T @ (state.L - varying_own(state, data, vv) - data.Zb(state.b))
    return Delta, h


def step9_update_beta(state: ChainState, data: ModelData, hyper: Hyperparams, rng: np.random.Generator,
                      vv=None) -> None:
    if data.q == 0:
        return
    Delta, h = beta_posterior(state, data, hyper, vv)
    state.beta = mvn_prec_canonical(h, Delta, rng)
