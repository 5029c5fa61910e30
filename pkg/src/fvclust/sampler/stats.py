"""Cluster sufficient statistics and the collapsed indicator mass."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .. import _scan_py
from ..data import SubjectRecord
from ..errors import NumericalError
from ..rand import cholesky
from .design import ModelData


def psi_inverse(Psi: np.ndarray) -> np.ndarray:
    r = Psi.shape[0]
    return linalg.cho_solve((cholesky(Psi, "Psi"), True), np.eye(r))


def marginal_obs_precision_apply(subject: SubjectRecord, Psi: np.ndarray, vec: np.ndarray) -> np.ndarray:
    """Apply ``(I + Z Psi Z')^-1`` to ``vec`` via the r x r Woodbury core.

    ``(I + Z Psi Z')^-1 = I - Z (Psi^-1 + Z'Z)^-1 Z'``.
    """
    Z = subject.Z
    if Z.shape[1] == 0:
        return np.array(vec, dtype=float)
    core = psi_inverse(Psi) + Z.T @ Z
    c = cholesky(core, "Woodbury core")
    return vec - Z @ linalg.cho_solve((c, True), Z.T @ vec)


@dataclass
class WoodburyCore:
    """Per-subject lower Cholesky factors of ``Psi^-1 + Z_i'Z_i`` and their inverses.

    The factors are r x r, so explicit inverses applied by batched matmul are
    both cheap and much faster than batched triangular solves.
    """

    chol: np.ndarray  # (N, r, r)
    inv: np.ndarray  # (N, r, r), inverse of each factor

    @classmethod
    def build(cls, data: ModelData, Psi: np.ndarray) -> "WoodburyCore":
        if data.r == 0:
            z = np.zeros((data.N, 0, 0))
            return cls(z, z)
        S = psi_inverse(Psi)[None, :, :] + data.ZtZ
        try:
            c = np.linalg.cholesky(S)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("Woodbury core factorization failed") from exc
        return cls(c, np.linalg.inv(c))

    def solve_lower(self, rhs: np.ndarray) -> np.ndarray:
        """``L_i^-1 rhs_i`` for stacked (N, r, m) right-hand sides."""
        return self.inv @ rhs

    def solve_upper(self, rhs: np.ndarray) -> np.ndarray:
        """``L_i^-T rhs_i``."""
        return np.swapaxes(self.inv, 1, 2) @ rhs


@dataclass
class ClusterSufficientStats:
    """Full-column statistics for one occupied cluster; select with a mask."""

    Xi: np.ndarray
    xi: np.ndarray
    m: int

    def select(self, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.Xi[np.ix_(mask, mask)], self.xi[mask]


def _grouped_rows(data: ModelData, C: np.ndarray, K: int):
    """Observation row order grouped by cluster, plus per-cluster slices."""
    c_obs = C[data.subject]
    order = np.argsort(c_obs, kind="stable")
    bounds = np.searchsorted(c_obs[order], np.arange(K + 1))
    return order, bounds


def cluster_stats(data: ModelData, C: np.ndarray, K: int, resid: np.ndarray,
                  core: WoodburyCore | None) -> dict[int, ClusterSufficientStats]:
    """Statistics of every occupied cluster.

    With ``core`` given, observations are weighted by ``(I + Z Psi Z')^-1``
    (random effects integrated out); with ``core=None`` the weight is the
    identity, which is the form used when conditioning on the random effects.
    ``resid`` is the stacked response part that the cluster term must explain.
    """
    order, bounds = _grouped_rows(data, C, K)
    counts = np.bincount(C, minlength=K)
    Fo = data.F[order]
    eo = resid[order]
    out = {}
    if core is not None and data.r:
        Qt = core.solve_lower(np.swapaxes(data.H, 1, 2))  # (N, r, P): L_i^-1 H_i'
        Zte = data.subject_sum(data.Z * resid[:, None])
        v = core.solve_lower(Zte[:, :, None])[:, :, 0]
    subj_order = np.argsort(C, kind="stable")
    subj_bounds = np.searchsorted(C[subj_order], np.arange(K + 1))
    for k in np.flatnonzero(counts):
        Fk = Fo[bounds[k]:bounds[k + 1]]
        Xi = Fk.T @ Fk
        xi = Fk.T @ eo[bounds[k]:bounds[k + 1]]
        if core is not None and data.r:
            members = subj_order[subj_bounds[k]:subj_bounds[k + 1]]
            Qk = Qt[members].reshape(-1, data.P)
            Xi -= Qk.T @ Qk
            xi -= Qk.T @ v[members].reshape(-1)
        out[int(k)] = ClusterSufficientStats(0.5 * (Xi + Xi.T), xi, int(counts[k]))
    return out


def log_f_gamma(mask: np.ndarray, stats: ClusterSufficientStats | None, data: ModelData,
                tau: float, a: float, b: float) -> float:
    """Log collapsed conditional mass of a cluster's indicator pattern.

    Beta-binomial log prior summed over covariates plus, for an occupied
    cluster, ``-0.5 log det(tau R^-1 Xi + I) + 0.5 xi'(Xi + R/tau)^-1 xi``.
    For an empty cluster (``stats=None``) only the prior term remains.
    """
    mask = np.asarray(mask, dtype=bool)
    lp = _scan_py.log_prior(mask.astype(np.uint8), data.owner, data.is_const, data.M, a, b)
    if stats is None:
        return lp
    lm = _scan_py.log_marginal(stats.Xi, stats.xi, data.R_full, mask, tau)
    if lm is None:
        raise NumericalError("factorization failed in the collapsed indicator mass")
    return lp + lm
