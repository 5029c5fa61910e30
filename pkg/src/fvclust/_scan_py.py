"""Pure-Python indicator scan; reference implementation of the compiled kernel."""
from __future__ import annotations

import math

import numpy as np
from scipy.special import betaln

JITTER = 1e-8


def _chol_logdet(a):
    try:
        c = np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        d = np.diag(a)
        try:
            c = np.linalg.cholesky(a + np.diag(JITTER * np.where(d > 0, d, 1.0)))
        except np.linalg.LinAlgError:
            return None, 0.0
    return c, 2.0 * float(np.log(np.diag(c)).sum())


def log_marginal(Xi, xi, R, mask, tau):
    """Collapsed log-likelihood term of one cluster for the selected columns.

    ``-0.5 * log det(tau R^-1 Xi + I) + 0.5 * xi' (Xi + R / tau)^-1 xi``.
    Returns None when a factorization fails after the jitter retry.
    """
    idx = np.flatnonzero(mask)
    Rs = R[np.ix_(idx, idx)]
    cr, ldr = _chol_logdet(Rs)
    ca, lda = _chol_logdet(Xi[np.ix_(idx, idx)] + Rs / tau)
    if cr is None or ca is None:
        return None
    y = np.linalg.solve(ca, xi[idx]) if idx.size else np.zeros(0)
    return -0.5 * (idx.size * math.log(tau) + lda - ldr) + 0.5 * float(y @ y)


def log_prior(mask, owner, is_const, M, a, b):
    counts = np.bincount(owner[(mask != 0) & (is_const == 0)], minlength=len(M))
    return float(np.sum(betaln(counts + a, np.asarray(M) + 1 - counts + b)))


def _log_f(Xi, xi, R, mask, owner, is_const, M, a, b, tau, use_lik):
    lp = log_prior(mask, owner, is_const, M, a, b)
    if not use_lik:
        return lp
    lm = log_marginal(Xi, xi, R, mask, tau)
    return None if lm is None else lp + lm


def scan_cluster(Xi, xi, R, mask, positions, owner, is_const, M, a, b, tau, uniforms, use_lik):
    """Systematic-scan Gibbs update of one cluster's indicators.

    ``mask`` (uint8) is updated in place.  For each position in ``positions``
    the indicator is set to 1 with probability ``f1 / (f0 + f1)`` where f is
    the collapsed conditional mass, decided by ``uniforms[j] < p1``.  Returns
    the number of flips, or -1 on a factorization failure.
    """
    cur = _log_f(Xi, xi, R, mask, owner, is_const, M, a, b, tau, use_lik)
    if cur is None:
        return -1
    flips = 0
    for j, pos in enumerate(positions):
        old = mask[pos]
        mask[pos] = 1 - old
        new = _log_f(Xi, xi, R, mask, owner, is_const, M, a, b, tau, use_lik)
        if new is None:
            return -1
        f1, f0 = (cur, new) if old else (new, cur)
        if f1 >= f0:
            p1 = 1.0 / (1.0 + math.exp(f0 - f1))
        else:
            e = math.exp(f1 - f0)
            p1 = e / (1.0 + e)
        inc = 1 if uniforms[j] < p1 else 0
        mask[pos] = inc
        cur = f1 if inc else f0
        flips += inc != old
    return flips
