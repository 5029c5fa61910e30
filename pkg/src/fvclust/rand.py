"""Random-variate primitives.

All samplers take a :class:`numpy.random.Generator`.  Generators are derived
from :class:`RngStream`, which names a substream by an integer path
``(seed; k1, k2, ...)`` through :class:`numpy.random.SeedSequence` spawn keys
and a Philox counter-based bit generator.  The chain driver uses the path
``(CHAIN, chain_id, sweep, step)``, so every step of every sweep owns an
independent stream and results do not depend on worker count or on whether a
run was resumed from a checkpoint.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.special import log_ndtr, ndtri

from .errors import NumericalError, ValidationError

# top-level substream namespaces
SIMULATE = 1
CHAIN = 2
INIT = 3
REPLICATE = 4

JITTER = 1e-8
TAIL_THRESHOLD = 5.0


@dataclass(frozen=True)
class RngStream:
    """Value-semantic handle on a substream of a seeded generator family."""

    seed: int
    path: tuple[int, ...] = ()

    def child(self, *keys: int) -> "RngStream":
        for key in keys:
            if int(key) != key or key < 0:
                raise ValidationError(f"substream keys must be non-negative ints, got {key!r}")
        return RngStream(self.seed, self.path + tuple(int(k) for k in keys))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=self.path)
        return np.random.Generator(np.random.Philox(ss))


def cholesky(a: np.ndarray, what: str = "matrix") -> np.ndarray:
    """Lower Cholesky factor with a one-shot relative diagonal jitter retry."""
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        pass
    d = np.diag(a)
    jitter = JITTER * np.where(d > 0, d, 1.0)
    try:
        return np.linalg.cholesky(a + np.diag(jitter))
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"Cholesky of {what} ({a.shape[0]}x{a.shape[0]}) failed after jitter") from exc


def mvn_prec(mean: np.ndarray, precision: np.ndarray, rng: np.random.Generator,
             chol: np.ndarray | None = None) -> np.ndarray:
    """Draw from N(mean, precision^-1) using a Cholesky factor of the precision.

    With ``precision = L L^T`` the draw is ``mean + L^-T z``; no inverse is
    formed.  A precomputed lower factor may be passed as ``chol``.
    """
    mean = np.asarray(mean, dtype=float)
    if chol is None:
        chol = cholesky(precision, "precision")
    z = rng.standard_normal(mean.shape[0])
    return mean + linalg.solve_triangular(chol, z, lower=True, trans="T")


def mvn_prec_canonical(h: np.ndarray, precision: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw from N(precision^-1 h, precision^-1) with a single factorization."""
    chol = cholesky(precision, "precision")
    w = linalg.solve_triangular(chol, h, lower=True)
    z = rng.standard_normal(h.shape[0])
    return linalg.solve_triangular(chol, w + z, lower=True, trans="T")


def _tail_exponential(a: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Standard normal truncated to (a, inf) for large a (Robert 1995)."""
    out = np.empty_like(a)
    todo = np.arange(a.shape[0])
    while todo.size:
        aa = a[todo]
        lam = 0.5 * (aa + np.sqrt(aa * aa + 4.0))
        x = aa + rng.exponential(size=todo.size) / lam
        u = rng.random(todo.size)
        ok = np.log(u) <= -0.5 * (x - lam) ** 2
        out[todo[ok]] = x[ok]
        todo = todo[~ok]
    return out


def trunc_normal(mu, positive, rng: np.random.Generator) -> np.ndarray:
    """Unit-variance normal draws truncated to (0, inf) or (-inf, 0].

    ``positive`` selects the side per element.  Each draw is reduced to a
    standard normal truncated below at ``a`` (``a = -mu`` on the positive side,
    ``a = mu`` on the negative side, then reflected).  For ``a <= 5`` the
    inverse CDF ``-ndtri(u * Phi(-a))`` is exact to working precision; beyond
    that exponential rejection is used.
    """
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    positive = np.broadcast_to(np.asarray(positive, dtype=bool), mu.shape)
    sign = np.where(positive, 1.0, -1.0)
    a = -sign * mu
    z = np.empty_like(mu)
    body = a <= TAIL_THRESHOLD
    if body.any():
        ab = a[body]
        u = 1.0 - rng.random(ab.shape[0])
        logp = log_ndtr(-ab)
        z[body] = -ndtri(np.exp(np.log(u) + logp))
    tail = ~body
    if tail.any():
        z[tail] = _tail_exponential(a[tail], rng)
    # z > a strictly; guard the boundary value itself on the positive side
    z = np.maximum(z, a)
    out = sign * z + mu
    pos = positive & (out <= 0.0)
    if pos.any():
        out[pos] = np.nextafter(0.0, 1.0)
    neg = ~positive & (out > 0.0)
    if neg.any():
        out[neg] = 0.0
    return out


def inv_gamma(shape, scale, rng: np.random.Generator, size=None):
    """Inverse-gamma draw: the reciprocal of Gamma(shape, rate=scale)."""
    if np.any(np.asarray(shape) <= 0) or np.any(np.asarray(scale) <= 0):
        raise ValidationError("inverse-gamma shape and scale must be positive")
    return np.asarray(scale) / rng.standard_gamma(shape, size=size)


def inv_wishart(df: float, scale: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-Wishart draw via the Bartlett decomposition.

    With ``scale = L L^T`` and Bartlett factor ``A`` of Wishart(df, I), the draw
    is ``M M^T`` with ``M = L A^-T``, computed by a triangular solve.
    """
    scale = np.atleast_2d(np.asarray(scale, dtype=float))
    r = scale.shape[0]
    if not df > r - 1:
        raise ValidationError(f"inverse-Wishart needs df > r - 1 = {r - 1}, got {df}")
    chol = cholesky(scale, "inverse-Wishart scale")
    A = np.zeros((r, r))
    A[np.diag_indices(r)] = np.sqrt(rng.chisquare(df - np.arange(r)))
    low = np.tril_indices(r, -1)
    A[low] = rng.standard_normal(len(low[0]))
    M = linalg.solve_triangular(A, chol.T, lower=True).T
    out = M @ M.T
    return 0.5 * (out + out.T)


def beta_draw(a, b, rng: np.random.Generator, size=None):
    if np.any(np.asarray(a) <= 0) or np.any(np.asarray(b) <= 0):
        raise ValidationError("beta parameters must be positive")
    return rng.beta(a, b, size=size)


def categorical_draw(log_weights, rng: np.random.Generator) -> int:
    """Index drawn with probability proportional to ``exp(log_weights)``."""
    lw = np.asarray(log_weights, dtype=float)
    return int(categorical_rows(lw[None, :], rng)[0])


def categorical_rows(log_weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Row-wise categorical draws from a matrix of unnormalized log weights."""
    lw = np.asarray(log_weights, dtype=float)
    top = lw.max(axis=1)
    if not np.all(np.isfinite(top)):
        raise NumericalError("categorical draw with no finite log weight")
    w = np.exp(lw - top[:, None])
    cum = np.cumsum(w, axis=1)
    u = rng.random(lw.shape[0]) * cum[:, -1]
    idx = (cum <= u[:, None]).sum(axis=1)
    return np.minimum(idx, lw.shape[1] - 1)
