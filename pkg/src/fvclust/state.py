"""Model parameters, hyperparameters and the truncated stick-breaking prior.

Cluster labels are 0-based internally (``0..K-1``); files written for humans
use 1-based labels.
"""
from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import betaln

from .basis import BasisConfig, split_mask
from .errors import ValidationError
from .rand import cholesky, inv_gamma, mvn_prec

SNAPSHOT_VERSION = 1


@dataclass
class Hyperparams:
    """Prior settings.

    ``tau_shape``/``tau_scale`` parameterize the inverse-gamma prior on the
    g-prior scales; the scale is ``N / 2`` for the Zellner-Siow choice.
    """

    K: int
    nu: float
    a: float
    b: float
    P: np.ndarray
    u: float
    D: np.ndarray
    tau_shape: float
    tau_scale: float

    def __post_init__(self):
        self.P = np.atleast_2d(np.asarray(self.P, dtype=float)).reshape(len(self.P), -1) if np.size(self.P) else np.zeros((0, 0))
        self.D = np.atleast_2d(np.asarray(self.D, dtype=float)).reshape(len(self.D), -1) if np.size(self.D) else np.zeros((0, 0))
        self.validate()

    @classmethod
    def default(cls, N: int, q: int, r: int, **overrides) -> "Hyperparams":
        kw = dict(K=10, nu=1.0, a=1.0, b=1.0, P=100.0 * np.eye(q), u=r + 2.0, D=np.eye(r),
                  tau_shape=0.5, tau_scale=N / 2.0)
        kw.update(overrides)
        return cls(**kw)

    def validate(self) -> None:
        if int(self.K) != self.K or self.K < 1:
            raise ValidationError("truncation level K must be a positive integer")
        if not self.nu > 0:
            raise ValidationError("concentration nu must be positive")
        if not (self.a > 0 and self.b > 0):
            raise ValidationError("beta-binomial shapes must be positive")
        if not (self.tau_shape > 0 and self.tau_scale > 0):
            raise ValidationError("tau prior parameters must be positive")
        r = self.D.shape[0]
        for name, m in (("P", self.P), ("D", self.D)):
            if m.shape[0] != m.shape[1] or not np.allclose(m, m.T):
                raise ValidationError(f"{name} must be symmetric")
            if m.shape[0]:
                try:
                    np.linalg.cholesky(m)
                except np.linalg.LinAlgError:
                    raise ValidationError(f"{name} must be positive definite") from None
        if r and not self.u > r - 1:
            raise ValidationError(f"inverse-Wishart degrees of freedom must exceed r - 1 = {r - 1}")

    def to_dict(self) -> dict:
        return {"K": int(self.K), "nu": self.nu, "a": self.a, "b": self.b, "P": self.P.tolist(),
                "u": self.u, "D": self.D.tolist(), "tau_shape": self.tau_shape, "tau_scale": self.tau_scale}

    @classmethod
    def from_dict(cls, d: dict, N: int, q: int, r: int) -> "Hyperparams":
        """Defaults for (N, q, r) overridden by any keys present in ``d``."""
        kw = dict(d)
        for key in ("P", "D"):
            if key in kw and np.ndim(kw[key]) == 0:
                kw[key] = float(kw[key]) * np.eye(q if key == "P" else r)
        if "K" in kw:
            kw["K"] = int(kw["K"])
        return cls.default(N, q, r, **kw)


def stick_weights(V: np.ndarray) -> np.ndarray:
    """``pi_k = V_k * prod_{l<k} (1 - V_l)``."""
    V = np.asarray(V, dtype=float)
    rest = np.concatenate([[1.0], np.cumprod(1.0 - V[:-1])])
    return V * rest


@dataclass
class StickState:
    V: np.ndarray

    def __post_init__(self):
        self.V = np.asarray(self.V, dtype=float)
        if self.V[-1] != 1.0 or np.any(self.V[:-1] < 0) or np.any(self.V[:-1] > 1):
            raise ValidationError("sticks need V_K = 1 and V_k in [0, 1]")

    @property
    def weights(self) -> np.ndarray:
        return stick_weights(self.V)


@dataclass
class ClusterParams:
    """One cluster's indicators, selected coefficients and g-prior scale."""

    gamma_star: list[np.ndarray]
    phi_star: np.ndarray
    tau: float

    def __post_init__(self):
        if self.phi_star.size != sum(int(g.sum()) for g in self.gamma_star):
            raise ValidationError("phi_star length must equal the number of active indicators")
        if not self.tau > 0:
            raise ValidationError("tau must be positive")


def log_prior_gamma(gamma_l: np.ndarray, M_l: int, a: float, b: float) -> float:
    """Unnormalized log beta-binomial mass of one covariate's indicators.

    The count excludes the always-on constant, so it ranges over
    ``0..M_l + 1`` (linear term plus knots).
    """
    c = int(np.sum(gamma_l[1:]))
    return float(betaln(c + a, M_l + 1 - c + b))


def draw_from_base_measure(hyper: Hyperparams, basis: BasisConfig, gram_full: np.ndarray,
                           rng: np.random.Generator, gamma=None) -> ClusterParams:
    """Draw (indicators, coefficients, scale) for a fresh cluster.

    Indicators come from the beta-binomial prior (as a Beta(a, b) mixture of
    i.i.d. Bernoullis), ``tau ~ IG(tau_shape, tau_scale)`` and
    ``phi ~ N(0, tau R^-1)`` with ``R`` the selected block of ``gram_full``.
    ``gamma`` forces the indicator pattern.
    """
    if gamma is None:
        gamma = []
        for M_l in basis.M:
            theta = rng.beta(hyper.a, hyper.b)
            g = np.ones(M_l + 2, dtype=bool)
            g[1:] = rng.random(M_l + 1) < theta
            gamma.append(g)
    mask = np.concatenate(gamma)
    tau = float(inv_gamma(hyper.tau_shape, hyper.tau_scale, rng))
    R = gram_full[np.ix_(mask, mask)]
    phi = mvn_prec(np.zeros(R.shape[0]), R / tau, rng)
    return ClusterParams([g.copy() for g in gamma], phi, tau)


@dataclass
class ChainState:
    """Full sampler state.

    ``mask[k]`` is cluster k's flat indicator mask over the full basis columns
    and ``phi[k]`` its coefficients scattered into those columns (zero where
    not selected).  ``L`` is stacked subject-major like the dataset.
    """

    mask: np.ndarray
    phi: np.ndarray
    tau: np.ndarray
    V: np.ndarray
    C: np.ndarray
    beta: np.ndarray
    b: np.ndarray
    Psi: np.ndarray
    L: np.ndarray
    extra: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return self.mask.shape[0]

    @property
    def weights(self) -> np.ndarray:
        return stick_weights(self.V)

    def counts(self) -> np.ndarray:
        return np.bincount(self.C, minlength=self.K)

    def cluster(self, k: int, basis: BasisConfig) -> ClusterParams:
        return ClusterParams(split_mask(self.mask[k], basis), self.phi[k, self.mask[k]].copy(), float(self.tau[k]))

    def set_cluster(self, k: int, params: ClusterParams) -> None:
        m = np.concatenate(params.gamma_star)
        self.mask[k] = m
        self.phi[k] = 0.0
        self.phi[k, m] = params.phi_star
        self.tau[k] = params.tau

    def copy(self) -> "ChainState":
        return ChainState(*(getattr(self, f).copy() for f in
                            ("mask", "phi", "tau", "V", "C", "beta", "b", "Psi", "L")), dict(self.extra))

    def validate(self, y: np.ndarray | None = None, offsets_first=None) -> None:
        K = self.K
        if self.C.min() < 0 or self.C.max() >= K:
            raise ValidationError("allocations out of range")
        if self.V[-1] != 1.0:
            raise ValidationError("last stick must equal 1")
        if np.any(self.tau <= 0):
            raise ValidationError("tau must be positive")
        if offsets_first is not None and not self.mask[:, offsets_first].all():
            raise ValidationError("constant indicators must stay on")
        if np.any(self.phi[~self.mask] != 0):
            raise ValidationError("coefficients present for unselected columns")
        if self.Psi.size:
            try:
                np.linalg.cholesky(self.Psi)
            except np.linalg.LinAlgError:
                raise ValidationError("Psi is not positive definite") from None
        if y is not None and not np.array_equal(self.L > 0, y.astype(bool)):
            raise ValidationError("latent utilities disagree with responses")

    # snapshot ------------------------------------------------------------
    _FIELDS = ("mask", "phi", "tau", "V", "C", "beta", "b", "Psi", "L")

    def save(self, path, **meta) -> None:
        """Write a versioned binary snapshot (``.npz`` container)."""
        header = json.dumps({"format": "fvclust-chainstate", "version": SNAPSHOT_VERSION, **meta})
        buf = io.BytesIO()
        np.savez(buf, header=np.frombuffer(header.encode(), dtype=np.uint8),
                 **{f: getattr(self, f) for f in self._FIELDS})
        Path(path).write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path) -> tuple["ChainState", dict]:
        with np.load(path) as z:
            header = json.loads(z["header"].tobytes().decode())
            if header.get("format") != "fvclust-chainstate":
                raise ValidationError(f"{path} is not a chain snapshot")
            if header.get("version") != SNAPSHOT_VERSION:
                raise ValidationError(f"unsupported snapshot version {header.get('version')}")
            state = cls(*(z[f].copy() for f in cls._FIELDS))
        return state, header
