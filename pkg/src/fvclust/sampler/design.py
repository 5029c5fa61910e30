"""Data-side quantities that stay fixed for the whole run."""
from __future__ import annotations

import numpy as np

from ..basis import BasisConfig, full_design
from ..data import LongitudinalDataset


class ModelData:
    """Stacked design arrays and per-subject cross-products.

    ``F`` holds every basis column of every covariate (already multiplied by
    the matching W column) for every observation; a cluster's design is a
    column subset of it, and ``R_full = F'F`` makes every g-prior Gram a
    sub-block lookup.
    """

    def __init__(self, dataset: LongitudinalDataset, basis: BasisConfig):
        basis.validate_for(dataset)
        st = dataset.stacked
        self.dataset = dataset
        self.basis = basis
        self.N = dataset.N
        self.p, self.q, self.r = dataset.dims
        self.offsets = dataset.offsets
        self.starts = self.offsets[:-1]
        self.n_obs = int(self.offsets[-1])
        self.subject = st["subject"]
        self.y = st["y"].astype(bool)
        self.t = st["t"]
        self.X = st["X"]
        self.Z = st["Z"]
        self.F = np.ascontiguousarray(full_design(st["t"], st["W"], basis))
        self.P = self.F.shape[1]
        self.R_full = self.F.T @ self.F
        self.XtX = self.X.T @ self.X
        # per-subject F_i' Z_i and Z_i' Z_i
        self.H = self.subject_sum(self.F[:, :, None] * self.Z[:, None, :])
        self.ZtZ = self.subject_sum(self.Z[:, :, None] * self.Z[:, None, :])
        self.owner = basis.column_owner().astype(np.int64)
        self.is_const = np.zeros(self.P, dtype=np.uint8)
        self.is_const[basis.offsets[:-1]] = 1
        self.const_pos = basis.offsets[:-1].astype(np.int64)
        self.positions = basis.selectable()
        self.M = np.asarray(basis.M, dtype=np.int64)

    def subject_sum(self, a: np.ndarray) -> np.ndarray:
        """Sum rows of a stacked array within each subject."""
        return np.add.reduceat(a, self.starts, axis=0)

    def per_obs(self, a: np.ndarray) -> np.ndarray:
        """Broadcast a per-subject array to observations."""
        return a[self.subject]

    def Zb(self, b: np.ndarray) -> np.ndarray:
        if self.r == 0:
            return np.zeros(self.n_obs)
        return np.einsum("ij,ij->i", self.Z, b[self.subject])

    def Xbeta(self, beta: np.ndarray) -> np.ndarray:
        return self.X @ beta if self.q else np.zeros(self.n_obs)
