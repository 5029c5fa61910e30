"""Append-only binary draw store.

Layout::

    b"FVCDRAWS" | uint32 version | uint32 header length | JSON header | records

The header carries the dimensions, the numpy record dtype description and the
run manifest.  Records are fixed-size, one per recorded sweep (sweep 0 is the
initial state), so a store can be appended to and read back with
``numpy.frombuffer``.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ValidationError

MAGIC = b"FVCDRAWS"
VERSION = 1


def record_dtype(K: int, P: int, N: int, q: int, r: int, record_b: bool = False) -> np.dtype:
    fields = [("sweep", "<i8"), ("logpost", "<f8"), ("mask", "u1", (K, P)), ("phi", "<f8", (K, P)),
              ("tau", "<f8", (K,)), ("V", "<f8", (K,)), ("C", "<i4", (N,)), ("beta", "<f8", (q,)),
              ("Psi", "<f8", (r, r))]
    if record_b:
        fields.append(("b", "<f8", (N, r)))
    return np.dtype(fields)


class DrawStore:
    """Recorded sweeps of one chain, optionally mirrored to a file as they arrive."""

    def __init__(self, dims: dict, manifest: dict | None = None, path=None, _records=None):
        self.dims = dict(dims)
        self.manifest = dict(manifest or {})
        self.dtype = record_dtype(**self.dims)
        self._chunks = [] if _records is None else [_records]
        self._cache = None
        self.path = Path(path) if path is not None else None
        self._fh = None
        if self.path is not None and _records is None:
            self._fh = open(self.path, "wb")
            self._fh.write(self._header_bytes())
            self._fh.flush()

    def _header_bytes(self) -> bytes:
        header = json.dumps({"dims": self.dims, "dtype": self.dtype.descr, "manifest": self.manifest},
                            sort_keys=True).encode()
        return MAGIC + struct.pack("<II", VERSION, len(header)) + header

    # writing -------------------------------------------------------------
    def append(self, state, sweep: int, logpost: float) -> None:
        rec = np.zeros(1, dtype=self.dtype)
        rec["sweep"] = sweep
        rec["logpost"] = logpost
        rec["mask"] = state.mask
        rec["phi"] = state.phi
        rec["tau"] = state.tau
        rec["V"] = state.V
        rec["C"] = state.C
        rec["beta"] = state.beta
        rec["Psi"] = state.Psi
        if self.dims.get("record_b"):
            rec["b"] = state.b
        self._chunks.append(rec)
        self._cache = None
        if self._fh is not None:
            self._fh.write(rec.tobytes())
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self._header_bytes())
            fh.write(self.records.tobytes())

    # reading -------------------------------------------------------------
    @property
    def records(self) -> np.ndarray:
        if self._cache is None:
            self._cache = (np.concatenate(self._chunks) if self._chunks
                           else np.zeros(0, dtype=self.dtype))
            self._chunks = [self._cache]
        return self._cache

    def __len__(self) -> int:
        return len(self.records)

    @classmethod
    def load(cls, path) -> "DrawStore":
        raw = Path(path).read_bytes()
        if raw[:8] != MAGIC:
            raise ValidationError(f"{path} is not a draw store")
        version, hlen = struct.unpack("<II", raw[8:16])
        if version != VERSION:
            raise ValidationError(f"{path}: unsupported draw-store version {version}")
        header = json.loads(raw[16:16 + hlen])
        dims = header["dims"]
        dtype = record_dtype(**dims)
        body = raw[16 + hlen:]
        n = len(body) // dtype.itemsize  # a torn trailing record is ignored
        recs = np.frombuffer(body[:n * dtype.itemsize], dtype=dtype).copy()
        store = cls(dims, header["manifest"], _records=recs)
        store.path = Path(path)
        store._data_offset = 16 + hlen
        return store

    @classmethod
    def open_append(cls, path) -> "DrawStore":
        """Reopen a store file for appending (resume)."""
        store = cls.load(path)
        fh = open(store.path, "r+b")
        fh.truncate(store._data_offset + len(store.records) * store.dtype.itemsize)
        fh.seek(0, 2)
        store._fh = fh
        return store
