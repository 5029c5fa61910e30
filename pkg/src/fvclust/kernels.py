"""Kernel selection: the compiled extension when importable, else pure Python.

Set ``FVCLUST_PURE_PYTHON=1`` to force the fallback.
"""
from __future__ import annotations

import os

from . import _scan_py

BACKEND = "python"
scan_cluster = _scan_py.scan_cluster

if os.environ.get("FVCLUST_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _scan

        scan_cluster = _scan.scan_cluster
        BACKEND = "cython"
    except ImportError:  # extension not built
        pass
