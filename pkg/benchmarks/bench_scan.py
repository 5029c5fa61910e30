"""Compiled vs pure-Python indicator scan.

Builds cluster statistics from a short run on simulated data, then times one
full indicator scan of one cluster with each kernel on identical inputs and
checks that both make the same decisions.

    python3 benchmarks/bench_scan.py [--subjects 150] [--knots 30] [--repeats 20]
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from fvclust import _scan_py
from fvclust.basis import default_knots
from fvclust.data import SimulationSpec, simulate_dataset
from fvclust.sampler import ModelData, run_chain, steps
from fvclust.state import Hyperparams

try:
    from fvclust import _scan
except ImportError:  # extension not built
    _scan = None


def scan_inputs(n_per_cluster: int, n_knots: int, seed: int):
    ds, _ = simulate_dataset(SimulationSpec(cluster_sizes=(n_per_cluster,) * 3), seed)
    basis = default_knots(ds, n_knots)
    data = ModelData(ds, basis)
    hyper = Hyperparams.default(ds.N, 2, 2)
    store = run_chain(data, hyper, basis, n_sweeps=50, seed=seed)
    state = store.final_state
    stats = steps.pcg_stats(state, data)
    k = max(stats, key=lambda j: stats[j].m)
    st = stats[k]
    U = np.random.default_rng(seed).random(data.positions.size)
    args = (st.Xi, st.xi, data.R_full, state.mask[k].astype(np.uint8), data.positions, data.owner,
            data.is_const, data.M, hyper.a, hyper.b, float(state.tau[k]), U, True)
    return args, data.P


def time_kernel(fn, args, repeats: int) -> tuple[float, np.ndarray, int]:
    best = np.inf
    for _ in range(repeats):
        mask = args[3].copy()
        t0 = time.perf_counter()
        flips = fn(*args[:3], mask, *args[4:])
        best = min(best, time.perf_counter() - t0)
    return best, mask, flips


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--subjects", type=int, default=150, help="subjects per simulated cluster")
    ap.add_argument("--knots", type=int, default=30)
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args(argv)

    inputs, P = scan_inputs(args.subjects, args.knots, args.seed)
    print(f"scan of one cluster: {inputs[4].size} indicators, {P} basis columns")
    t_py, m_py, f_py = time_kernel(_scan_py.scan_cluster, inputs, max(3, args.repeats // 5))
    print(f"  pure Python : {1e3 * t_py:9.3f} ms  ({f_py} flips)")
    if _scan is None:
        print("  compiled    : not built")
        return
    t_cy, m_cy, f_cy = time_kernel(_scan.scan_cluster, inputs, args.repeats)
    print(f"  compiled    : {1e3 * t_cy:9.3f} ms  ({f_cy} flips)")
    print(f"  speedup     : {t_py / t_cy:9.1f}x   identical decisions: {bool(np.array_equal(m_py, m_cy))}")


if __name__ == "__main__":
    main()
