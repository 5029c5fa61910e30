"""Command-line front end: ``fvclust {simulate,fit,diagnose,summarize,replicate}``.

Every subcommand reads one JSON config (``--config``); flags override the
matching config entries.  Results go to the output directory together with a
``manifest.json`` that is sufficient to reproduce them.  Logs go to standard
error only.

Exit codes: 0 success, 1 invalid input or config, 2 numerical failure,
3 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .basis import BasisConfig, default_knots
from .data import (ColumnSchema, LongitudinalDataset, SimulationSpec, SimulationTruth, default_schema, load_csv, simulate_dataset,
                   write_csv)
from .config import RunConfig
from .diagnostics import ChainCollection, diagnose, relabel_ecr
from .errors import NumericalError, ValidationError
from .kernels import BACKEND as KERNEL_BACKEND
from .pipeline import analyze, default_workers, fit_chains, run_replicates
from .state import Hyperparams
from .summary import write_summary

log = logging.getLogger("fvclust")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3
#: config keys that do not influence results and are left out of manifests
NON_RESULT_KEYS = ("output", "threads")


# ---------------------------------------------------------------------------
# helpers


def _manifest(cfg: RunConfig, command: str, **extra) -> dict:
    conf = {k: v for k, v in cfg.to_dict().items() if k not in NON_RESULT_KEYS}
    man = {"fvclust_version": __version__, "command": command, "config": conf}
    man.update(extra)
    return man


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _data_seed(cfg: RunConfig) -> int:
    d = cfg.raw["data"]
    return int(d.get("seed", cfg.sampler["seed"]))


def load_data(cfg: RunConfig):
    """Dataset and (for simulated data) its truth."""
    d = cfg.raw["data"]
    tr = tuple(d["time_range"]) if "time_range" in d else None
    if "simulate" in d:
        spec = SimulationSpec.from_dict(d["simulate"])
        data, truth = simulate_dataset(spec, _data_seed(cfg))
        if tr is not None:
            data = LongitudinalDataset.from_subjects(data.subjects, tr)
        return data, truth
    schema = d["schema"]
    if isinstance(schema, str):
        schema = ColumnSchema.load(cfg.path(schema))
    return load_csv(cfg.path(d["csv"]), schema, tr), None


def make_basis(cfg: RunConfig, data) -> BasisConfig:
    b = cfg.raw["basis"]
    if "knots" in b:
        basis = BasisConfig(tuple(tuple(float(w) for w in ks) for ks in b["knots"]))
        basis.validate_for(data)
        return basis
    return default_knots(data, int(b["n_knots"]))


def make_hyper(cfg: RunConfig, data) -> Hyperparams:
    p, q, r = data.dims
    return Hyperparams.from_dict(cfg.raw["hyper"], data.N, q, r)


def _workers(cfg: RunConfig) -> int:
    return int(cfg.raw["threads"]) if cfg.raw["threads"] is not None else default_workers()


def _chain_paths(out: Path) -> list[Path]:
    paths = sorted((out / "chains").glob("chain*.draws"), key=lambda p: int(p.stem[5:]))
    if not paths:
        raise FileNotFoundError(f"no draw stores under {out / 'chains'}; run 'fit' first")
    return paths


def _load_run(out: Path):
    coll = ChainCollection.load(_chain_paths(out))
    man = coll.manifest
    basis = BasisConfig.from_dict(man["basis"])
    time_range = tuple(man["time_range"])
    truth = None
    if (out / "truth.json").exists():
        truth = SimulationTruth.from_dict(json.loads((out / "truth.json").read_text()))
    return coll, basis, time_range, truth


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(cfg: RunConfig) -> int:
    d = cfg.raw["data"]
    if "simulate" not in d:
        raise ValidationError("'simulate' needs a data.simulate section")
    data, truth = load_data(cfg)
    out = cfg.output
    out.mkdir(parents=True, exist_ok=True)
    schema = default_schema(data.dims)
    write_csv(data, out / "data.csv", schema)
    _write_json(out / "schema.json", schema.to_dict())
    _write_json(out / "truth.json", truth.to_dict())
    _write_json(out / "manifest.json", _manifest(cfg, "simulate", data_seed=_data_seed(cfg), N=data.N))
    log.info("simulated %d subjects (%d observations) into %s", data.N, int(data.offsets[-1]), out)
    return EXIT_OK


def cmd_fit(cfg: RunConfig) -> int:
    data, truth = load_data(cfg)
    basis = make_basis(cfg, data)
    hyper = make_hyper(cfg, data)
    s = cfg.sampler
    out = cfg.output
    out.mkdir(parents=True, exist_ok=True)
    man = {"time_range": list(data.time_range), "config": _manifest(cfg, "fit")["config"]}
    log.info("fitting %d chain(s) x %d sweeps (backend %s, kernel %s)", s["n_chains"], s["n_sweeps"],
             s["backend"], KERNEL_BACKEND)
    stores = fit_chains(data, hyper, basis, s["n_chains"], s["n_sweeps"], s["seed"], s["backend"],
                        out / "chains", _workers(cfg), record_b=bool(s["record_b"]), manifest=man,
                        checkpoint_every=int(s["checkpoint_every"]))
    _write_json(out / "basis.json", basis.to_dict())
    if truth is not None:
        _write_json(out / "truth.json", truth.to_dict())
    chains = [{"chain": c + 1, "file": f"chains/chain{c + 1}.draws", "records": len(st),
               "final_logpost": float(st.records["logpost"][-1])} for c, st in enumerate(stores)]
    _write_json(out / "manifest.json", _manifest(cfg, "fit", chains=chains, time_range=list(data.time_range),
                                                 N=data.N, hyper=hyper.to_dict()))
    return EXIT_OK


def cmd_diagnose(cfg: RunConfig) -> int:
    out = cfg.output
    coll, basis, time_range, _ = _load_run(out)
    dg = cfg.diagnostics
    relabeled = relabel_ecr(coll, burn_fraction=dg["burn_fraction"])
    report = diagnose(relabeled, basis, time_range, dg["monitor_points"], dg["burn_fraction"],
                      threshold=dg["threshold"])
    report.write(out)
    log.info("max R^1/2 = %.4f over %d quantities", report.max_rhat, len(report.rows))
    return EXIT_OK


def cmd_summarize(cfg: RunConfig) -> int:
    out = cfg.output
    coll, basis, time_range, truth = _load_run(out)
    dg = cfg.diagnostics
    res = analyze(coll.stores, basis, time_range, dg["burn_fraction"], dg["thin"],
                  cfg.raw["summary"]["grid_points"], dg["monitor_points"], truth)
    extra = {"n_draws": len(res.samples), "pivot": {"chain": res.relabeled.pivot[0] + 1,
                                                    "record": res.relabeled.pivot[1]}}
    if res.coverage is not None:
        extra["mean_coverage"] = float(res.coverage.mean())
    write_summary(out, res.curves, res.clustering, res.table, extra)
    if res.coverage is not None:
        _write_coverage(out / "coverage.csv", res.curves.grid, res.coverage[None].astype(float).mean(axis=0))
    if res.diagnostics is not None:
        res.diagnostics.write(out)
    log.info("summarized %d draws", len(res.samples))
    return EXIT_OK


def _write_coverage(path: Path, grid, cov: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true_cluster", "covariate", "t", "coverage"])
        for j in range(cov.shape[0]):
            for l in range(cov.shape[1]):
                for g, t in enumerate(grid):
                    w.writerow([j + 1, l + 1, repr(float(t)), repr(float(cov[j, l, g]))])


def cmd_replicate(cfg: RunConfig) -> int:
    d = cfg.raw["data"]
    if "simulate" not in d:
        raise ValidationError("'replicate' needs a data.simulate section")
    spec = SimulationSpec.from_dict(d["simulate"])
    rep = cfg.raw["replicate"]
    s, dg = cfg.sampler, cfg.diagnostics
    seed = int(rep["seed"]) if rep["seed"] is not None else int(s["seed"])
    nus = rep["nu_values"] or [cfg.raw["hyper"].get("nu", 1.0)]
    out = cfg.output
    grid = np.linspace(spec.time_range[0], spec.time_range[1], cfg.raw["summary"]["grid_points"])
    overview = []
    for nu in nus:
        hyper = dict(cfg.raw["hyper"], nu=float(nu))
        results = run_replicates(spec, rep["n_replicates"], seed, s["n_chains"], s["n_sweeps"],
                                 dg["burn_fraction"], dg["thin"], hyper, _workers(cfg),
                                 n_knots=int(cfg.raw["basis"].get("n_knots", 30)), backend=s["backend"],
                                 grid_points=cfg.raw["summary"]["grid_points"],
                                 monitor_points=dg["monitor_points"])
        sub = out / (f"nu={float(nu):g}" if rep["nu_values"] else "replicates")
        cov = np.stack([r.coverage for r in results]).mean(axis=0)
        sub.mkdir(parents=True, exist_ok=True)
        _write_coverage(sub / "coverage.csv", grid, cov)
        _write_json(sub / "replicates.json", [r.to_dict() for r in results])
        acc = [r.accuracy for r in results]
        with open(sub / "metrics.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["replicate", "accuracy", "mean_f1", "mean_coverage", "max_rhat"])
            for r in results:
                w.writerow([r.index + 1, repr(r.accuracy), repr(float(np.mean(r.f1))),
                            repr(float(r.coverage.mean())), repr(r.max_rhat)])
        overview.append({"nu": float(nu), "mean_accuracy": float(np.mean(acc)),
                         "mean_coverage": float(cov.mean()), "n_replicates": len(results)})
        log.info("nu=%g: mean accuracy %.3f, mean coverage %.3f", nu, np.mean(acc), cov.mean())
    _write_json(out / "replicate_summary.json", overview)
    _write_json(out / "manifest.json", _manifest(cfg, "replicate", replicate_seed=seed))
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "diagnose": cmd_diagnose, "summarize": cmd_summarize,
            "replicate": cmd_replicate}


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fvclust", description="Bayesian functional clustering of binary longitudinal data")
    ap.add_argument("--version", action="version", version=f"fvclust {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=(fn.__doc__ or name).strip().splitlines()[0] if fn.__doc__ else None)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed", type=int, help="sampler seed (overrides sampler.seed)")
        p.add_argument("--chains", type=int, help="number of chains")
        p.add_argument("--sweeps", type=int, help="sweeps per chain")
        p.add_argument("--backend", choices=("pcg", "gibbs"), help="sampler backend")
        p.add_argument("--out", help="output directory")
        p.add_argument("--threads", type=int, help="worker processes (default: $FVCLUST_THREADS or 1)")
        p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config).override(seed=args.seed, chains=args.chains, sweeps=args.sweeps,
                                                   backend=args.backend, out=args.out, threads=args.threads)
        return COMMANDS[args.command](cfg)
    except (ValidationError, ValueError, KeyError) as exc:
        log.error("invalid input: %s", exc)
        return EXIT_VALIDATION
    except (NumericalError, ArithmeticError, np.linalg.LinAlgError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
