"""Command-line entry points.

::

    tabf run-tabf --config toy_beta1 --out runs/toy1
    tabf run-unbiased --config toy_beta1 --out runs/toy1_plain
    tabf oracle-toy --beta 5 --out runs/oracle5
    tabf oracle-grid --run runs/toy1 --out runs/toy1_grid
    tabf check
    tabf report --run runs/toy1
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checks import run_checks
from .domain import Periodic
from .config import ConfigError, PRESETS, from_dict, resolve
from .estimators import histogram, node_surface, write_histogram_csv, write_surface_csv
from .gridfn import Grid1D, load_tensor_sum
from .occupation import KernelSpec, OccupationStore
from .oracle import grid_minimizer, toy_free_energy
from .orchestrator import RunDirExists, _prepare_dir, _sha256, content_hash, make_grids, run_tabf, run_unbiased

log = logging.getLogger("tabf")


def _load_cfg(args):
    cfg = resolve(args.config)
    if args.seed is not None:
        raw = cfg.to_dict()
        raw["seed"] = args.seed
        cfg = from_dict(raw)
    return cfg


def _progress(k, n, trace):
    if trace is None:
        log.info("segment %d/%d done", k, n)
    else:
        log.info("update %d/%d: J %.6g -> %.6g", k, n, trace[0], trace[-1])


def cmd_run(args, unbiased=False):
    cfg = _load_cfg(args)
    runner = run_unbiased if unbiased else run_tabf
    res = runner(cfg, run_dir=args.out, workers=args.workers, force=args.force, progress=_progress)
    print(json.dumps({"run_dir": str(args.out), "content_hash": res.manifest["content_hash"]}))
    return 0


def cmd_oracle_toy(args):
    out = _prepare_dir(args.out, args.force)
    g = Grid1D(args.n_nodes, Periodic(2 * np.pi))
    surf = toy_free_energy(args.beta, g.nodes, g.nodes, n_quad=args.n_quad)
    write_surface_csv(out / "toy_free_energy.csv", g.nodes, g.nodes, surf)
    manifest = {"kind": "oracle-toy", "beta": args.beta, "n_nodes": args.n_nodes, "n_quad": args.n_quad,
                "files": {"toy_free_energy.csv": _sha256(out / "toy_free_energy.csv")}}
    manifest["content_hash"] = content_hash(manifest)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_oracle_grid(args):
    run = Path(args.run)
    cfg = resolve(run / "config.json")
    store = OccupationStore.from_csv(run / "samples.csv")
    grids = make_grids(cfg)
    if len(grids) > 2:
        print("oracle-grid is limited to d <= 2", file=sys.stderr)
        return 2
    kernel = KernelSpec(cfg.kernel.mode, cfg.kernel.lam, cfg.kernel.eps)
    sol = grid_minimizer(store, kernel, grids)
    out = _prepare_dir(args.out, args.force)
    vals = sol.values - np.sum(sol.values * _node_weights(grids)) / np.sum(_node_weights(grids))
    if len(grids) == 2:
        write_surface_csv(out / "grid_minimizer.csv", grids[0].nodes, grids[1].nodes, vals)
    else:
        write_surface_csv(out / "grid_minimizer.csv", grids[0].nodes, [0.0], vals[:, None])
    manifest = {"kind": "oracle-grid", "source_run": str(run), "objective": sol.objective(),
                "files": {"grid_minimizer.csv": _sha256(out / "grid_minimizer.csv")}}
    manifest["content_hash"] = content_hash(manifest)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return 0


def _node_weights(grids):
    w = grids[0].weights
    for g in grids[1:]:
        w = np.multiply.outer(w, g.weights)
    return w


def cmd_check(args):
    results = run_checks()
    ok = True
    for r in results:
        print(f"[{'PASS' if r.passed else 'FAIL'}] {r.name}: {r.detail}")
        ok &= r.passed
    return 0 if ok else 1


def cmd_report(args):
    run = Path(args.run)
    cfg = resolve(run / "config.json")
    grids = make_grids(cfg)
    out = Path(args.out) if args.out else run / "report"
    out.mkdir(parents=True, exist_ok=True)
    store = OccupationStore.from_csv(run / "samples.csv")
    bins = cfg.output.hist_bins
    if len(grids) == 2:
        write_histogram_csv(out / "histogram.csv", histogram(store, [0, 1], bins, grids))
    for j in range(len(grids)):
        write_histogram_csv(out / f"histogram_z{j + 1}.csv", histogram(store, [j], bins, [grids[j]]))
    bias_manifest = run / "bias_manifest.json"
    if bias_manifest.exists() and len(grids) == 2:
        bias = load_tensor_sum(bias_manifest)
        write_surface_csv(out / "free_energy.csv", grids[0].nodes, grids[1].nodes, node_surface(bias))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tabf", description="Tensor adaptive biasing force runs and checks")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("run-tabf", "run-unbiased"):
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help=f"JSON file or preset ({', '.join(sorted(PRESETS))})")
        s.add_argument("--out", required=True, type=Path)
        s.add_argument("--seed", type=int, default=None, help="override the master seed")
        s.add_argument("--workers", type=int, default=1)
        s.add_argument("--force", action="store_true", help="reuse a non-empty run directory")
    s = sub.add_parser("oracle-toy")
    s.add_argument("--beta", type=float, required=True)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--n-nodes", type=int, default=30)
    s.add_argument("--n-quad", type=int, default=2000)
    s.add_argument("--force", action="store_true")
    s = sub.add_parser("oracle-grid")
    s.add_argument("--run", required=True, type=Path, help="run directory with config.json and samples.csv")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--force", action="store_true")
    sub.add_parser("check")
    s = sub.add_parser("report")
    s.add_argument("--run", required=True, type=Path)
    s.add_argument("--out", type=Path, default=None)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        if args.command == "run-tabf":
            return cmd_run(args)
        if args.command == "run-unbiased":
            return cmd_run(args, unbiased=True)
        if args.command == "oracle-toy":
            return cmd_oracle_toy(args)
        if args.command == "oracle-grid":
            return cmd_oracle_grid(args)
        if args.command == "check":
            return cmd_check(args)
        if args.command == "report":
            return cmd_report(args)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except RunDirExists as exc:
        print(str(exc), file=sys.stderr)
        return 3
    return 1


if __name__ == "__main__":
    sys.exit(main())
