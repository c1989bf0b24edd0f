"""Alternating sampling segments and bias updates.

Every update ``k`` runs all replicas for ``t_up`` with the bias frozen at
``A_{k-1}``, appends the recorded samples to the cumulative occupation
history and refits the bias by appending ``m`` greedy rank-one terms to
``A_{k-1}``.  Optionally a separable baseline (binned mean forces
integrated per coordinate) is refreshed before the greedy step and the
tensor terms then correct it.
"""

from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .domain import ExtendedState, PolymerRing
from .estimators import (
    free_energy_slice,
    histogram,
    node_surface,
    write_histogram_csv,
    write_surface_csv,
)
from .greedy import ALSConfig, greedy_run, write_trace
from .gridfn import Grid1D, PLFunction, TensorSum, bias_evaluator, save_tensor_sum, value_and_grad
from .occupation import KernelSpec, OccupationStore, merge
from .sampler import Ensemble, IntegratorConfig, run_segment


class RunDirExists(FileExistsError):
    pass


# ---------------------------------------------------------------------------
# separable baseline


def gabf_update(store: OccupationStore, grids, threshold: float = 20.0) -> list[PLFunction]:
    """Per-coordinate free energies from hat-binned mean forces.

    For coordinate ``j`` the force ``g_j`` and the sample weight are spread
    onto the grid nodes with hat-function weights.  Nodes whose accumulated
    weight (in units of the mean sample weight) does not exceed
    ``threshold`` get mean force 0.  The piecewise-linear mean force is then
    integrated exactly; on a periodic coordinate the linear drift is removed
    so the result is single valued.
    """
    out = []
    n = len(store)
    mean_w = store.total_weight / n if n else 1.0
    for j, g in enumerate(grids):
        m = g.n_nodes
        if n == 0:
            out.append(PLFunction(g, np.zeros(m)))
            continue
        cell, t = g.locate(store.z[:, j])
        left, right = g.cell_nodes
        w = store.w
        alpha = (np.bincount(left[cell], weights=w * store.g[:, j] * (1 - t), minlength=m)
                 + np.bincount(right[cell], weights=w * store.g[:, j] * t, minlength=m))
        beta = (np.bincount(left[cell], weights=w * (1 - t), minlength=m)
                + np.bincount(right[cell], weights=w * t, minlength=m))
        ok = beta / mean_w > threshold
        gamma = np.where(ok, alpha / np.where(ok, beta, 1.0), 0.0)
        # exact integral of the PL mean force, node by node
        incr = 0.5 * g.h * (gamma[left] + gamma[right])
        cum = np.concatenate([[0.0], np.cumsum(incr)])
        if g.periodic:
            total = cum[-1]
            vals = cum[:m] - (g.nodes - g.lo) * total / g.size
        else:
            vals = cum
        out.append(PLFunction(g, vals))
    return out


# ---------------------------------------------------------------------------
# run outputs


@dataclass
class RunOutputs:
    bias: TensorSum
    traces: list
    samples: OccupationStore
    schedule: list
    manifest: dict
    run_dir: Path | None
    steps_per_segment: int
    grids: tuple
    sweeps: list = field(default_factory=list)


def make_grids(cfg: RunConfig, pot=None) -> tuple:
    pot = cfg.build_potential() if pot is None else pot
    box = pot.box()
    return tuple(Grid1D(cfg.n_nodes, box.z_domain) for _ in range(box.dim_z))


def initial_state(cfg: RunConfig, pot) -> ExtendedState:
    box = pot.box()
    if isinstance(pot, PolymerRing):
        s = pot.initial_state(np.random.default_rng([cfg.seed, 1]))
    else:
        s = ExtendedState(np.zeros(box.dim_q), np.zeros(box.dim_z))
    if cfg.initial_z is not None:
        s = ExtendedState(s.q, np.asarray(cfg.initial_z, dtype=float))
    return s


def _prepare_dir(run_dir, force: bool):
    if run_dir is None:
        return None
    run_dir = Path(run_dir)
    if run_dir.exists() and any(run_dir.iterdir()) and not force:
        raise RunDirExists(f"{run_dir} exists and is not empty; pass force=True (--force) to reuse it")
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


_VOLATILE = ("wall_time", "wall_time_total", "content_hash", "workers", "run_dir")


def _strip(obj):
    if isinstance(obj, dict):
        return {k: _strip(v) for k, v in obj.items() if k not in _VOLATILE}
    if isinstance(obj, list):
        return [_strip(v) for v in obj]
    return obj


def content_hash(manifest: dict) -> str:
    """Hash of the manifest without wall times or worker count."""
    text = json.dumps(_strip(manifest), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


class _Sampler:
    """Replica groups advanced by up to ``workers`` threads."""

    def __init__(self, pot, cfg: RunConfig, workers: int):
        icfg = IntegratorConfig(cfg.integrator.dt, cfg.integrator.record_stride,
                                cfg.integrator.beta, cfg.seed)
        full = Ensemble.from_state(pot, initial_state(cfg, pot), cfg.n_replicas, icfg)
        self.workers = max(1, min(int(workers), cfg.n_replicas))
        groups = np.array_split(np.arange(cfg.n_replicas), self.workers)
        self.ens = [Ensemble(pot, full.q[g], full.z[g], icfg, full.ids[g],
                             rngs=[full.rngs[i] for i in g]) for g in groups]
        self.d = pot.box().dim_z

    def segment(self, bias, n_steps, weight_bias):
        stores = [OccupationStore(self.d) for _ in self.ens]

        def job(k):
            run_segment(self.ens[k], bias, n_steps, stores[k], weight_bias=weight_bias)

        if self.workers == 1:
            job(0)
        else:
            with ThreadPoolExecutor(self.workers) as ex:
                list(ex.map(job, range(self.workers)))
        return merge(stores)


def _write_outputs(run_dir: Path, cfg: RunConfig, res: RunOutputs) -> dict:
    files = {}
    (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    files["config.json"] = None
    save_tensor_sum(res.bias, run_dir, stem="bias")
    files["bias_manifest.json"] = files["bias_factors.csv"] = None
    if res.traces:
        with open(run_dir / "objective_trace.csv", "w") as fh:
            fh.write("update,term,objective,sweeps\n")
            for k, (tr, sw) in enumerate(zip(res.traces, res.sweeps)):
                for n, v in enumerate(tr):
                    fh.write(f"{k + 1},{n},{float(v)!r},{sw[n - 1] if n else 0}\n")
        files["objective_trace.csv"] = None
    if cfg.output.write_samples:
        res.samples.to_csv(run_dir / "samples.csv")
        files["samples.csv"] = None
    bins = cfg.output.hist_bins
    d = len(res.grids)
    if d == 2:
        write_histogram_csv(run_dir / "histogram.csv", histogram(res.samples, [0, 1], bins, res.grids))
        files["histogram.csv"] = None
    for j in range(d):
        name = f"histogram_z{j + 1}.csv"
        write_histogram_csv(run_dir / name, histogram(res.samples, [j], bins, [res.grids[j]]))
        files[name] = None
    if res.bias.n_terms or res.bias.baseline is not None:
        if d == 2:
            g1, g2 = res.grids
            write_surface_csv(run_dir / "free_energy.csv", g1.nodes, g2.nodes, node_surface(res.bias))
            files["free_energy.csv"] = None
        elif d >= 3:
            g1, g2 = res.grids[:2]
            lo = res.grids[2].lo
            hi = lo + res.grids[2].size
            for label, val in (("lo", 0.0 if lo <= 0.0 <= hi else lo),
                               ("mid", 0.5 if lo <= 0.5 <= hi else lo + 0.5 * (hi - lo)),
                               ("hi", 1.0 if lo <= 1.0 <= hi else hi)):
                fixed = {j: val for j in range(2, d)}
                for tag, base in (("full", True), ("coupling", False)):
                    s = free_energy_slice(res.bias, (0, 1), fixed, (g1, g2), include_baseline=base)
                    name = f"slice_{label}_{tag}.csv"
                    write_surface_csv(run_dir / name, g1.nodes, g2.nodes, s)
                    files[name] = None
    return {k: _sha256(run_dir / k) for k in files}


def _finish(run_dir, cfg, res: RunOutputs, manifest: dict):
    if run_dir is not None:
        manifest["files"] = _write_outputs(run_dir, cfg, res)
    manifest["content_hash"] = content_hash(manifest)
    if run_dir is not None:
        (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    res.manifest = manifest
    return res


def _failure(run_dir, manifest, exc):
    manifest["status"] = "failed"
    manifest["error"] = f"{type(exc).__name__}: {exc}"
    if run_dir is not None:
        (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# runners


def run_tabf(cfg: RunConfig, run_dir=None, workers: int = 1, force: bool = False,
             progress=None) -> RunOutputs:
    """Run the adaptive scheme described by ``cfg``; outputs go to ``run_dir`` if given."""
    run_dir = _prepare_dir(run_dir, force)
    pot = cfg.build_potential()
    grids = make_grids(cfg, pot)
    d = len(grids)
    sched = cfg.schedule
    kernel = KernelSpec(cfg.kernel.mode, cfg.kernel.lam, cfg.kernel.eps)
    kernel.check_well_posed()
    als = ALSConfig(cfg.als.max_sweeps, cfg.als.rel_tol, init_seed=cfg.seed)
    beta = cfg.integrator.beta
    steps = cfg.steps_per_update
    manifest = {"kind": "tabf", "status": "running", "config": cfg.to_dict(), "seed": cfg.seed,
                "workers": workers, "updates": []}
    sampler = _Sampler(pot, cfg, workers)
    history = OccupationStore(d)
    bias = TensorSum(grids)
    tgrad = np.zeros((0, d))  # gradient of the tensor part at the history samples
    traces, sweeps, schedule = [], [], []
    t_start = time.perf_counter()
    try:
        for k in range(sched.n_up):
            t0 = time.perf_counter()
            schedule.append((bias.n_terms, bias.baseline))
            wb = bias if sched.weight_mode == "reweighted" else None
            seg = sampler.segment(bias, steps, wb)
            history.extend(seg)
            tensor = bias.without_baseline()
            if tensor.n_terms:
                tg_new = bias_evaluator(tensor)(seg.z)[1]
            else:
                tg_new = np.zeros((len(seg), d))
            tgrad = np.concatenate([tgrad, tg_new])
            if sched.gabf_baseline:
                base = [b.values for b in gabf_update(history, grids, sched.gabf_threshold)]
                bias = bias.with_baseline(base)
            bgrad = (value_and_grad(bias.baseline_only(), history.z)[1]
                     if bias.baseline is not None else 0.0)
            res = greedy_run(history, kernel, bias, sched.m_per_update, als,
                             f0_grad=tgrad + bgrad if kernel.mode == "grid_delta" else None)
            trace = [float(v) for v in res.trace]
            if any(b > a + 1e-12 * abs(trace[0]) for a, b in zip(trace, trace[1:])):
                raise RuntimeError(f"objective increased during update {k + 1}")
            bias = res.bias
            if res.grad_at_samples is not None:
                tgrad = res.grad_at_samples - bgrad
            else:
                tgrad = value_and_grad(bias.without_baseline(), history.z)[1]
            traces.append(trace)
            sweeps.append(res.sweeps)
            manifest["updates"].append({
                "update": k + 1, "n_samples": len(history), "n_terms": bias.n_terms,
                "objective_initial": trace[0], "objective_final": trace[-1],
                "wall_time": time.perf_counter() - t0,
            })
            if progress is not None:
                progress(k + 1, sched.n_up, trace)
    except Exception as exc:
        _failure(run_dir, manifest, exc)
        raise
    manifest["status"] = "ok"
    manifest["n_terms"] = bias.n_terms
    manifest["memory_values"] = bias.memory_values()
    manifest["wall_time_total"] = time.perf_counter() - t_start
    out = RunOutputs(bias, traces, history, schedule, {}, run_dir, steps, grids, sweeps)
    return _finish(run_dir, cfg, out, manifest)


def run_unbiased(cfg: RunConfig, run_dir=None, workers: int = 1, force: bool = False,
                 progress=None) -> RunOutputs:
    """Same sampling schedule with the bias frozen at zero."""
    run_dir = _prepare_dir(run_dir, force)
    pot = cfg.build_potential()
    grids = make_grids(cfg, pot)
    d = len(grids)
    steps = cfg.steps_per_update
    manifest = {"kind": "unbiased", "status": "running", "config": cfg.to_dict(), "seed": cfg.seed,
                "workers": workers, "updates": []}
    sampler = _Sampler(pot, cfg, workers)
    history = OccupationStore(d)
    bias = TensorSum(grids)
    t_start = time.perf_counter()
    try:
        for k in range(cfg.schedule.n_up):
            t0 = time.perf_counter()
            history.extend(sampler.segment(None, steps, None))
            manifest["updates"].append({"update": k + 1, "n_samples": len(history),
                                        "wall_time": time.perf_counter() - t0})
            if progress is not None:
                progress(k + 1, cfg.schedule.n_up, None)
    except Exception as exc:
        _failure(run_dir, manifest, exc)
        raise
    manifest["status"] = "ok"
    manifest["wall_time_total"] = time.perf_counter() - t_start
    out = RunOutputs(bias, [], history, [(0, None)] * cfg.schedule.n_up, {}, run_dir, steps, grids)
    return _finish(run_dir, cfg, out, manifest)
