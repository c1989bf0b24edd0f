"""Small invariant checks on seeded synthetic instances (the ``check`` subcommand)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .domain import (
    ExtendedState,
    FourierProfile,
    PolymerRing,
    SeparableTest,
    ToyModel3D,
    Periodic,
    fd_check,
)
from .greedy import ALSConfig, directional_derivative, greedy_run, increment_norm_sq
from .gridfn import Grid1D, TensorSum
from .occupation import CellMoments, KernelSpec, OccupationStore, VonMises1D
from .oracle import grid_minimizer, tabulate
from .orchestrator import gabf_update


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def synthetic_store(d: int, n: int, seed: int, length: float = 2 * math.pi) -> OccupationStore:
    """Samples of a smooth coupled force field with random positive weights."""
    rng = np.random.default_rng(seed)
    z = rng.uniform(0, length, (n, d))
    k = 2 * math.pi / length
    g = np.empty((n, d))
    for j in range(d):
        nxt = z[:, (j + 1) % d]
        g[:, j] = np.sin(k * z[:, j]) * (1 + 0.5 * np.cos(k * nxt)) + 0.3 * np.cos(2 * k * z[:, j])
    g += 0.2 * rng.standard_normal((n, d))
    st = OccupationStore(d, capacity=n)
    st.record_batch(z, g, rng.uniform(0.5, 1.5, n), rng.integers(0, 4, n), np.arange(n))
    return st


def check_gradients(n_states: int = 10, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    toy = ToyModel3D()
    for _ in range(n_states):
        s = ExtendedState(rng.uniform(0, 2 * math.pi, 1), rng.uniform(0, 2 * math.pi, 2))
        worst = max(worst, fd_check(toy, s))
    for form in ("continuous", "literal"):
        pol = PolymerRing(12, 3, wca_form=form)
        for _ in range(n_states):
            s0 = pol.initial_state(rng, jitter=0.2)
            s = ExtendedState(s0.q, rng.uniform(-0.2, 1.2, 3))
            worst = max(worst, fd_check(pol, s))
    sep = SeparableTest((FourierProfile((0, 1.0), (0, 0.3)), FourierProfile((0, 0, 0.6), (0, 0.5))))
    for _ in range(n_states):
        s = ExtendedState(rng.uniform(0, 1, 2), rng.uniform(0, 1, 2))
        worst = max(worst, fd_check(sep, s))
    return CheckResult("gradient vs finite differences", worst < 1e-6, f"max rel err {worst:.2e}")


def check_greedy(seed: int = 1) -> CheckResult:
    d = 3
    grids = [Grid1D(12, Periodic(2 * math.pi)) for _ in range(d)]
    st = synthetic_store(d, 800, seed)
    kernel = KernelSpec("grid_delta", 1e-3)
    res = greedy_run(st, kernel, TensorSum(grids), 6, ALSConfig(init_seed=seed))
    tr = np.array(res.trace)
    mono = bool(np.all(np.diff(tr) <= 1e-12 * abs(tr[0])))
    f = TensorSum(grids)
    ls = 0.0
    zm = 0.0
    for term in res.terms:
        f = f.append(term)
        scale = math.sqrt(max(increment_norm_sq(term, st, kernel), 1e-300) * tr[0])
        ls = max(ls, abs(directional_derivative(f, term, st, kernel)) / scale)
        zm = max(zm, term.zero_mean_defect())
    ok = mono and ls <= 1e-8 and zm <= 1e-12
    return CheckResult("greedy invariants", ok,
                       f"monotone={mono} line-search={ls:.1e} zero-mean={zm:.1e}")


def check_oracle(seed: int = 2) -> CheckResult:
    grids = [Grid1D(10, Periodic(2 * math.pi)) for _ in range(2)]
    st = synthetic_store(2, 1500, seed)
    kernel = KernelSpec("grid_delta", 1e-3)
    sol = grid_minimizer(st, kernel, grids)
    res = greedy_run(st, kernel, TensorSum(grids), 30, ALSConfig(init_seed=seed))
    gap = res.trace[-1] - sol.objective()
    dist = sol.norm_sq(tabulate(res.bias) - sol.values)
    j0 = res.trace[0] - sol.objective()
    ok = gap >= -1e-12 and abs(gap - dist) <= 1e-8 * j0 and gap < 1e-2 * j0
    return CheckResult("greedy vs full-grid minimiser", ok, f"gap/initial={gap / j0:.2e} |gap-dist|={abs(gap - dist):.1e}")


def check_kernel(eps: float = 0.4) -> CheckResult:
    g = Grid1D(30, Periodic(2 * math.pi))
    vm = VonMises1D(eps, 2 * math.pi)
    y = np.linspace(0, 2 * math.pi, 17)
    mom = CellMoments.von_mises(g, vm, y)
    err = float(np.max(np.abs(mom.total() - 1.0)))
    return CheckResult("von Mises normalisation", err < 1e-8, f"max |∫K - 1| = {err:.1e}")


def check_gabf(seed: int = 3) -> CheckResult:
    rng = np.random.default_rng(seed)
    grids = [Grid1D(30, Periodic(1.0))]
    st = OccupationStore(1)
    z = rng.uniform(0, 1, (20000, 1))
    st.record_batch(z, np.full_like(z, 1.7), 1.0, 0, 0)
    a = gabf_update(st, grids)[0]
    err = float(np.max(np.abs(a.values)))
    return CheckResult("separable baseline, constant force", err < 1e-10, f"max |A| = {err:.1e}")


ALL_CHECKS = (check_gradients, check_greedy, check_oracle, check_kernel, check_gabf)


def run_checks() -> list[CheckResult]:
    return [c() for c in ALL_CHECKS]
