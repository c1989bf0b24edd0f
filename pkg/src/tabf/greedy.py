"""Rank-one corrections by alternating least squares and the greedy loop.

The objective is

    J(f) = (1/W) sum_s w_s ∫ |g_s - ∇f(z)|^2 K(z_s, z) dz + lam ∫ |∇f|^2 dz,

with ``K`` a point evaluation in grid-delta mode.  For fixed factors on all
coordinates but one, ``J(f + r_1 ⊗ ... ⊗ r_d)`` is quadratic in the free
factor; :mod:`tabf.occupation` assembles that quadratic and :func:`solve_1d`
minimises it, with a Lagrange multiplier for the zero-mean constraint.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .gridfn import Grid1D, PLFunction, RankOneTerm, TensorSum, _products_except, value_and_grad
from .occupation import (
    Assembler,
    KernelSpec,
    OccupationStore,
    SingularAssembly,
    SingularSystem,
    System1D,
)

__all__ = [
    "ALSConfig",
    "GreedyResult",
    "GreedyState",
    "Objective",
    "SingularAssembly",
    "SingularSystem",
    "als_rank_one",
    "directional_derivative",
    "greedy",
    "greedy_run",
    "increment_norm_sq",
    "objective",
    "solve_1d",
    "write_trace",
]


@dataclass(frozen=True)
class ALSConfig:
    max_sweeps: int = 50
    rel_tol: float = 1e-6
    init_seed: int = 0
    init_mode: str = "random_unit"

    def __post_init__(self):
        if self.max_sweeps < 1:
            raise ValueError("max_sweeps must be >= 1")
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be > 0")
        if self.init_mode not in ("random_unit", "ones"):
            raise ValueError(f"unknown init_mode {self.init_mode!r}")


# ---------------------------------------------------------------------------
# 1D solve


def solve_1d(system, zero_mean: bool, grid: Grid1D | None = None, cond_max: float = 1e13) -> PLFunction:
    """Minimise ``c^T A c - 2 rhs^T c`` (optionally subject to ``∫ r = 0``).

    The zero-mean constraint is handled by a bordered system with one
    Lagrange multiplier.  The systems are small (one grid), so a dense LU
    solve is used for both periodic and reflected grids.
    """
    if isinstance(system, System1D):
        a, b, grid = system.matrix, system.rhs, system.grid
    else:
        a, b = system
        if grid is None:
            raise ValueError("grid required when passing a bare (matrix, rhs) pair")
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    m = b.shape[0]
    if not np.any(b):
        return PLFunction(grid, np.zeros(m))
    if zero_mean:
        e = grid.weights
        scale = np.sqrt(np.max(np.abs(np.diag(a))) / np.max(e)) if np.any(a) else 1.0
        k = np.zeros((m + 1, m + 1))
        k[:m, :m] = a
        k[:m, m] = k[m, :m] = e * scale
        rhs = np.append(b, 0.0)
    else:
        k, rhs = a, b
    if not np.all(np.isfinite(k)) or np.linalg.cond(k) > cond_max:
        raise SingularSystem("constrained 1D system is rank deficient")
    try:
        x = np.linalg.solve(k, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(str(exc)) from exc
    res = np.linalg.norm(k @ x - rhs)
    tol = 1e-10 * max(np.linalg.norm(rhs), 1e-5 * np.linalg.norm(k) * np.linalg.norm(x))
    if not np.isfinite(res) or res > tol:
        raise SingularSystem(f"1D solve residual {res:.3e} too large")
    return PLFunction(grid, x[:m])


# ---------------------------------------------------------------------------
# objective pieces


def _lebesgue_cross(a_stacks, b_stacks, grids) -> float:
    """``∫ ∇a · ∇b`` for two sums of products, from 1D mass/stiffness grams."""
    if a_stacks[0].shape[0] == 0 or b_stacks[0].shape[0] == 0:
        return 0.0
    mass = [ua @ g.mass @ ub.T for ua, ub, g in zip(a_stacks, b_stacks, grids)]
    stiff = [ua @ g.stiffness @ ub.T for ua, ub, g in zip(a_stacks, b_stacks, grids)]
    if len(grids) == 1:
        return float(np.sum(stiff[0]))
    ex = _products_except(mass)
    return float(sum(np.sum(stiff[h] * ex[h]) for h in range(len(grids))))


class Objective:
    """Evaluator of ``J`` and of its bilinear pieces for one snapshot."""

    def __init__(self, store: OccupationStore, kernel: KernelSpec, grids: Sequence[Grid1D],
                 assembler: Assembler | None = None):
        if len(store) == 0 and kernel.lam <= 0:
            raise ValueError("objective undefined for an empty store with lam = 0")
        self.kernel = kernel
        self.grids = tuple(grids)
        self.asm = assembler if assembler is not None else Assembler(store, kernel, self.grids)
        a = self.asm
        self.point = a.point
        if a.n and not self.point:
            tot = _products_except([m.total() for m in a.data] + [np.ones(a.n)])[-1]
            self.force_sq = float(a.weights @ (np.sum(a.forces ** 2, axis=1) * tot))
        else:
            self.force_sq = a.force_sq

    # -- data term pieces

    def _grad_at(self, stacks):
        t = TensorSum(self.grids, stacks)
        return value_and_grad(t, self.asm.z)[1]

    def data_cross(self, a_stacks, b_stacks) -> float:
        a = self.asm
        if not a.n or a_stacks[0].shape[0] == 0 or b_stacks[0].shape[0] == 0:
            return 0.0
        if self.point:
            return float(a.weights @ np.sum(self._grad_at(a_stacks) * self._grad_at(b_stacks), axis=1))
        total = 0.0
        d = len(self.grids)
        for k in range(a_stacks[0].shape[0]):
            p0 = [a.data[l].pair(a_stacks[l][k], b_stacks[l]) for l in range(d)]  # (K', S)
            pd = [a.data[l].pair_d(a_stacks[l][k], b_stacks[l]) for l in range(d)]
            ex = _products_except(p0) if d > 1 else [np.ones_like(p0[0])]
            total += float(np.sum(sum(pd[h] * ex[h] for h in range(d)) @ a.weights))
        return total

    def data_force(self, stacks) -> float:
        a = self.asm
        if not a.n or stacks[0].shape[0] == 0:
            return 0.0
        if self.point:
            return float(a.weights @ np.sum(self._grad_at(stacks) * a.forces, axis=1))
        d = len(self.grids)
        i0 = [a.data[l].integral(stacks[l]) for l in range(d)]
        d1 = [a.data[l].integral_d(stacks[l]) for l in range(d)]
        ex = _products_except(i0) if d > 1 else [np.ones_like(i0[0])]
        e = [np.sum(d1[h] * ex[h], axis=0) for h in range(d)]  # (S,)
        return float(a.weights @ sum(a.forces[:, h] * e[h] for h in range(d)))

    def reg_cross(self, a_stacks, b_stacks) -> float:
        if self.kernel.lam == 0:
            return 0.0
        return self.kernel.lam * _lebesgue_cross(a_stacks, b_stacks, self.grids)

    def cross(self, a_stacks, b_stacks) -> float:
        return self.data_cross(a_stacks, b_stacks) + self.reg_cross(a_stacks, b_stacks)

    def __call__(self, f: TensorSum | None) -> float:
        if f is None:
            return self.force_sq
        s = f.stacks()
        if self.point:
            data = 0.0
            if self.asm.n:
                r = self.asm.residual(f)
                data = float(self.asm.weights @ np.sum(r * r, axis=1))
            return data + self.reg_cross(s, s)
        return self.force_sq - 2 * self.data_force(s) + self.cross(s, s)


def objective(f: TensorSum, store: OccupationStore, kernel: KernelSpec, grids=None) -> float:
    grids = f.grids if grids is None else grids
    return Objective(store, kernel, grids)(f)


def _term_stacks(term: RankOneTerm):
    return tuple(np.asarray(r.values)[None, :] for r in term.factors)


def increment_norm_sq(g: RankOneTerm, store, kernel, grids=None) -> float:
    """Quadratic part ``Q(g)`` of ``J``, the discrete norm of an increment."""
    grids = tuple(r.grid for r in g.factors) if grids is None else grids
    s = _term_stacks(g)
    return Objective(store, kernel, grids).cross(s, s)


def directional_derivative(f: TensorSum, g: RankOneTerm, store, kernel) -> float:
    """Half the derivative of ``t -> J(f + t g)`` at ``t = 0``."""
    ob = Objective(store, kernel, f.grids)
    sg = _term_stacks(g)
    return ob.cross(sg, f.stacks()) - ob.data_force(sg)


# ---------------------------------------------------------------------------
# ALS


def _unit_zero_mean(rng, grid: Grid1D):
    v = rng.standard_normal(grid.n_nodes)
    e = grid.weights
    v = v - (e @ v) / grid.size
    nrm = np.sqrt(v @ grid.mass @ v)
    return v / nrm


def _first_mode(grid: Grid1D):
    # deterministic zero-mean start: the lowest cosine mode, projected and normalised
    v = np.cos(2 * np.pi * (grid.nodes - grid.lo) / grid.size)
    v = v - (grid.weights @ v) / grid.size
    return v / np.sqrt(v @ grid.mass @ v)


class _Context:
    """Shared state for ALS calls on one snapshot around a fixed ``f``."""

    def __init__(self, asm: Assembler, ob: Objective, f: TensorSum, residual=None, value=None):
        self.asm = asm
        self.ob = ob
        self.f = f
        self.residual = residual
        if asm.point and residual is None and asm.n:
            self.residual = asm.residual(f)
        self.value = ob(f) if value is None else value

    def system(self, j, factors):
        return self.asm.system(j, factors, self.f, residual=self.residual)


def _als(ctx: _Context, i: int, cfg: ALSConfig, rng) -> tuple[RankOneTerm, float, int]:
    grids = ctx.asm.grids
    d = len(grids)
    factors = [np.ones(g.n_nodes) for g in grids]
    if cfg.init_mode == "random_unit":
        factors[i] = _unit_zero_mean(rng, grids[i])
    else:
        factors[i] = _first_mode(grids[i])
    zero = RankOneTerm.zero(grids, i)
    j0 = ctx.value
    best = j0
    sweeps = 0
    for sweeps in range(1, cfg.max_sweeps + 1):
        start = best
        for j in range(d):
            if any(not np.any(factors[l]) for l in range(d) if l != j):
                return zero, j0, sweeps
            sysj = ctx.system(j, factors)
            r = solve_1d(sysj, zero_mean=(j == i)).values
            factors[j] = np.array(r)
            best = j0 - float(sysj.rhs @ r)
        if any(not np.any(f) for f in factors):
            return zero, j0, sweeps
        # normalise all but the zero-mean factor
        mag = 1.0
        for j in range(d):
            if j == i:
                continue
            nrm = float(np.sqrt(factors[j] @ grids[j].mass @ factors[j]))
            factors[j] = factors[j] / nrm
            mag *= nrm
        factors[i] = factors[i] * mag
        if start - best <= cfg.rel_tol * (j0 - best):
            break
    if not best < j0:
        return zero, j0, sweeps
    term = RankOneTerm(tuple(PLFunction(g, v) for g, v in zip(grids, factors)), i)
    return term, best, sweeps


def _rng_for(cfg: ALSConfig, n_terms: int, i: int):
    return np.random.default_rng([cfg.init_seed, n_terms, i])


def als_rank_one(i: int, f: TensorSum, store: OccupationStore, kernel: KernelSpec,
                 cfg: ALSConfig = ALSConfig()) -> RankOneTerm:
    """Best rank-one correction with a zero-mean factor on coordinate ``i`` (0-based)."""
    if not 0 <= i < f.d:
        raise ValueError("zero-mean index out of range")
    asm = Assembler(store, kernel, f.grids)
    ob = Objective(store, kernel, f.grids, asm)
    ctx = _Context(asm, ob, f)
    term, _, _ = _als(ctx, i, cfg, _rng_for(cfg, f.n_terms, i))
    return term


# ---------------------------------------------------------------------------
# greedy loop


@dataclass
class GreedyState:
    current: TensorSum
    objective_trace: list = field(default_factory=list)
    next_zero_mean_index: int = 0


@dataclass
class GreedyResult:
    bias: TensorSum
    trace: list
    grad_at_samples: np.ndarray | None
    terms: list
    sweeps: list


def greedy_run(store: OccupationStore, kernel: KernelSpec, f0: TensorSum, m: int,
               cfg: ALSConfig = ALSConfig(), f0_grad=None) -> GreedyResult:
    """Append ``m`` rank-one terms, cycling the zero-mean index ``0, 1, ..., d-1, 0, ...``.

    ``f0_grad`` may carry ``∇f0`` at the store samples (grid-delta mode) to
    skip re-evaluating ``f0``; the gradient of the result at the samples is
    returned for the same purpose.
    """
    if m < 0:
        raise ValueError("m must be >= 0")
    if len(store):
        kernel.check_well_posed()
    grids = f0.grids
    asm = Assembler(store, kernel, grids)
    ob = Objective(store, kernel, grids, asm)
    point = asm.point
    f = f0
    lam = kernel.lam
    residual = None
    grad = None
    if point:
        grad = value_and_grad(f0, asm.z)[1] if f0_grad is None else np.array(f0_grad, dtype=float)
        residual = asm.forces - grad
        reg = _lebesgue_cross(f0.stacks(), f0.stacks(), grids) if lam > 0 else 0.0
        value = float(asm.weights @ np.sum(residual ** 2, axis=1)) + lam * reg
    else:
        value = ob(f0)
    state = GreedyState(f0, [value], 0)
    terms = []
    sweeps = []
    for n in range(m):
        i = state.next_zero_mean_index
        ctx = _Context(asm, ob, f, residual=residual, value=value)
        term, _, nsw = _als(ctx, i, cfg, _rng_for(cfg, f.n_terms, i))
        sweeps.append(nsw)
        f_new = f.append(term)
        if point:
            sg = _term_stacks(term)
            if not term.is_zero():
                dg = value_and_grad(TensorSum(grids, sg), asm.z)[1] if asm.n else np.zeros((0, f.d))
                grad = grad + dg
                residual = residual - dg
                if lam > 0:
                    reg = reg + 2 * _lebesgue_cross(f.stacks(), sg, grids) + _lebesgue_cross(sg, sg, grids)
            value = float(asm.weights @ np.sum(residual ** 2, axis=1)) + lam * reg
        elif not term.is_zero():
            sg = _term_stacks(term)
            value = value - 2 * ob.data_force(sg) + 2 * ob.cross(f.stacks(), sg) + ob.cross(sg, sg)
        f = f_new
        terms.append(term)
        state.current = f
        state.objective_trace.append(value)
        state.next_zero_mean_index = (i + 1) % f.d
    return GreedyResult(f, state.objective_trace, grad, terms, sweeps)


def greedy(store: OccupationStore, kernel: KernelSpec, f0: TensorSum, m: int,
           cfg: ALSConfig = ALSConfig()):
    """Returns ``(f_m, [J(f_0), ..., J(f_m)])``."""
    res = greedy_run(store, kernel, f0, m, cfg)
    return res.bias, res.trace


def write_trace(path, trace, first_index: int = 0):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["n", "objective"])
        for n, v in enumerate(trace):
            wr.writerow([first_index + n, repr(float(v))])
