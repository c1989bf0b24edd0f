"""Piecewise-linear functions on uniform 1D grids and sums of their tensor products.

A periodic grid with ``M`` nodes has ``M`` cells (node ``M`` is node ``0``);
a reflected grid on ``[lo, hi]`` has ``M - 1`` cells with nodes on both ends.
All integrals of products of such functions are computed exactly, cell by
cell.  Derivatives are cell slopes; at a node the cell to the right is used
(on the right end of a reflected grid, the last cell).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from .domain import Domain, Periodic, Reflected, domain_from_dict


class GridMismatch(ValueError):
    pass


@dataclass(frozen=True)
class Grid1D:
    n_nodes: int
    domain: Domain

    def __post_init__(self):
        if self.n_nodes < 3:
            raise ValueError(f"Grid1D needs at least 3 nodes, got {self.n_nodes}")

    @property
    def periodic(self) -> bool:
        return isinstance(self.domain, Periodic)

    @property
    def n_cells(self) -> int:
        return self.n_nodes if self.periodic else self.n_nodes - 1

    @property
    def lo(self) -> float:
        return self.domain.lo

    @property
    def size(self) -> float:
        return self.domain.size

    @property
    def h(self) -> float:
        return self.size / self.n_cells

    @cached_property
    def nodes(self) -> np.ndarray:
        return self.lo + self.h * np.arange(self.n_nodes)

    @cached_property
    def cell_nodes(self):
        """Left and right node index of every cell."""
        left = np.arange(self.n_cells)
        right = (left + 1) % self.n_nodes
        return left, right

    @cached_property
    def mass(self) -> np.ndarray:
        m = np.zeros((self.n_nodes, self.n_nodes))
        left, right = self.cell_nodes
        h = self.h
        np.add.at(m, (left, left), h / 3)
        np.add.at(m, (right, right), h / 3)
        np.add.at(m, (left, right), h / 6)
        np.add.at(m, (right, left), h / 6)
        return m

    @cached_property
    def stiffness(self) -> np.ndarray:
        k = np.zeros((self.n_nodes, self.n_nodes))
        left, right = self.cell_nodes
        h = self.h
        np.add.at(k, (left, left), 1 / h)
        np.add.at(k, (right, right), 1 / h)
        np.add.at(k, (left, right), -1 / h)
        np.add.at(k, (right, left), -1 / h)
        return k

    @cached_property
    def weights(self) -> np.ndarray:
        """``∫ φ_a`` for every hat function ``φ_a``."""
        w = np.zeros(self.n_nodes)
        left, right = self.cell_nodes
        np.add.at(w, left, self.h / 2)
        np.add.at(w, right, self.h / 2)
        return w

    def locate(self, x):
        """Cell index and local coordinate ``t ∈ [0, 1)`` of points ``x``.

        Points within 1e-12 cell widths of a node are snapped onto it so that
        nodal evaluation is exact.
        """
        u = (np.asarray(x, dtype=float) - self.lo) / self.h
        c = self.n_cells
        if self.periodic:
            u = np.mod(u, c)
        else:
            u = np.clip(u, 0.0, c)
        r = np.rint(u)
        u = np.where(np.abs(u - r) <= 1e-12 * np.maximum(1.0, np.abs(r)), r, u)
        cell = np.floor(u).astype(np.int64)
        if self.periodic:
            cell = np.mod(cell, c)
            t = u - np.floor(u)
        else:
            cell = np.minimum(cell, c - 1)
            t = u - cell
        return cell, t

    def to_dict(self) -> dict:
        return {"n_nodes": self.n_nodes, "domain": self.domain.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "Grid1D":
        return cls(int(d["n_nodes"]), domain_from_dict(d["domain"]))


def _same_grid(a: Grid1D, b: Grid1D):
    if a != b:
        raise GridMismatch(f"grid mismatch: {a} vs {b}")


@dataclass(frozen=True)
class PLFunction:
    grid: Grid1D
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != (self.grid.n_nodes,):
            raise ValueError(f"expected {self.grid.n_nodes} values, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("PLFunction values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __call__(self, x):
        return eval_pl(self, x)

    def deriv(self, x):
        return eval_pl_deriv(self, x)

    def __add__(self, other: "PLFunction") -> "PLFunction":
        _same_grid(self.grid, other.grid)
        return PLFunction(self.grid, self.values + other.values)

    def __sub__(self, other: "PLFunction") -> "PLFunction":
        _same_grid(self.grid, other.grid)
        return PLFunction(self.grid, self.values - other.values)

    def __mul__(self, c: float) -> "PLFunction":
        return PLFunction(self.grid, self.values * float(c))

    __rmul__ = __mul__

    @classmethod
    def constant(cls, grid: Grid1D, c: float = 1.0) -> "PLFunction":
        return cls(grid, np.full(grid.n_nodes, float(c)))

    @classmethod
    def from_callable(cls, grid: Grid1D, fn) -> "PLFunction":
        return cls(grid, np.asarray(fn(grid.nodes), dtype=float))


def _cell_values(grid: Grid1D, values, x):
    cell, t = grid.locate(x)
    left, right = grid.cell_nodes
    values = np.asarray(values)
    return values[..., left[cell]], values[..., right[cell]], t


def eval_pl(f: PLFunction, x):
    vl, vr, t = _cell_values(f.grid, f.values, x)
    return vl * (1.0 - t) + vr * t


def eval_pl_deriv(f: PLFunction, x):
    vl, vr, _ = _cell_values(f.grid, f.values, x)
    return (vr - vl) / f.grid.h


def integrate_pl(f: PLFunction) -> float:
    return float(f.grid.weights @ f.values)


def integrate_product(f: PLFunction, g: PLFunction) -> float:
    _same_grid(f.grid, g.grid)
    return float(f.values @ f.grid.mass @ g.values)


def l2_norm_sq(f: PLFunction) -> float:
    return integrate_product(f, f)


def stiffness_product(f: PLFunction, g: PLFunction) -> float:
    """``∫ f' g'``."""
    _same_grid(f.grid, g.grid)
    return float(f.values @ f.grid.stiffness @ g.values)


def zero_mean_project(f: PLFunction) -> PLFunction:
    mean = integrate_pl(f) / f.grid.size
    return PLFunction(f.grid, f.values - mean)


# ---------------------------------------------------------------------------
# rank-one terms and tensor sums


@dataclass(frozen=True)
class RankOneTerm:
    factors: tuple
    zero_mean_index: int

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(self.factors))
        if not 0 <= self.zero_mean_index < len(self.factors):
            raise ValueError("zero_mean_index out of range")

    @property
    def d(self) -> int:
        return len(self.factors)

    def is_zero(self) -> bool:
        return any(not np.any(f.values) for f in self.factors)

    def zero_mean_defect(self) -> float:
        """``|∫ r_i| / (|domain| * sup|r_i|)`` for the designated factor."""
        f = self.factors[self.zero_mean_index]
        scale = float(np.max(np.abs(f.values))) * f.grid.size
        return abs(integrate_pl(f)) / scale if scale > 0 else 0.0

    @classmethod
    def zero(cls, grids: Sequence[Grid1D], zero_mean_index: int = 0) -> "RankOneTerm":
        return cls(tuple(PLFunction(g, np.zeros(g.n_nodes)) for g in grids), zero_mean_index)


class TensorSum:
    """``A(z) = sum_j b_j(z_j) + sum_k prod_j r_{k,j}(z_j)``.

    The optional separable baseline ``b_j`` and the factors are stored as
    read-only arrays; every modification returns a new instance.
    """

    def __init__(self, grids: Sequence[Grid1D], factors=None, zero_mean=None, baseline=None):
        self.grids = tuple(grids)
        d = len(self.grids)
        if factors is None:
            factors = [np.zeros((0, g.n_nodes)) for g in self.grids]
        factors = [np.array(f, dtype=float).reshape(-1, g.n_nodes) for f, g in zip(factors, self.grids)]
        if len(factors) != d:
            raise ValueError("one factor block per coordinate required")
        k = factors[0].shape[0]
        if any(f.shape[0] != k for f in factors):
            raise ValueError("factor blocks disagree on the number of terms")
        for f in factors:
            f.setflags(write=False)
        self.factors = tuple(factors)
        zm = np.zeros(k, dtype=np.int64) if zero_mean is None else np.array(zero_mean, dtype=np.int64)
        if zm.shape != (k,):
            raise ValueError("zero_mean needs one entry per term")
        zm.setflags(write=False)
        self.zero_mean = zm
        if baseline is not None:
            baseline = tuple(np.array(b, dtype=float).reshape(g.n_nodes) for b, g in zip(baseline, self.grids))
            for b in baseline:
                b.setflags(write=False)
        self.baseline = baseline

    @property
    def d(self) -> int:
        return len(self.grids)

    @property
    def n_terms(self) -> int:
        return self.factors[0].shape[0]

    def __len__(self):
        return self.n_terms

    def term(self, k: int) -> RankOneTerm:
        return RankOneTerm(tuple(PLFunction(g, f[k]) for g, f in zip(self.grids, self.factors)),
                           int(self.zero_mean[k]))

    def terms(self):
        return [self.term(k) for k in range(self.n_terms)]

    def append(self, term: RankOneTerm) -> "TensorSum":
        for f, g in zip(term.factors, self.grids):
            _same_grid(f.grid, g)
        factors = [np.vstack([blk, f.values[None]]) for blk, f in zip(self.factors, term.factors)]
        zm = np.append(self.zero_mean, term.zero_mean_index)
        return TensorSum(self.grids, factors, zm, self.baseline)

    def with_baseline(self, baseline) -> "TensorSum":
        if baseline is not None:
            baseline = [b.values if isinstance(b, PLFunction) else b for b in baseline]
        return TensorSum(self.grids, self.factors, self.zero_mean, baseline)

    def without_baseline(self) -> "TensorSum":
        return TensorSum(self.grids, self.factors, self.zero_mean, None)

    def baseline_only(self) -> "TensorSum":
        return TensorSum(self.grids, None, None, self.baseline)

    def stacks(self, include_baseline: bool = True):
        """Factor blocks with the baseline rewritten as ``d`` rank-one terms.

        Baseline term ``j`` has ``b_j`` in slot ``j`` and the constant 1
        elsewhere, so ``sum_j b_j(z_j)`` is an ordinary sum of products.
        """
        if not include_baseline or self.baseline is None:
            return self.factors
        out = []
        for j, (blk, g) in enumerate(zip(self.factors, self.grids)):
            extra = np.ones((self.d, g.n_nodes))
            extra[j] = self.baseline[j]
            out.append(np.vstack([blk, extra]))
        return tuple(out)

    def memory_values(self) -> int:
        """Number of stored node values, baseline included."""
        k = self.n_terms + (1 if self.baseline is not None else 0)
        return k * sum(g.n_nodes for g in self.grids)

    def __repr__(self):
        return f"TensorSum(d={self.d}, terms={self.n_terms}, baseline={self.baseline is not None})"


def _factor_tables(stacks, grids, z):
    """Values and slopes of every factor at the points ``z`` (shape (S, d))."""
    vals, slopes = [], []
    for j, (blk, g) in enumerate(zip(stacks, grids)):
        vl, vr, t = _cell_values(g, blk, z[:, j])
        vals.append(vl * (1.0 - t) + vr * t)
        slopes.append((vr - vl) / g.h)
    return vals, slopes


def _products_except(vals):
    """``prod_{l != j} vals[l]`` for each j, without dividing."""
    d = len(vals)
    prefix = [np.ones_like(vals[0])]
    for v in vals[:-1]:
        prefix.append(prefix[-1] * v)
    suffix = [np.ones_like(vals[0])] * d
    for j in range(d - 2, -1, -1):
        suffix[j] = suffix[j + 1] * vals[j + 1]
    return [prefix[j] * suffix[j] for j in range(d)]


def value_and_grad(A: TensorSum, z, include_baseline: bool = True, chunk: int = 65536):
    """Value ``(S,)`` and gradient ``(S, d)`` of ``A`` at points ``z``."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    s = z.shape[0]
    val = np.zeros(s)
    grad = np.zeros((s, A.d))
    stacks = A.stacks(include_baseline)
    if stacks[0].shape[0] == 0:
        return val, grad
    # keep the (terms x points) temporaries bounded
    step = max(1, chunk // max(1, stacks[0].shape[0]))
    for a in range(0, s, step):
        sl = slice(a, min(s, a + step))
        vals, slopes = _factor_tables(stacks, A.grids, z[sl])
        others = _products_except(vals)
        val[sl] = np.sum(others[0] * vals[0], axis=0)
        for j in range(A.d):
            grad[sl, j] = np.sum(slopes[j] * others[j], axis=0)
    return val, grad


def eval_sum(A: TensorSum, z, include_baseline: bool = True):
    z = np.asarray(z, dtype=float)
    v, _ = value_and_grad(A, z.reshape(-1, A.d), include_baseline)
    return v.reshape(z.shape[:-1]) if z.ndim > 1 else float(v[0])


def grad_sum(A: TensorSum, z, include_baseline: bool = True):
    z = np.asarray(z, dtype=float)
    _, g = value_and_grad(A, z.reshape(-1, A.d), include_baseline)
    return g.reshape(z.shape) if z.ndim > 1 else g[0]


# ---------------------------------------------------------------------------
# serialisation: a JSON manifest plus one CSV row per factor


def save_tensor_sum(A: TensorSum, directory, stem: str = "bias"):
    """Write ``<stem>_manifest.json`` and ``<stem>_factors.csv``.

    CSV rows are ``kind, term, coord, zero_mean_index, v_0, ..., v_{M-1}`` with
    values printed by ``repr`` so the round trip is bit exact.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    csv_path = directory / f"{stem}_factors.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        if A.baseline is not None:
            for j, b in enumerate(A.baseline):
                w.writerow(["baseline", -1, j, -1] + [repr(float(x)) for x in b])
        for k in range(A.n_terms):
            for j in range(A.d):
                w.writerow(["term", k, j, int(A.zero_mean[k])]
                           + [repr(float(x)) for x in A.factors[j][k]])
    manifest = {
        "format": "tabf-tensor-sum/1",
        "d": A.d,
        "n_terms": A.n_terms,
        "has_baseline": A.baseline is not None,
        "grids": [g.to_dict() for g in A.grids],
        "terms": [{"index": k, "zero_mean_index": int(A.zero_mean[k])} for k in range(A.n_terms)],
        "factors_file": csv_path.name,
    }
    (directory / f"{stem}_manifest.json").write_text(json.dumps(manifest, indent=2))
    return directory / f"{stem}_manifest.json"


def load_tensor_sum(manifest_path) -> TensorSum:
    manifest_path = Path(manifest_path)
    man = json.loads(manifest_path.read_text())
    grids = [Grid1D.from_dict(g) for g in man["grids"]]
    d, k = man["d"], man["n_terms"]
    factors = [np.zeros((k, g.n_nodes)) for g in grids]
    zm = np.zeros(k, dtype=np.int64)
    baseline = [None] * d if man["has_baseline"] else None
    with open(manifest_path.parent / man["factors_file"], newline="") as fh:
        for row in csv.reader(fh):
            kind, term, coord, zmi = row[0], int(row[1]), int(row[2]), int(row[3])
            vals = np.array([float(x) for x in row[4:]])
            if kind == "baseline":
                baseline[coord] = vals
            else:
                factors[coord][term] = vals
                zm[term] = zmi
    return TensorSum(grids, factors, zm, baseline)


# ---------------------------------------------------------------------------
# dense nodal table for low dimension


class NodalTable:
    """All node values of a tensor sum on the full product grid.

    On every grid cell a product of piecewise-linear factors is multilinear,
    so multilinear interpolation of the table reproduces the sum (and its
    cell-wise gradient) up to rounding.  Only sensible for small ``d``.
    """

    def __init__(self, A: TensorSum, include_baseline: bool = True):
        self.grids = A.grids
        d = A.d
        shape = tuple(g.n_nodes for g in A.grids)
        stacks = A.stacks(include_baseline)
        if stacks[0].shape[0] == 0:
            self.table = np.zeros(shape)
        else:
            letters = "abcdefghij"[:d]
            spec = ",".join("k" + c for c in letters) + "->" + letters
            self.table = np.einsum(spec, *stacks, optimize=True)
        self.flat = self.table.ravel()
        self.strides = np.array([int(np.prod(shape[l + 1:])) for l in range(d)], dtype=np.int64)

    def value_and_grad(self, z):
        z = np.atleast_2d(np.asarray(z, dtype=float))
        s, d = z.shape
        lo_idx, hi_idx, t, inv_h = [], [], [], []
        for j, g in enumerate(self.grids):
            cell, tj = g.locate(z[:, j])
            left, right = g.cell_nodes
            lo_idx.append(left[cell])
            hi_idx.append(right[cell])
            t.append(tj)
            inv_h.append(1.0 / g.h)
        val = np.zeros(s)
        grad = np.zeros((s, d))
        for corner in range(1 << d):
            idx = np.zeros(s, dtype=np.int64)
            ws = []
            for j in range(d):
                up = (corner >> j) & 1
                idx += (hi_idx[j] if up else lo_idx[j]) * self.strides[j]
                ws.append((t[j], 1.0) if up else (1.0 - t[j], -1.0))
            v = self.flat[idx]
            wv = [w for w, _ in ws]
            ex = _products_except(wv) if d > 1 else [np.ones(s)]
            val += v * ex[0] * wv[0]
            for j in range(d):
                grad[:, j] += v * ex[j] * ws[j][1] * inv_h[j]
        return val, grad


def bias_evaluator(A: TensorSum, include_baseline: bool = True, max_table: int = 1_000_000):
    """Callable ``z -> (value, grad)``; uses a :class:`NodalTable` when it is small enough."""
    size = int(np.prod([g.n_nodes for g in A.grids]))
    k = A.n_terms + (A.d if (include_baseline and A.baseline is not None) else 0)
    if A.d <= 4 and size <= max_table and k > 4:
        return NodalTable(A, include_baseline).value_and_grad
    return lambda z: value_and_grad(A, z, include_baseline)
