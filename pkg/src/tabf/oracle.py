"""Reference computations used to validate the tensor method at small scale.

* :func:`toy_free_energy` integrates the toy potential over its orthogonal
  coordinate by composite Simpson quadrature.
* :func:`grid_minimizer` minimises the objective over the full
  ``M1 x M2`` piecewise-(bi)linear space.  It deliberately does not reuse
  the one-dimensional assembly code: the data term is integrated with a
  tensor Gauss–Legendre rule on every cell (or by point evaluation of the
  nodal basis in grid-delta mode), so agreement with the greedy solver is a
  genuine cross-check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.integrate
import scipy.linalg

from .domain import ToyModel3D, TWO_PI
from .gridfn import Grid1D, TensorSum
from .occupation import KernelSpec, OccupationStore, SingularSystem, VonMises1D, UnsupportedMode
from .domain import Periodic


# ---------------------------------------------------------------------------
# toy-model free energy


def toy_free_energy(beta: float, z1, z2, n_quad: int = 2000, center: bool = True):
    """``-(1/β) log ∫ exp(-β V(x1, x2, x3)) dx3`` on the product grid ``z1 x z2``."""
    if not beta > 0:
        raise ValueError("beta must be > 0")
    pot = ToyModel3D()
    z1 = np.asarray(z1, dtype=float)
    z2 = np.asarray(z2, dtype=float)
    n = int(n_quad) + (int(n_quad) % 2)  # even number of intervals
    x3 = np.linspace(0.0, TWO_PI, n + 1)
    Z1, Z2 = np.meshgrid(z1, z2, indexing="ij")
    out = np.empty(Z1.shape)
    for a in range(Z1.shape[0]):
        z = np.stack([np.repeat(Z1[a][:, None], x3.size, 1), np.repeat(Z2[a][:, None], x3.size, 1)], -1)
        v = pot.energy_batch(np.broadcast_to(x3, Z1[a].shape + x3.shape)[..., None], z)
        vmin = v.min(axis=1, keepdims=True)
        integral = scipy.integrate.simpson(np.exp(-beta * (v - vmin)), x=x3, axis=1)
        out[a] = vmin[:, 0] - np.log(integral) / beta
    if center:
        out = out - out.mean()
    return out


def toy_marginal_density(beta: float, z1, z2, n_quad: int = 2000):
    """Normalised marginal density of ``(x1, x2)`` on a uniform periodic grid."""
    a = toy_free_energy(beta, z1, z2, n_quad, center=True)
    p = np.exp(-beta * (a - a.min()))
    return p / p.sum()


# ---------------------------------------------------------------------------
# full-grid minimiser (d <= 2)


_GL_X, _GL_W = np.polynomial.legendre.leggauss(20)


def _quad_points(grid: Grid1D):
    """Gauss points on every cell with basis values and derivatives (dense)."""
    t = 0.5 * (_GL_X + 1)
    w = 0.5 * _GL_W * grid.h
    c = grid.n_cells
    cells = np.repeat(np.arange(c), t.size)
    tt = np.tile(t, c)
    x = grid.lo + (cells + tt) * grid.h
    left, right = grid.cell_nodes
    phi = np.zeros((x.size, grid.n_nodes))
    dphi = np.zeros((x.size, grid.n_nodes))
    rows = np.arange(x.size)
    np.add.at(phi, (rows, left[cells]), 1 - tt)
    np.add.at(phi, (rows, right[cells]), tt)
    np.add.at(dphi, (rows, left[cells]), -1.0 / grid.h)
    np.add.at(dphi, (rows, right[cells]), 1.0 / grid.h)
    return x, np.tile(w, c), phi, dphi


def _hat_rows(grid: Grid1D, y):
    """Basis values and derivatives at points ``y`` (right-cell convention)."""
    u = (np.asarray(y, dtype=float) - grid.lo) / grid.h
    if grid.periodic:
        u = np.mod(u, grid.n_cells)
    cell = np.clip(np.floor(u).astype(np.int64), 0, grid.n_cells - 1)
    t = u - cell
    left, right = grid.cell_nodes
    rows = np.arange(u.size)
    phi = np.zeros((u.size, grid.n_nodes))
    dphi = np.zeros((u.size, grid.n_nodes))
    np.add.at(phi, (rows, left[cell]), 1 - t)
    np.add.at(phi, (rows, right[cell]), t)
    np.add.at(dphi, (rows, left[cell]), -1.0 / grid.h)
    np.add.at(dphi, (rows, right[cell]), 1.0 / grid.h)
    return phi, dphi


@dataclass
class GridSolution:
    """Node values of the full-grid minimiser and the quadratic it minimises."""

    grids: tuple
    values: np.ndarray
    matrix: np.ndarray
    rhs: np.ndarray
    const: float

    def objective(self, values=None) -> float:
        v = self.values if values is None else np.asarray(values, dtype=float)
        x = v.ravel()
        return float(self.const - 2 * self.rhs @ x + x @ self.matrix @ x)

    def norm_sq(self, values) -> float:
        x = np.asarray(values, dtype=float).ravel()
        return float(x @ self.matrix @ x)

    def to_tensor_sum(self) -> TensorSum:
        """Exact representation as a sum of ``M_2`` products (hat basis in the last slot)."""
        if len(self.grids) == 1:
            return TensorSum(self.grids, [self.values[None, :]])
        g1, g2 = self.grids
        return TensorSum(self.grids, [self.values.T, np.eye(g2.n_nodes)], np.zeros(g2.n_nodes, dtype=int))


def _data_quadratic(store: OccupationStore, kernel: KernelSpec, grids):
    """``(A, b, c)`` with ``(1/W) Σ_s w_s ∫|g_s - ∇F|² K_s = c - 2 b·F + F·A·F``."""
    d = len(grids)
    n = tuple(g.n_nodes for g in grids)
    size = int(np.prod(n))
    if len(store) == 0:
        return np.zeros((size, size)), np.zeros(size), 0.0
    w = store.w / store.total_weight
    z, g = store.z, store.g
    if kernel.mode == "grid_delta":
        rows = [_hat_rows(gr, z[:, j]) for j, gr in enumerate(grids)]
        if d == 1:
            dmat = [rows[0][1]]
        else:
            (p1, d1), (p2, d2) = rows
            dmat = [np.einsum("sa,sb->sab", d1, p2).reshape(-1, size),
                    np.einsum("sa,sb->sab", p1, d2).reshape(-1, size)]
        a = sum(dm.T @ (w[:, None] * dm) for dm in dmat)
        b = sum(dm.T @ (w * g[:, j]) for j, dm in enumerate(dmat))
        c = float(w @ np.sum(g * g, axis=1))
        return a, b, c
    vms = []
    for gr in grids:
        if not isinstance(gr.domain, Periodic):
            raise UnsupportedMode("von_mises kernel needs periodic coordinates")
        vms.append(VonMises1D(kernel.eps, gr.domain.length))
    qp = [_quad_points(gr) for gr in grids]
    kern = [vm(z[:, j][:, None], qp[j][0][None, :]) for j, vm in enumerate(vms)]  # (S, Q_j)
    if d == 1:
        x, wq, phi, dphi = qp[0]
        kappa = (w @ kern[0]) * wq
        fbar = ((w * g[:, 0]) @ kern[0]) * wq
        a = dphi.T @ (kappa[:, None] * dphi)
        b = dphi.T @ fbar
        c = float(w @ (g[:, 0] ** 2 * (kern[0] @ wq)))
        return a, b, c
    (x1, w1, p1, d1), (x2, w2, p2, d2) = qp
    k1, k2 = kern
    kappa = (k1.T * w) @ k2 * np.outer(w1, w2)  # (Q1, Q2)
    f1 = (k1.T * (w * g[:, 0])) @ k2 * np.outer(w1, w2)
    f2 = (k1.T * (w * g[:, 1])) @ k2 * np.outer(w1, w2)
    # A = Σ_q κ_q ∇φ(x_q) ∇φ(x_q)^T with ∇φ_{ab} = (φ1'_a φ2_b, φ1_a φ2'_b)
    a = (np.einsum("pq,pa,pc,qb,qd->abcd", kappa, d1, d1, p2, p2, optimize=True)
         + np.einsum("pq,pa,pc,qb,qd->abcd", kappa, p1, p1, d2, d2, optimize=True)).reshape(size, size)
    b = (np.einsum("pq,pa,qb->ab", f1, d1, p2, optimize=True)
         + np.einsum("pq,pa,qb->ab", f2, p1, d2, optimize=True)).ravel()
    tot = (k1 @ w1) * (k2 @ w2)
    c = float(w @ (np.sum(g * g, axis=1) * tot))
    return a, b, c


def _regulariser(grids):
    """Matrix of ``∫|∇F|²`` and the vector of ``∫ F`` by Gauss quadrature."""
    qp = [_quad_points(gr) for gr in grids]
    if len(grids) == 1:
        x, wq, phi, dphi = qp[0]
        return dphi.T @ (wq[:, None] * dphi), phi.T @ wq
    (x1, w1, p1, d1), (x2, w2, p2, d2) = qp
    m1 = p1.T @ (w1[:, None] * p1)
    s1 = d1.T @ (w1[:, None] * d1)
    m2 = p2.T @ (w2[:, None] * p2)
    s2 = d2.T @ (w2[:, None] * d2)
    e = np.outer(p1.T @ w1, p2.T @ w2).ravel()
    return np.kron(s1, m2) + np.kron(m1, s2), e


def grid_minimizer(store: OccupationStore, kernel: KernelSpec, grids: Sequence[Grid1D]) -> GridSolution:
    """Minimiser of the objective over all zero-mean functions on the full grid (d <= 2)."""
    grids = tuple(grids)
    d = len(grids)
    if d > 2:
        raise ValueError("the full-grid oracle is limited to d <= 2")
    if store.d != d:
        raise ValueError("store and grids disagree on dimension")
    a, b, c = _data_quadratic(store, kernel, grids)
    reg, e = _regulariser(grids)
    a = a + kernel.lam * reg
    a = 0.5 * (a + a.T)
    # zero-mean subspace by an orthonormal null-space basis of e^T
    basis = scipy.linalg.null_space(e[None, :])
    red = basis.T @ a @ basis
    rb = basis.T @ b
    s = np.linalg.svd(red, compute_uv=False)
    if s[-1] <= 1e-13 * s[0]:
        raise SingularSystem("full-grid system is singular on the zero-mean subspace")
    y = scipy.linalg.solve(red, rb, assume_a="pos")
    x = basis @ y
    shape = tuple(g.n_nodes for g in grids)
    return GridSolution(grids, x.reshape(shape), a, b, c)


def tabulate(f: TensorSum, include_baseline: bool = True) -> np.ndarray:
    """Node values of a tensor sum on the full grid (d <= 2)."""
    if f.d > 2:
        raise ValueError("tabulate is limited to d <= 2")
    s = f.stacks(include_baseline)
    if s[0].shape[0] == 0:
        return np.zeros(tuple(g.n_nodes for g in f.grids))
    if f.d == 1:
        return s[0].sum(axis=0)
    return s[0].T @ s[1]


# ---------------------------------------------------------------------------
# basins of attraction on a periodic surface


def watershed_basin(surface: np.ndarray, start: tuple[int, int]) -> np.ndarray:
    """Cells whose steepest-descent path (8-neighbour, periodic) ends where ``start``'s does."""
    n1, n2 = surface.shape
    target = np.empty((n1, n2), dtype=np.int64)
    offsets = [(a, b) for a in (-1, 0, 1) for b in (-1, 0, 1) if (a, b) != (0, 0)]
    for i in range(n1):
        for j in range(n2):
            best, arg = surface[i, j], i * n2 + j
            for a, b in offsets:
                ii, jj = (i + a) % n1, (j + b) % n2
                if surface[ii, jj] < best:
                    best, arg = surface[ii, jj], ii * n2 + jj
            target[i, j] = arg
    flat = target.ravel()
    # follow pointers to the fixed points
    sink = flat.copy()
    for _ in range(n1 * n2):
        nxt = flat[sink]
        if np.array_equal(nxt, sink):
            break
        sink = nxt
    s0 = sink[start[0] * n2 + start[1]]
    return (sink == s0).reshape(n1, n2)


def bin_centers(grid: Grid1D) -> np.ndarray:
    return grid.lo + (np.arange(grid.n_cells) + 0.5) * grid.h


def toy_basin(beta: float, n_bins: int = 30, start=(0.0, 0.0)) -> np.ndarray:
    """Watershed basin around ``start`` of the toy free energy at bin centres."""
    h = TWO_PI / n_bins
    c = (np.arange(n_bins) + 0.5) * h
    surf = toy_free_energy(beta, c, c)
    i = int(math.floor((start[0] % TWO_PI) / h))
    j = int(math.floor((start[1] % TWO_PI) / h))
    return watershed_basin(surf, (i, j))
