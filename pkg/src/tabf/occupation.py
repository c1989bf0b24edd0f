"""Occupation-measure sample store, regularisation kernels and 1D assembly.

The data term of the objective is an integral of piecewise-polynomial
quantities against a kernel ``K(y_s, .)`` centred at every sample.  All such
integrals reduce to three moments per grid cell,

    m_k = ∫_cell t^k K(y_s, z) dz,   k = 0, 1, 2,

where ``t ∈ [0, 1)`` is the local cell coordinate.  :class:`CellMoments`
holds these moments in a sparse ``(sample, cell)`` layout: a grid-delta kernel
touches one cell per sample, a von Mises kernel touches all of them, and the
Lebesgue measure of the ``λ`` regulariser is a single "sample" spread over
every cell.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .domain import Periodic
from .gridfn import Grid1D, TensorSum, _products_except, value_and_grad


class UnsupportedMode(ValueError):
    pass


class SingularSystem(np.linalg.LinAlgError):
    pass


class SingularAssembly(SingularSystem):
    pass


@dataclass(frozen=True)
class KernelSpec:
    """Regularisation of the empirical minimisation problem.

    ``mode`` is ``"grid_delta"`` (samples act through hat-function evaluation)
    or ``"von_mises"`` (product von Mises kernel of width ``eps``).
    """

    mode: str = "grid_delta"
    lam: float = 1e-5
    eps: float | None = None

    def __post_init__(self):
        if self.mode not in ("grid_delta", "von_mises"):
            raise ValueError(f"unknown kernel mode {self.mode!r}")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.mode == "von_mises" and not (self.eps is not None and self.eps > 0):
            raise ValueError("von_mises kernel needs eps > 0")

    def check_well_posed(self):
        if self.mode == "grid_delta" and not self.lam > 0:
            raise ValueError(
                "grid_delta kernel requires lam > 0: without a positive kernel the "
                "minimisation is only well posed with a positive regulariser"
            )

    def to_dict(self) -> dict:
        return {"mode": self.mode, "lam": self.lam, "eps": self.eps}


# ---------------------------------------------------------------------------
# sample store


@dataclass(frozen=True)
class SampleRecord:
    z: np.ndarray
    g: np.ndarray
    w: float
    replica: int
    step: int


class OccupationStore:
    """Append-only log of ``(z, ∇_z V, weight, replica, step)`` records."""

    def __init__(self, d: int, capacity: int = 1024):
        self.d = int(d)
        cap = max(16, int(capacity))
        self._z = np.empty((cap, self.d))
        self._g = np.empty((cap, self.d))
        self._w = np.empty(cap)
        self._rep = np.empty(cap, dtype=np.int64)
        self._step = np.empty(cap, dtype=np.int64)
        self._n = 0
        self.total_weight = 0.0

    def __len__(self):
        return self._n

    def _grow(self, need: int):
        cap = self._w.shape[0]
        if need <= cap:
            return
        new = max(need, 2 * cap)
        for name in ("_z", "_g", "_w", "_rep", "_step"):
            old = getattr(self, name)
            buf = np.empty((new,) + old.shape[1:], dtype=old.dtype)
            buf[: self._n] = old[: self._n]
            setattr(self, name, buf)

    def record(self, z, g, w: float = 1.0, replica: int = 0, step: int = 0):
        self.record_batch(np.reshape(z, (1, -1)), np.reshape(g, (1, -1)),
                          np.array([w], dtype=float), np.array([replica]), np.array([step]))

    def record_batch(self, z, g, w, replica, step):
        z = np.asarray(z, dtype=float)
        g = np.asarray(g, dtype=float)
        n = z.shape[0]
        w = np.broadcast_to(np.asarray(w, dtype=float), (n,))
        if z.shape != (n, self.d) or g.shape != (n, self.d):
            raise ValueError(f"expected records of dimension {self.d}, got {z.shape} / {g.shape}")
        if not (np.all(np.isfinite(z)) and np.all(np.isfinite(g)) and np.all(np.isfinite(w))):
            raise ValueError("non-finite sample rejected")
        if np.any(w < 0):
            raise ValueError("negative sample weight rejected")
        self._grow(self._n + n)
        sl = slice(self._n, self._n + n)
        self._z[sl] = z
        self._g[sl] = g
        self._w[sl] = w
        self._rep[sl] = np.broadcast_to(replica, (n,))
        self._step[sl] = np.broadcast_to(step, (n,))
        self._n += n
        self.total_weight += float(np.sum(w))

    def extend(self, other: "OccupationStore"):
        if other.d != self.d:
            raise ValueError("dimension mismatch")
        if len(other):
            self.record_batch(other.z, other.g, other.w, other.replica, other.step)

    def _view(self, buf):
        v = buf[: self._n]
        v = v.view()
        v.setflags(write=False)
        return v

    @property
    def z(self):
        return self._view(self._z)

    @property
    def g(self):
        return self._view(self._g)

    @property
    def w(self):
        return self._view(self._w)

    @property
    def replica(self):
        return self._view(self._rep)

    @property
    def step(self):
        return self._view(self._step)

    def __getitem__(self, i) -> SampleRecord:
        return SampleRecord(self.z[i].copy(), self.g[i].copy(), float(self.w[i]),
                            int(self.replica[i]), int(self.step[i]))

    def subset(self, mask) -> "OccupationStore":
        out = OccupationStore(self.d, capacity=int(np.count_nonzero(mask)) if np.ndim(mask) else 16)
        idx = np.flatnonzero(mask) if np.asarray(mask).dtype == bool else np.asarray(mask)
        out.record_batch(self.z[idx], self.g[idx], self.w[idx], self.replica[idx], self.step[idx])
        return out

    # -- sample-log dump

    def to_csv(self, path):
        path = Path(path)
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["replica", "step"] + [f"z_{j + 1}" for j in range(self.d)]
                        + [f"g_{j + 1}" for j in range(self.d)] + ["w"])
            for i in range(self._n):
                wr.writerow([int(self._rep[i]), int(self._step[i])]
                            + [repr(float(x)) for x in self._z[i]]
                            + [repr(float(x)) for x in self._g[i]] + [repr(float(self._w[i]))])
        return path

    @classmethod
    def from_csv(cls, path) -> "OccupationStore":
        with open(path, newline="") as fh:
            rd = csv.reader(fh)
            header = next(rd)
            d = sum(1 for h in header if h.startswith("z_"))
            rows = [r for r in rd]
        store = cls(d, capacity=len(rows))
        if rows:
            a = np.array(rows, dtype=float)
            store.record_batch(a[:, 2:2 + d], a[:, 2 + d:2 + 2 * d], a[:, -1],
                               a[:, 0].astype(np.int64), a[:, 1].astype(np.int64))
        return store


def merge(stores: Sequence[OccupationStore]) -> OccupationStore:
    """Concatenate stores, ordered by replica id and then step."""
    stores = list(stores)
    if not stores:
        raise ValueError("nothing to merge")
    d = stores[0].d
    if any(s.d != d for s in stores):
        raise ValueError("dimension mismatch between stores")
    n = sum(len(s) for s in stores)
    out = OccupationStore(d, capacity=n)
    if n == 0:
        return out
    z = np.concatenate([s.z for s in stores])
    g = np.concatenate([s.g for s in stores])
    w = np.concatenate([s.w for s in stores])
    rep = np.concatenate([s.replica for s in stores])
    step = np.concatenate([s.step for s in stores])
    order = np.lexsort((step, rep))
    out.record_batch(z[order], g[order], w[order], rep[order], step[order])
    return out


# ---------------------------------------------------------------------------
# kernels


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(20)
_GL_T = 0.5 * (_GL_NODES + 1.0)
_GL_W = 0.5 * _GL_WEIGHTS


class VonMises1D:
    """``K(y, z) ∝ exp(-2 sin^2(π (z - y) / L) / eps^2)`` on a circle of length ``L``.

    The normalising constant is obtained once by periodic trapezoidal
    quadrature, which converges geometrically for this analytic integrand.
    """

    def __init__(self, eps: float, length: float, n_quad: int = 20000):
        self.eps = float(eps)
        self.length = float(length)
        u = np.arange(n_quad) * (self.length / n_quad)
        self.norm = float(np.sum(self._raw(u)) * self.length / n_quad)

    def _raw(self, diff):
        s = np.sin(math.pi * diff / self.length)
        return np.exp(-2.0 * s * s / (self.eps * self.eps))

    def __call__(self, y, z):
        return self._raw(np.asarray(z) - np.asarray(y)) / self.norm

    @property
    def min_value(self) -> float:
        return self._raw(self.length / 2) / self.norm


class CellMoments:
    """Kernel moments of a set of samples on the cells of one grid.

    ``cells[s, p]`` is a cell index and ``m[s, p, k]`` the moment
    ``∫_cell t^k K_s``.  Node-value arrays ``u`` may carry leading batch axes.
    """

    def __init__(self, grid: Grid1D, cells: np.ndarray, m: np.ndarray):
        self.grid = grid
        self.cells = np.asarray(cells, dtype=np.int64)
        self.m = np.asarray(m, dtype=float)
        left, right = grid.cell_nodes
        self.left = left[self.cells]
        self.right = right[self.cells]
        m0, m1, m2 = self.m[..., 0], self.m[..., 1], self.m[..., 2]
        # weights of the (left, left), (left, right), (right, right) products
        self.w_ll = m0 - 2 * m1 + m2
        self.w_lr = m1 - m2
        self.w_rr = m2
        self.w_l = m0 - m1
        self.w_r = m1
        self.m0 = m0

    @property
    def n_samples(self) -> int:
        return self.cells.shape[0]

    # -- constructors

    @classmethod
    def point(cls, grid: Grid1D, y) -> "CellMoments":
        cell, t = grid.locate(y)
        m = np.stack([np.ones_like(t), t, t * t], axis=-1)
        return cls(grid, cell[:, None], m[:, None, :])

    @classmethod
    def lebesgue(cls, grid: Grid1D) -> "CellMoments":
        h = grid.h
        c = grid.n_cells
        m = np.tile(np.array([h, h / 2, h / 3]), (1, c, 1))
        return cls(grid, np.arange(c)[None, :], m)

    @classmethod
    def von_mises(cls, grid: Grid1D, kernel: VonMises1D, y) -> "CellMoments":
        y = np.asarray(y, dtype=float)
        c = grid.n_cells
        h = grid.h
        x = grid.lo + (np.arange(c)[:, None] + _GL_T[None, :]) * h  # (C, G)
        k = kernel(y[:, None, None], x[None])  # (S, C, G)
        m = np.stack([h * np.einsum("scg,g->sc", k, _GL_W * _GL_T ** p) for p in range(3)], axis=-1)
        return cls(grid, np.broadcast_to(np.arange(c), (y.shape[0], c)), m)

    # -- sample-wise integrals (return shape (..., S))

    def _ends(self, u):
        u = np.asarray(u, dtype=float)
        return u[..., self.left], u[..., self.right]

    def integral(self, u):
        ul, ur = self._ends(u)
        return np.sum(ul * self.w_l + ur * self.w_r, axis=-1)

    def integral_d(self, u):
        ul, ur = self._ends(u)
        return np.sum((ur - ul) * self.m0, axis=-1) / self.grid.h

    def pair(self, u, v):
        ul, ur = self._ends(u)
        vl, vr = self._ends(v)
        return np.sum(ul * vl * self.w_ll + (ul * vr + ur * vl) * self.w_lr + ur * vr * self.w_rr,
                      axis=-1)

    def pair_d(self, u, v):
        ul, ur = self._ends(u)
        vl, vr = self._ends(v)
        return np.sum((ur - ul) * (vr - vl) * self.m0, axis=-1) / self.grid.h ** 2

    def total(self):
        return np.sum(self.m0, axis=-1)

    # -- reductions onto the hat basis

    def _scatter(self, yl, yr):
        n = self.grid.n_nodes
        return (np.bincount(self.left.ravel(), weights=np.ravel(yl), minlength=n)
                + np.bincount(self.right.ravel(), weights=np.ravel(yr), minlength=n))

    def load(self, coef):
        """``sum_s coef_s ∫ φ_a K_s`` for every node ``a``."""
        c = np.asarray(coef, dtype=float)[:, None]
        return self._scatter(c * self.w_l, c * self.w_r)

    def load_d(self, coef):
        """``sum_s coef_s ∫ φ_a' K_s``."""
        y = np.asarray(coef, dtype=float)[:, None] * self.m0 / self.grid.h
        return self._scatter(-y, y)

    def _scatter_matrix(self, ll, lr, rr):
        n = self.grid.n_nodes
        L, R = self.left.ravel(), self.right.ravel()
        flat = (np.bincount(L * n + L, weights=np.ravel(ll), minlength=n * n)
                + np.bincount(R * n + R, weights=np.ravel(rr), minlength=n * n)
                + np.bincount(L * n + R, weights=np.ravel(lr), minlength=n * n)
                + np.bincount(R * n + L, weights=np.ravel(lr), minlength=n * n))
        return flat.reshape(n, n)

    def gram(self, coef):
        """``sum_s coef_s ∫ φ_a φ_b K_s``."""
        c = np.asarray(coef, dtype=float)[:, None]
        return self._scatter_matrix(c * self.w_ll, c * self.w_lr, c * self.w_rr)

    def gram_d(self, coef):
        """``sum_s coef_s ∫ φ_a' φ_b' K_s``."""
        y = np.asarray(coef, dtype=float)[:, None] * self.m0 / self.grid.h ** 2
        return self._scatter_matrix(y, -y, y)

    def apply_gram(self, coef, U):
        """``sum_k gram(coef[k]) @ U[k]`` without forming the matrices."""
        ul, ur = self._ends(U)  # (K, S, P)
        zl = np.einsum("ks,ksp->sp", coef, ul)
        zr = np.einsum("ks,ksp->sp", coef, ur)
        return self._scatter(zl * self.w_ll + zr * self.w_lr, zl * self.w_lr + zr * self.w_rr)

    def apply_gram_d(self, coef, U):
        ul, ur = self._ends(U)
        zs = np.einsum("ks,ksp->sp", coef, ur - ul) * self.m0 / self.grid.h ** 2
        return self._scatter(-zs, zs)

    def band_grams(self):
        """Per-sample local matrices ``(S, P, 2, 2)`` of ``∫ φφ K`` and ``∫ φ'φ' K``."""
        g = np.stack([np.stack([self.w_ll, self.w_lr], -1), np.stack([self.w_lr, self.w_rr], -1)], -2)
        y = self.m0 / self.grid.h ** 2
        gd = np.stack([np.stack([y, -y], -1), np.stack([-y, y], -1)], -2)
        return g, gd

    def loads(self):
        """Dense per-sample load vectors ``(S, M)`` for ``∫ φ K`` and ``∫ φ' K``."""
        s = self.n_samples
        n = self.grid.n_nodes
        out0 = np.zeros((s, n))
        out1 = np.zeros((s, n))
        rows = np.broadcast_to(np.arange(s)[:, None], self.left.shape)
        y = self.m0 / self.grid.h
        np.add.at(out0, (rows, self.left), self.w_l)
        np.add.at(out0, (rows, self.right), self.w_r)
        np.add.at(out1, (rows, self.left), -y)
        np.add.at(out1, (rows, self.right), y)
        return out0, out1


def _von_mises_kernels(kernel: KernelSpec, grids: Sequence[Grid1D]):
    out = []
    for g in grids:
        if not isinstance(g.domain, Periodic):
            raise UnsupportedMode("von_mises kernel is only defined on periodic coordinates")
        out.append(VonMises1D(kernel.eps, g.domain.length))
    return out


def data_moments(store: OccupationStore, kernel: KernelSpec, grids: Sequence[Grid1D]):
    z = store.z
    if kernel.mode == "grid_delta":
        return [CellMoments.point(g, z[:, j]) for j, g in enumerate(grids)]
    vms = _von_mises_kernels(kernel, grids)
    return [CellMoments.von_mises(g, vm, z[:, j]) for j, (g, vm) in enumerate(zip(grids, vms))]


# ---------------------------------------------------------------------------
# pointwise kernel-smoothed moments


def _kernel_at(store, kernel, grids, z):
    if kernel.mode != "von_mises":
        raise UnsupportedMode("pointwise density/mean force require a von_mises kernel")
    vms = _von_mises_kernels(kernel, grids)
    z = np.asarray(z, dtype=float)
    k = np.ones(len(store))
    for j, vm in enumerate(vms):
        k = k * vm(store.z[:, j], z[j])
    return k


def theta_at(store: OccupationStore, kernel: KernelSpec, grids, z) -> float:
    """Kernel-smoothed density ``(λ + ∫ K(y, z) dν(y)) / (1 + λ)``."""
    k = _kernel_at(store, kernel, grids, z)
    dens = float(np.sum(store.w * k) / store.total_weight) if len(store) else 0.0
    return (kernel.lam + dens) / (1.0 + kernel.lam)


def force_moment_at(store: OccupationStore, kernel: KernelSpec, grids, z) -> np.ndarray:
    """Kernel-weighted mean force ``F_ν(z)``."""
    k = _kernel_at(store, kernel, grids, z)
    wk = store.w * k / store.total_weight
    num = wk @ store.g
    theta = (kernel.lam + float(np.sum(wk))) / (1.0 + kernel.lam)
    return num / ((1.0 + kernel.lam) * theta)


# ---------------------------------------------------------------------------
# assembly of the 1D Galerkin systems


@dataclass
class System1D:
    """Quadratic model ``c^T A c - 2 rhs^T c`` for the node values of one factor."""

    grid: Grid1D
    matrix: np.ndarray
    rhs: np.ndarray
    j: int

    @property
    def constraint(self) -> np.ndarray:
        return self.grid.weights

    def __iter__(self):
        yield self.matrix
        yield self.rhs


_LETTERS = "abcdefghij"


def _contract(tensor, coefs):
    """``sum_a tensor[b, a_1..a_d] prod_l coefs[l][b, a_l]``; ``None`` leaves an axis free."""
    d = tensor.ndim - 1
    ins = ["z" + _LETTERS[:d]]
    ops = [tensor]
    out = "z"
    for l, c in enumerate(coefs):
        if c is None:
            out += _LETTERS[l]
        else:
            ins.append("z" + _LETTERS[l])
            ops.append(c)
    return np.einsum(",".join(ins) + "->" + out, *ops, optimize=True)


class BinnedPointData:
    """Exact compression of grid-delta samples into per-cell monomial moments.

    With point evaluation every quantity entering the 1D systems is a
    polynomial of degree at most 2 in each local cell coordinate ``t_l``.
    Summing ``w prod_l t_l^{a_l}`` over the samples of each occupied
    ``d``-dimensional cell therefore reproduces the per-sample assembly
    while the ALS sweeps only touch the occupied cells.
    """

    def __init__(self, grids, cells, ts, w):
        self.grids = tuple(grids)
        self.d = d = len(self.grids)
        shape = tuple(g.n_cells for g in self.grids)
        key = np.ravel_multi_index(tuple(cells), shape)
        uniq, self.inv = np.unique(key, return_inverse=True)
        self.n_bins = b = uniq.size
        self.bin_cells = np.unravel_index(uniq, shape)
        self.ts = ts
        self.w = w
        pw = [[np.ones_like(t), t, t * t] for t in ts]
        self.W = np.zeros((b,) + (3,) * d)
        for a in itertools.product(range(3), repeat=d):
            v = w.copy()
            for l in range(d):
                if a[l]:
                    v = v * pw[l][a[l]]
            self.W[(slice(None),) + a] = np.bincount(self.inv, weights=v, minlength=b)
        self._res = None
        self.RW = None

    @staticmethod
    def worthwhile(n_samples: int, grids) -> bool:
        d = len(grids)
        return d <= 3 and 4 * n_samples > (3 ** d) * int(np.prod([g.n_cells for g in grids]))

    def set_residual(self, residual):
        if residual is self._res:
            return
        d, b = self.d, self.n_bins
        self.RW = np.zeros((d, b) + (2,) * d)
        for h in range(d):
            base = self.w * residual[:, h]
            for a in itertools.product(range(2), repeat=d):
                v = base
                for l in range(d):
                    if a[l]:
                        v = v * self.ts[l]
                self.RW[(h, slice(None)) + a] = np.bincount(self.inv, weights=v, minlength=b)
        self._res = residual

    def system(self, j, factors):
        d = self.d
        gj = self.grids[j]
        left, right = gj.cell_nodes
        cl, cr = left[self.bin_cells[j]], right[self.bin_cells[j]]
        lin, sq, slope = {}, {}, {}
        for l in range(d):
            if l == j:
                continue
            g = self.grids[l]
            lo_, hi_ = g.cell_nodes
            al = factors[l][lo_[self.bin_cells[l]]]
            be = factors[l][hi_[self.bin_cells[l]]] - al
            lin[l] = np.stack([al, be], -1)
            sq[l] = np.stack([al * al, 2 * al * be, be * be], -1)
            sl = be / g.h
            slope[l] = sl
        zero3 = np.zeros(self.n_bins)
        xp = _contract(self.W, [None if l == j else sq[l] for l in range(d)])  # (B, 3)
        xq = np.zeros_like(xp)
        for h in sq:
            co = [None if l == j else sq[l] for l in range(d)]
            co[h] = np.stack([slope[h] ** 2, zero3, zero3], -1)
            xq += _contract(self.W, co)
        n = gj.n_nodes
        hj = gj.h
        gd = xp[:, 0] / hj ** 2
        ll = xq[:, 0] - 2 * xq[:, 1] + xq[:, 2]
        lr = xq[:, 1] - xq[:, 2]
        rr = xq[:, 2]
        flat = (np.bincount(cl * n + cl, weights=gd + ll, minlength=n * n)
                + np.bincount(cr * n + cr, weights=gd + rr, minlength=n * n)
                + np.bincount(cl * n + cr, weights=lr - gd, minlength=n * n)
                + np.bincount(cr * n + cl, weights=lr - gd, minlength=n * n))
        a = flat.reshape(n, n)
        zero2 = np.zeros(self.n_bins)
        y = _contract(self.RW[j], [None if l == j else lin[l] for l in range(d)])[:, 0] / hj
        z = np.zeros((self.n_bins, 2))
        for h in lin:
            co = [None if l == j else lin[l] for l in range(d)]
            co[h] = np.stack([slope[h], zero2], -1)
            z += _contract(self.RW[h], co)
        b = (np.bincount(cl, weights=z[:, 0] - z[:, 1] - y, minlength=n)
             + np.bincount(cr, weights=z[:, 1] + y, minlength=n))
        return a, b


def _others(arrs, j):
    return [a for l, a in enumerate(arrs) if l != j]


class Assembler:
    """Reusable assembly context for one occupation snapshot.

    With a grid-delta kernel the data term only needs the residual force
    ``g_s - ∇f(z_s)`` at each sample; a von Mises kernel needs the full
    kernel cross terms with ``f``.
    """

    def __init__(self, store: OccupationStore, kernel: KernelSpec, grids: Sequence[Grid1D]):
        self.kernel = kernel
        self.grids = tuple(grids)
        self.d = len(self.grids)
        if store.d != self.d:
            raise ValueError("store and grids disagree on dimension")
        self.n = len(store)
        if self.n == 0 and kernel.lam <= 0:
            raise ValueError("empty occupation store with lam = 0")
        self.weights = store.w / store.total_weight if self.n else np.zeros(0)
        self.forces = np.array(store.g)
        self.z = np.array(store.z)
        self.point = kernel.mode == "grid_delta"
        self.data = data_moments(store, kernel, self.grids) if self.n else None
        self.reg = [CellMoments.lebesgue(g) for g in self.grids]
        self.force_sq = float(self.weights @ np.sum(self.forces ** 2, axis=1)) if self.n else 0.0
        self.binned = None
        if self.point and self.n and BinnedPointData.worthwhile(self.n, self.grids):
            self.binned = self.make_binned()

    def make_binned(self) -> BinnedPointData:
        cells, ts = [], []
        for g, z in zip(self.grids, self.z.T):
            c, t = g.locate(z)
            cells.append(c)
            ts.append(t)
        return BinnedPointData(self.grids, cells, ts, self.weights)

    # -- generic block formula

    def _block(self, mom, w, j, r, forces=None, stacks=None):
        """Quadratic and linear parts contributed by one kernel block."""
        d = self.d
        mj = mom[j]
        if d == 1:
            a = mj.gram_d(w)
            b = np.zeros(self.grids[j].n_nodes)
            if forces is not None:
                b += mj.load_d(w * forces[:, 0])
            if stacks is not None:
                b -= mj.apply_gram_d(np.broadcast_to(w, (stacks[0].shape[0], w.size)), stacks[0])
            return a, b
        oth = [l for l in range(d) if l != j]
        p0 = [mom[l].pair(r[l], r[l]) for l in oth]
        pd = [mom[l].pair_d(r[l], r[l]) for l in oth]
        ex = _products_except(p0)
        prod_all = ex[0] * p0[0]
        qcoef = sum(pd[i] * ex[i] for i in range(len(oth)))
        a = mj.gram_d(w * prod_all) + mj.gram(w * qcoef)
        b = np.zeros(self.grids[j].n_nodes)
        if forces is not None:
            i0 = [mom[l].integral(r[l]) for l in oth]
            d1 = [mom[l].integral_d(r[l]) for l in oth]
            ex0 = _products_except(i0)
            all0 = ex0[0] * i0[0]
            b += mj.load_d(w * forces[:, j] * all0)
            b += mj.load(w * sum(forces[:, l] * d1[i] * ex0[i] for i, l in enumerate(oth)))
        if stacks is not None and stacks[0].shape[0] > 0:
            x0 = [mom[l].pair(stacks[l], r[l]) for l in oth]  # (K, S)
            xd = [mom[l].pair_d(stacks[l], r[l]) for l in oth]
            exk = _products_except(x0)
            coef_a = w * (exk[0] * x0[0])
            coef_b = w * sum(xd[i] * exk[i] for i in range(len(oth)))
            b -= mj.apply_gram_d(coef_a, stacks[j]) + mj.apply_gram(coef_b, stacks[j])
        return a, b

    def _point_block(self, j, r, residual):
        """Grid-delta data term written with the pointwise residual force."""
        mom = self.data
        w = self.weights
        d = self.d
        mj = mom[j]
        if d == 1:
            return mj.gram_d(w), mj.load_d(w * residual[:, 0])
        oth = [l for l in range(d) if l != j]
        v = [mom[l].integral(r[l]) for l in oth]  # point values r_l(z_l)
        s = [mom[l].integral_d(r[l]) for l in oth]  # slopes
        ex = _products_except(v)
        p = ex[0] * v[0]
        hs = [s[i] * ex[i] for i in range(len(oth))]
        q2 = sum(hh * hh for hh in hs)
        a = mj.gram_d(w * p * p) + mj.gram(w * q2)
        b = mj.load_d(w * residual[:, j] * p)
        b += mj.load(w * sum(residual[:, l] * hs[i] for i, l in enumerate(oth)))
        return a, b

    def system(self, j: int, factors, f: TensorSum | None = None, residual=None) -> System1D:
        """Assemble the system for factor ``j`` with the other factors fixed.

        ``factors`` holds node-value arrays for all coordinates (entry ``j`` is
        ignored).  ``f`` is the current approximation.  With a grid-delta
        kernel ``residual`` (``g_s - ∇f(z_s)``) may be passed to skip
        evaluating ``f`` at the samples.
        """
        r = [np.asarray(x, dtype=float) for x in factors]
        stacks = f.stacks() if f is not None else None
        if stacks is not None and stacks[0].shape[0] == 0:
            stacks = None
        m = self.grids[j].n_nodes
        a = np.zeros((m, m))
        b = np.zeros(m)
        if self.n:
            if self.point:
                if residual is None:
                    residual = self.residual(f)
                if self.binned is not None:
                    self.binned.set_residual(residual)
                    da, db = self.binned.system(j, r)
                else:
                    da, db = self._point_block(j, r, residual)
            else:
                da, db = self._block(self.data, self.weights, j, r, self.forces, stacks)
            a += da
            b += db
        if self.kernel.lam > 0:
            lam = np.array([self.kernel.lam])
            ra, rb = self._block(self.reg, lam, j, r, None, stacks)
            a += ra
            b += rb
        a = 0.5 * (a + a.T)
        if np.any(np.diag(a) <= 0) and self.kernel.lam == 0:
            raise SingularAssembly(
                f"coordinate {j}: some nodes carry no data and lam = 0; the system is singular")
        return System1D(self.grids[j], a, b, j)

    def residual(self, f: TensorSum | None):
        if f is None:
            return self.forces.copy()
        _, g = value_and_grad(f, self.z)
        return self.forces - g


def assemble_1d_system(store: OccupationStore, kernel: KernelSpec, j: int, fixed_factors,
                       current_bias: TensorSum, grids=None) -> System1D:
    """One-shot assembly; ``fixed_factors`` lists the ``d - 1`` other factors in order."""
    grids = tuple(grids) if grids is not None else current_bias.grids
    fixed = [np.asarray(getattr(x, "values", x), dtype=float) for x in fixed_factors]
    factors = fixed[:j] + [np.zeros(grids[j].n_nodes)] + fixed[j:]
    return Assembler(store, kernel, grids).system(j, factors, current_bias)
