"""Histograms, flatness diagnostics, reweighting and free-energy surfaces."""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .gridfn import Grid1D, TensorSum, bias_evaluator, value_and_grad
from .occupation import OccupationStore

MAX_HIST_DIM = 3


@dataclass
class HistogramND:
    """Weighted histogram; ``edges[k]`` are the bin edges of axis ``axes[k]``."""

    axes: tuple
    edges: tuple
    counts: np.ndarray

    @property
    def total(self) -> float:
        return float(self.counts.sum())

    @property
    def centers(self):
        return tuple(0.5 * (e[1:] + e[:-1]) for e in self.edges)


def _axis_range(g: Grid1D | tuple):
    if isinstance(g, Grid1D):
        return g.lo, g.lo + g.size
    return float(g[0]), float(g[1])


def histogram(store: OccupationStore, axes: Sequence[int], bins: int | Sequence[int],
              ranges: Sequence, weights=None) -> HistogramND:
    """Weighted binning of the samples along the given (0-based) axes.

    ``ranges[k]`` is a :class:`Grid1D` or a ``(lo, hi)`` pair.  Samples on
    the upper edge fall in the last bin.
    """
    axes = tuple(int(a) for a in axes)
    if len(axes) > MAX_HIST_DIM:
        raise ValueError(f"histograms above {MAX_HIST_DIM} dimensions are refused; "
                         "use per-coordinate histograms instead")
    if isinstance(bins, int):
        bins = [bins] * len(axes)
    w = store.w if weights is None else np.asarray(weights, dtype=float)
    edges = []
    idx = []
    for a, nb, rg in zip(axes, bins, ranges):
        lo, hi = _axis_range(rg)
        edges.append(np.linspace(lo, hi, nb + 1))
        u = (store.z[:, a] - lo) / (hi - lo) * nb
        idx.append(np.clip(np.floor(u).astype(np.int64), 0, nb - 1))
    shape = tuple(bins)
    if len(store):
        flat = np.ravel_multi_index(tuple(idx), shape)
        counts = np.bincount(flat, weights=w, minlength=int(np.prod(shape))).reshape(shape)
    else:
        counts = np.zeros(shape)
    return HistogramND(axes, tuple(edges), counts)


def marginal_histograms(store: OccupationStore, bins: int, ranges) -> list:
    return [histogram(store, [j], bins, [ranges[j]]) for j in range(store.d)]


def flatness(h: HistogramND) -> dict:
    """Visited fraction and max/min ratio over the visited bins."""
    c = h.counts
    visited = c > 0
    frac = float(np.count_nonzero(visited) / c.size)
    ratio = float(c[visited].max() / c[visited].min()) if np.any(visited) else float("inf")
    return {"visited_fraction": frac, "max_min_ratio": ratio, "support": "visited bins"}


def basin_mass(h: HistogramND, mask: np.ndarray) -> float:
    """Fraction of the histogram mass inside a boolean bin mask."""
    return float(h.counts[mask].sum() / h.total)


# ---------------------------------------------------------------------------
# reweighting


def weights_from_schedule(store: OccupationStore, bias: TensorSum, schedule, beta: float,
                          steps_per_segment: int) -> np.ndarray:
    """Reconstruct ``exp(-β A_s(z_s))`` for an unweighted run.

    ``schedule[k] = (n_terms, baseline)`` describes the bias frozen during
    segment ``k``: the first ``n_terms`` terms of ``bias`` plus ``baseline``.
    Samples are assigned to segments by their (global, 1-based) step index.
    """
    seg = (np.asarray(store.step) - 1) // steps_per_segment
    logw = np.zeros(len(store))
    for k, (n_terms, baseline) in enumerate(schedule):
        sel = seg == k
        if not np.any(sel):
            continue
        a = TensorSum(bias.grids, [f[:n_terms] for f in bias.factors], bias.zero_mean[:n_terms], baseline)
        logw[sel] = -beta * bias_evaluator(a)(store.z[sel])[0]
    logw -= logw.max() if logw.size else 0.0
    return np.exp(logw)


def reweighted_expectation(store: OccupationStore, phi: Callable, weights=None) -> float:
    """Ratio estimator ``Σ w φ(z) / Σ w`` (stored weights unless ``weights`` is given)."""
    if len(store) == 0:
        raise ValueError("empty store")
    w = store.w if weights is None else np.asarray(weights, dtype=float)
    tot = float(np.sum(w))
    if not tot > 0:
        raise ValueError("all weights are zero")
    vals = np.asarray(phi(store.z), dtype=float)
    return float(np.sum(w * vals) / tot)


# ---------------------------------------------------------------------------
# surfaces


def center(surface):
    s = np.asarray(surface, dtype=float)
    return s - s.mean()


def node_surface(f: TensorSum, include_baseline: bool = True) -> np.ndarray:
    """Values of ``f`` on all grid nodes (periodic duplicates excluded)."""
    axes = [g.nodes for g in f.grids]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, f.d)
    v, _ = value_and_grad(f, pts, include_baseline)
    return v.reshape(tuple(a.size for a in axes))


def free_energy_slice(bias: TensorSum, free_axes: tuple[int, int], fixed: dict, out_grids,
                      include_baseline: bool = True) -> np.ndarray:
    """``bias`` on ``out_grids[0] x out_grids[1]`` along ``free_axes``, others held at ``fixed``."""
    a0, a1 = free_axes
    x0, x1 = (np.asarray(getattr(g, "nodes", g), dtype=float) for g in out_grids)
    X0, X1 = np.meshgrid(x0, x1, indexing="ij")
    pts = np.zeros(X0.shape + (bias.d,))
    for j in range(bias.d):
        if j == a0:
            pts[..., j] = X0
        elif j == a1:
            pts[..., j] = X1
        else:
            if j not in fixed:
                raise ValueError(f"no value given for coordinate {j}")
            pts[..., j] = fixed[j]
    v, _ = value_and_grad(bias, pts.reshape(-1, bias.d), include_baseline)
    return v.reshape(X0.shape)


def relative_l2_error(estimate, reference) -> float:
    e = center(estimate)
    r = center(reference)
    return float(np.linalg.norm(e - r) / np.linalg.norm(r))


# ---------------------------------------------------------------------------
# CSV output


def write_surface_csv(path, x0, x1, values, names=("z1", "z2")):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow([names[0], names[1], "value"])
        for i, a in enumerate(x0):
            for j, b in enumerate(x1):
                wr.writerow([repr(float(a)), repr(float(b)), repr(float(values[i, j]))])


def write_histogram_csv(path, h: HistogramND):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow([f"z{a + 1}" for a in h.axes] + ["count"])
        for idx in itertools.product(*(range(c.size) for c in h.centers)):
            wr.writerow([repr(float(h.centers[k][i])) for k, i in enumerate(idx)]
                        + [repr(float(h.counts[idx]))])
