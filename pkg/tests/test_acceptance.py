"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -v`` for the full set, or add
``-m "not slow"`` to skip the two long statistical runs.
"""

import math

import numpy as np
import pytest
import scipy.integrate

from tabf.checks import synthetic_store
from tabf.config import RECORD_DT, from_dict, preset
from tabf.domain import ExtendedState, FourierProfile, Periodic, PolymerRing, SeparableTest, ToyModel3D, fd_check, min_image
from tabf.estimators import basin_mass, flatness, free_energy_slice, histogram, node_surface, relative_l2_error
from tabf.greedy import ALSConfig, directional_derivative, greedy_run, increment_norm_sq
from tabf.gridfn import Grid1D, TensorSum
from tabf.occupation import KernelSpec, OccupationStore
from tabf.oracle import grid_minimizer, tabulate, toy_basin, toy_free_energy
from tabf.orchestrator import run_tabf, run_unbiased
from tabf.sampler import Ensemble, IntegratorConfig, run_segment

TWO_PI = 2 * math.pi


# ---------------------------------------------------------------------------
# 1. gradients


def _states(pot, rng, n):
    box = pot.box()
    for _ in range(n):
        if isinstance(pot, PolymerRing):
            s = pot.initial_state(rng, jitter=0.3)
            yield ExtendedState(s.q, rng.uniform(pot.z_lo, pot.z_hi, box.dim_z))
        else:
            yield ExtendedState(rng.uniform(0, box.box_length_q, box.dim_q),
                                rng.uniform(0, box.z_domain.size, box.dim_z))


def test_criterion_1_gradients(verdict):
    rng = np.random.default_rng(1)
    pots = {
        "toy": ToyModel3D(),
        "polymer-continuous": PolymerRing(25, 3),
        "polymer-literal": PolymerRing(25, 3, wca_form="literal"),
        "separable": SeparableTest((FourierProfile((1.0,), (0.3,)), FourierProfile((0.0, 0.6), (0.5,)))),
    }
    worst = {name: max(fd_check(p, s) for s in _states(p, rng, 100)) for name, p in pots.items()}
    ok = max(worst.values()) < 1e-6
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    assert verdict(1, "analytic vs central-difference gradients (100 states each)", ok, detail)


# ---------------------------------------------------------------------------
# 2. greedy invariants


def test_criterion_2_greedy_invariants(verdict):
    worst_trace = worst_mean = worst_ls = 0.0
    for seed in range(20):
        d = (2, 3, 5)[seed % 3]
        grids = [Grid1D(10, Periodic(TWO_PI)) for _ in range(d)]
        store = synthetic_store(d, 400, seed)
        kernel = KernelSpec("grid_delta", 1e-3)
        res = greedy_run(store, kernel, TensorSum(grids), 2 * d, ALSConfig(init_seed=seed))
        tr = np.array(res.trace)
        worst_trace = max(worst_trace, float(np.max(np.diff(tr))) / abs(tr[0]))
        f = TensorSum(grids)
        for term in res.terms:
            f = f.append(term)
            worst_mean = max(worst_mean, term.zero_mean_defect())
            if term.is_zero():
                continue
            scale = math.sqrt(increment_norm_sq(term, store, kernel) * tr[0])
            worst_ls = max(worst_ls, abs(directional_derivative(f, term, store, kernel)) / scale)
    ok = worst_trace <= 1e-12 and worst_mean <= 1e-12 and worst_ls <= 1e-8
    detail = (f"max relative increase {worst_trace:.1e}, zero-mean defect {worst_mean:.1e}, "
              f"line-search residual {worst_ls:.1e} (20 stores)")
    assert verdict(2, "greedy monotonicity, zero mean, stationarity", ok, detail)


# ---------------------------------------------------------------------------
# 3. oracle equivalence


def test_criterion_3_oracle_equivalence(verdict):
    grids = [Grid1D(30, Periodic(TWO_PI))] * 2
    store = synthetic_store(2, 20_000, seed=3)
    kernel = KernelSpec("grid_delta", 1e-3)
    sol = grid_minimizer(store, kernel, grids)
    res = greedy_run(store, kernel, TensorSum(grids), 60, ALSConfig(init_seed=1))
    gap = np.array(res.trace) - sol.objective()
    reached = np.flatnonzero(gap <= 1e-3 * gap[0])
    f = TensorSum(grids)
    identity = 0.0
    for n, term in enumerate(res.terms, start=1):
        f = f.append(term)
        if n % 10 == 0:
            dist = sol.norm_sq(tabulate(f) - sol.values)
            identity = max(identity, abs(gap[n] - dist) / gap[0])
    monotone = bool(np.all(np.diff(gap) <= 1e-12 * gap[0]))
    ok = reached.size > 0 and reached[0] <= 60 and monotone and identity < 1e-8
    first = int(reached[0]) if reached.size else None
    detail = (f"gap/gap0 = {gap[-1] / gap[0]:.1e} at m = 60, below 1e-3 from m = {first}, "
              f"monotone = {monotone}, |gap - dist²|/gap0 <= {identity:.1e}")
    assert verdict(3, "greedy approaches the full-grid minimiser", ok, detail)


# ---------------------------------------------------------------------------
# 4. planted separable recovery


def test_criterion_4_planted_separable(verdict):
    x = np.arange(30) / 30
    a = np.cos(TWO_PI * x) + 0.3 * np.sin(2 * TWO_PI * x)
    b = 0.6 * np.cos(2 * TWO_PI * x) + 0.5 * np.sin(TWO_PI * x)
    a -= a.mean()
    b -= b.mean()
    cfg = from_dict({
        "experiment": "separable-test", "seed": 4, "n_replicas": 30,
        "potential": {"kind": "separable", "dim_q": 2, "w_amp": 1.0,
                      "profiles": [{"kind": "pl", "values": a.tolist()},
                                   {"kind": "pl", "values": b.tolist()}]},
        "schedule": {"t_up": 10.0, "n_up": 2, "m_per_update": 8},
    })
    assert cfg.t_total == pytest.approx(20.0)
    res = run_tabf(cfg)
    err = relative_l2_error(node_surface(res.bias), a[:, None] + b[None, :])
    assert verdict(4, "planted separable free energy recovered", err < 0.05, f"relative L2 error {err:.2e}")


# ---------------------------------------------------------------------------
# 5. toy model, beta = 1


def test_criterion_5_toy_beta1(verdict):
    cfg = preset("toy_beta1")
    res = run_tabf(cfg)
    g1, g2 = res.grids
    err = relative_l2_error(node_surface(res.bias), toy_free_energy(1.0, g1.nodes, g2.nodes))
    flat = flatness(histogram(res.samples, [0, 1], 30, res.grids))
    ok = err < 0.15 and flat["visited_fraction"] == 1.0 and flat["max_min_ratio"] < 10
    detail = (f"seed {cfg.seed}: relative L2 error {err:.3f} (< 0.15), visited fraction "
              f"{flat['visited_fraction']:.3f} (= 1), max/min bin ratio {flat['max_min_ratio']:.2f} (< 10)")
    assert verdict(5, "toy beta = 1 free energy and flat histogram", ok, detail)


# ---------------------------------------------------------------------------
# 6. metastability contrast, beta = 5


@pytest.mark.slow
def test_criterion_6_metastability_beta5(verdict):
    # basin: watershed of the oracle surface (30x30 bin centres) around the start (0, 0)
    cfg = preset("toy_beta5")
    plain = run_unbiased(cfg)
    mass = basin_mass(histogram(plain.samples, [0, 1], 30, plain.grids), toy_basin(5.0, 30, (0.0, 0.0)))
    biased = run_tabf(cfg)
    frac = flatness(histogram(biased.samples, [0, 1], 30, biased.grids))["visited_fraction"]
    ok = mass >= 0.95 and frac >= 0.95
    detail = f"unbiased mass in start basin {mass:.3f} (>= 0.95), TABF visited fraction {frac:.3f} (>= 0.95)"
    assert verdict(6, "beta = 5 metastability contrast", ok, detail)


# ---------------------------------------------------------------------------
# 7. polymer coupling sign


@pytest.mark.slow
def test_criterion_7_polymer_coupling_sign(verdict):
    cfg = preset("polymer_d3")
    res = run_tabf(cfg)
    pts = ([0.0, 1.0], [0.0, 1.0])
    s0 = free_energy_slice(res.bias, (0, 1), {2: 0.0}, pts, include_baseline=False)
    s1 = free_energy_slice(res.bias, (0, 1), {2: 1.0}, pts, include_baseline=False)
    ok = s0[0, 0] < s1[0, 0] and s1[1, 1] < s0[1, 1]
    # reported only: the mixed difference does not depend on how separable
    # parts are split between baseline and tensor terms
    mixed = (s1[1, 1] - s0[1, 1]) - (s1[0, 0] - s0[0, 0])
    f0 = free_energy_slice(res.bias, (0, 1), {2: 0.0}, pts)
    f1 = free_energy_slice(res.bias, (0, 1), {2: 1.0}, pts)
    detail = (f"A(0,0|0) = {s0[0, 0]:.3f} vs A(0,0|1) = {s1[0, 0]:.3f}; "
              f"A(1,1|1) = {s1[1, 1]:.3f} vs A(1,1|0) = {s0[1, 1]:.3f}; "
              f"mixed difference {mixed:.3f}; with baseline "
              f"A(0,0|0..1) = {f0[0, 0]:.3f}..{f1[0, 0]:.3f}, A(1,1|0..1) = {f0[1, 1]:.3f}..{f1[1, 1]:.3f}")
    assert verdict(7, "polymer coupling favours (0,0) at z3 = 0", ok, detail)


def test_criterion_7_storage_assertion():
    # full reproduction: d = 5, m = 4d per update over 7 updates, M = 30
    m_total = 4 * 5 * 7
    assert 5 * m_total * 30 < 1e-3 * 30**5


# ---------------------------------------------------------------------------
# 8. sampler statistics


def _zero_drift_check():
    pot = SeparableTest((FourierProfile(),), dim_q=1, w_amp=0.0)
    cfg = IntegratorConfig(beta=2.0, seed=8)
    ens = Ensemble(pot, np.zeros((200, 1)), np.full((200, 1), 0.5), cfg)
    prev = ens.z.copy()
    inc = []

    def grab(_):
        nonlocal prev
        inc.append(min_image(ens.z, prev, 1.0)[:, 0])
        prev = ens.z.copy()

    ens.advance(1000, on_step=grab)
    x = np.concatenate(inc)
    var = 2 * cfg.dt / cfg.beta
    z_mean = abs(x.mean()) / math.sqrt(var / x.size)
    z_var = abs(x.var() - var) / (var * math.sqrt(2 / x.size))
    return z_mean, z_var


def _gibbs_check():
    profile = FourierProfile((0.0, 1.0))  # double well cos(4πz) on [0, 1)
    pot = SeparableTest((profile,), dim_q=1, w_amp=1.0)
    rng = np.random.default_rng(80)
    # start from exact Gibbs draws (inverse CDF on a fine grid)
    xs = np.linspace(0, 1, 20001)
    dens = np.exp(-profile.value(xs))
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(xs))])
    n_rep = 1000
    z0 = np.interp(rng.uniform(0, cdf[-1], n_rep), cdf, xs)
    q0 = rng.uniform(0, 1, (n_rep, 1))
    ens = Ensemble(pot, q0, z0[:, None], IntegratorConfig(beta=1.0, seed=81))
    store = OccupationStore(1, capacity=n_rep * 1000)
    run_segment(ens, None, 20 * 1000, store)
    h = histogram(store, [0], 30, [(0.0, 1.0)]).counts / len(store)
    norm = scipy.integrate.quad(lambda u: math.exp(-profile.value(u)), 0, 1, limit=200)[0]
    edges = np.linspace(0, 1, 31)
    ref = np.array([scipy.integrate.quad(lambda u: math.exp(-profile.value(u)), lo, hi)[0]
                    for lo, hi in zip(edges[:-1], edges[1:])]) / norm
    return float(np.max(np.abs(h - ref)) / ref.max()), len(store)


def test_criterion_8_sampler_statistics(verdict):
    z_mean, z_var = _zero_drift_check()
    sup, n = _gibbs_check()
    ok = z_mean < 3 and z_var < 3 and sup < 0.05
    detail = (f"zero drift: mean {z_mean:.2f} SE, variance {z_var:.2f} SE (< 3); "
              f"Gibbs histogram sup error {sup:.3f} of peak (< 0.05) over {n} samples")
    assert verdict(8, "sampler increments and Gibbs histogram", ok, detail)


# ---------------------------------------------------------------------------
# 9. determinism


def test_criterion_9_determinism(verdict, tmp_path):
    cfg = preset("toy_beta1", t_total=1.5)
    a = run_tabf(cfg, run_dir=tmp_path / "a")
    b = run_tabf(cfg, run_dir=tmp_path / "b")
    ha, hb = a.manifest["content_hash"], b.manifest["content_hash"]
    same_files = all((tmp_path / "a" / k).read_bytes() == (tmp_path / "b" / k).read_bytes()
                     for k in a.manifest["files"])
    ok = ha == hb and same_files
    assert verdict(9, "identical config and seed give identical manifests", ok,
                   f"hash {ha[:16]}... twice, output files identical = {same_files}")
