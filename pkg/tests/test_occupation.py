import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tabf.checks import synthetic_store
from tabf.domain import Periodic, Reflected
from tabf.greedy import solve_1d
from tabf.gridfn import Grid1D, PLFunction, TensorSum
from tabf.occupation import (
    Assembler,
    BinnedPointData,
    CellMoments,
    KernelSpec,
    OccupationStore,
    SingularAssembly,
    UnsupportedMode,
    VonMises1D,
    assemble_1d_system,
    force_moment_at,
    merge,
    theta_at,
)

TWO_PI = 2 * math.pi


def test_kernel_spec_validation():
    with pytest.raises(ValueError):
        KernelSpec("von_mises", 0.0)
    with pytest.raises(ValueError):
        KernelSpec("grid_delta", -1.0)
    with pytest.raises(ValueError):
        KernelSpec("gauss")
    with pytest.raises(ValueError):
        KernelSpec("grid_delta", 0.0).check_well_posed()
    KernelSpec("von_mises", 0.0, eps=0.3).check_well_posed()


def test_store_records_and_total_weight():
    st_ = OccupationStore(2)
    st_.record([0.1, 0.2], [1.0, -1.0], 0.7, replica=3, step=20)
    assert len(st_) == 1 and st_.total_weight == pytest.approx(0.7)
    rec = st_[0]
    assert rec.replica == 3 and rec.step == 20
    np.testing.assert_array_equal(rec.g, [1.0, -1.0])
    for _ in range(2000):
        st_.record([0.0, 0.0], [0.0, 0.0])
    assert st_.total_weight == pytest.approx(2000.7)
    with pytest.raises(ValueError):
        st_.z[0, 0] = 5.0


@pytest.mark.parametrize("bad", [dict(w=-1.0), dict(z=[np.nan, 0.0]), dict(g=[np.inf, 0.0])])
def test_store_rejects_invalid_records(bad):
    st_ = OccupationStore(2)
    args = dict(z=[0.0, 0.0], g=[0.0, 0.0], w=1.0)
    args.update(bad)
    with pytest.raises(ValueError):
        st_.record(**args)
    assert len(st_) == 0


@given(st.lists(st.floats(0, 10), min_size=1, max_size=60))
def test_total_weight_is_sum(ws):
    st_ = OccupationStore(1)
    for w in ws:
        st_.record([0.5], [0.0], w)
    assert st_.total_weight == pytest.approx(math.fsum(ws), rel=1e-12, abs=1e-12)


def test_csv_round_trip(tmp_path, store3):
    path = store3.to_csv(tmp_path / "samples.csv")
    back = OccupationStore.from_csv(path)
    for name in ("z", "g", "w", "replica", "step"):
        np.testing.assert_array_equal(getattr(back, name), getattr(store3, name))


def test_merge_orders_by_replica_then_step(rng):
    a, b = OccupationStore(1), OccupationStore(1)
    a.record_batch(rng.uniform(size=(3, 1)), np.zeros((3, 1)), 1.0, 1, [40, 20, 60])
    b.record_batch(rng.uniform(size=(2, 1)), np.zeros((2, 1)), 1.0, 0, [20, 40])
    m = merge([a, b])
    assert list(m.replica) == [0, 0, 1, 1, 1]
    assert list(m.step) == [20, 40, 20, 40, 60]
    assert m.total_weight == pytest.approx(5.0)


@pytest.mark.parametrize("eps", [0.2, 0.5, 1.5])
def test_von_mises_normalisation_and_symmetry(eps, rng):
    vm = VonMises1D(eps, TWO_PI)
    g = Grid1D(40, Periodic(TWO_PI))
    y = rng.uniform(0, TWO_PI, 9)
    mom = CellMoments.von_mises(g, vm, y)
    np.testing.assert_allclose(mom.total(), 1.0, rtol=1e-8)
    a, b = rng.uniform(-5, 5, (2, 50))
    np.testing.assert_array_equal(vm(a, b), vm(b, a))
    assert vm.min_value == pytest.approx(float(vm(0.0, math.pi)))


def test_von_mises_needs_periodic_grid(store2):
    grids = [Grid1D(8, Reflected(0, TWO_PI)), Grid1D(8, Periodic(TWO_PI))]
    with pytest.raises(UnsupportedMode):
        Assembler(store2, KernelSpec("von_mises", 0.1, eps=0.4), grids)


def test_theta_single_sample_peak():
    st_ = OccupationStore(2)
    st_.record([1.0, 2.0], [0.0, 0.0])
    grids = [Grid1D(8, Periodic(TWO_PI))] * 2
    k = KernelSpec("von_mises", 0.0, eps=0.4)
    vm = VonMises1D(0.4, TWO_PI)
    peak = theta_at(st_, k, grids, [1.0, 2.0])
    assert peak == pytest.approx(float(vm(0, 0)) ** 2)
    assert theta_at(st_, k, grids, [1.3, 2.0]) < peak
    big = KernelSpec("von_mises", 1e12, eps=0.4)
    assert theta_at(st_, big, grids, [3.0, 0.5]) == pytest.approx(1.0, rel=1e-9)


def test_theta_uniform_cloud(rng):
    st_ = OccupationStore(2)
    st_.record_batch(rng.uniform(0, TWO_PI, (10000, 2)), np.zeros((10000, 2)), 1.0, 0, 0)
    grids = [Grid1D(8, Periodic(TWO_PI))] * 2
    k = KernelSpec("von_mises", 0.0, eps=0.3 * TWO_PI)
    for z in rng.uniform(0, TWO_PI, (10, 2)):
        # the kernel integrates to 1 over z, so a uniform cloud gives θ = 1/|domain|
        assert theta_at(st_, k, grids, z) * TWO_PI ** 2 == pytest.approx(1.0, rel=0.05)


@given(st.floats(0, 3), st.floats(0.2, 2.0))
def test_theta_lower_bound(lam, eps):
    st_ = synthetic_store(2, 50, seed=1)
    grids = [Grid1D(8, Periodic(TWO_PI))] * 2
    k = KernelSpec("von_mises", lam, eps=eps)
    kmin = VonMises1D(eps, TWO_PI).min_value ** 2
    th = theta_at(st_, k, grids, [0.3, 4.0])
    assert th >= (lam + kmin) / (1 + lam) - 1e-12


def test_force_moment_examples(rng):
    st_ = OccupationStore(2)
    z = rng.uniform(0, TWO_PI, (300, 2))
    st_.record_batch(z, np.tile([0.7, -1.2], (300, 1)), 1.0, 0, 0)
    grids = [Grid1D(8, Periodic(TWO_PI))] * 2
    f0 = force_moment_at(st_, KernelSpec("von_mises", 0.0, eps=0.5), grids, [1.0, 1.0])
    np.testing.assert_allclose(f0, [0.7, -1.2], rtol=1e-12)
    lam = 0.3
    fl = force_moment_at(st_, KernelSpec("von_mises", lam, eps=0.5), grids, [1.0, 1.0])
    kz = theta_at(st_, KernelSpec("von_mises", 0.0, eps=0.5), grids, [1.0, 1.0])
    np.testing.assert_allclose(fl, f0 * kz / (lam + kz), rtol=1e-12)
    with pytest.raises(UnsupportedMode):
        force_moment_at(st_, KernelSpec(), grids, [1.0, 1.0])


def test_hat_weights_sum_to_one(rng):
    for g in (Grid1D(9, Periodic(1.0)), Grid1D(9, Reflected(-0.2, 1.2))):
        y = rng.uniform(g.lo, g.lo + g.size, 500)
        mom = CellMoments.point(g, y)
        np.testing.assert_allclose(mom.integral(np.ones(g.n_nodes)), 1.0, rtol=1e-14)


def test_no_samples_pure_stiffness():
    grids = [Grid1D(10, Periodic(1.0)), Grid1D(10, Periodic(1.0))]
    st_ = OccupationStore(2)
    lam = 0.25
    other = np.ones(10)
    sys = assemble_1d_system(st_, KernelSpec("grid_delta", lam), 0, [other], TensorSum(grids))
    # ∏‖r_l‖² = 1 for the constant 1 on a unit interval
    np.testing.assert_allclose(sys.matrix, lam * grids[0].stiffness, atol=1e-14)
    np.testing.assert_array_equal(sys.rhs, 0.0)


def test_singular_assembly_without_regulariser():
    grids = [Grid1D(10, Periodic(1.0))]
    st_ = OccupationStore(1)
    st_.record_batch(np.full((5, 1), 0.05), np.ones((5, 1)), 1.0, 0, 0)
    with pytest.raises(SingularAssembly):
        Assembler(st_, KernelSpec("grid_delta", 0.0), grids).system(0, [np.zeros(10)])


def test_d1_weighted_poisson(rng):
    g = Grid1D(12, Periodic(1.0))
    st_ = OccupationStore(1)
    z = rng.uniform(0, 1, (400, 1))
    w = rng.uniform(0.5, 2.0, 400)
    force = np.sin(TWO_PI * z)
    st_.record_batch(z, force, w, 0, 0)
    sys = assemble_1d_system(st_, KernelSpec("grid_delta", 0.0), 0, [], TensorSum([g]))
    wn = w / w.sum()
    mom = CellMoments.point(g, z[:, 0])
    np.testing.assert_allclose(sys.matrix, mom.gram_d(wn), atol=1e-13)
    np.testing.assert_allclose(sys.rhs, mom.load_d(wn * force[:, 0]), atol=1e-13)


def test_assembly_recovers_planted_cosine():
    m = 30
    grids = [Grid1D(m, Periodic(1.0)), Grid1D(m, Periodic(1.0))]
    n = 120
    x = (np.arange(n) + 0.5) / n
    z = np.stack(np.meshgrid(x, x, indexing="ij"), -1).reshape(-1, 2)
    g = np.zeros_like(z)
    g[:, 0] = -TWO_PI * np.sin(TWO_PI * z[:, 0])
    st_ = OccupationStore(2)
    st_.record_batch(z, g, 1.0, 0, 0)
    sys = assemble_1d_system(st_, KernelSpec("grid_delta", 1e-8), 0, [np.ones(m)], TensorSum(grids))
    r = solve_1d(sys, zero_mean=True).values
    truth = np.cos(TWO_PI * grids[0].nodes)
    assert np.max(np.abs(r - truth)) < 1e-2


@pytest.mark.parametrize("mode", ["grid_delta", "von_mises"])
def test_assembly_is_linear_in_samples(mode, rng):
    grids = [Grid1D(9, Periodic(TWO_PI)) for _ in range(3)]
    kernel = KernelSpec(mode, 0.05, eps=0.6 if mode == "von_mises" else None)
    a, b = synthetic_store(3, 200, seed=11), synthetic_store(3, 300, seed=12)
    both = merge([a, b])
    factors = [rng.standard_normal(9) for _ in range(3)]
    f = TensorSum(grids, [rng.standard_normal((2, 9)) for _ in range(3)])
    lam_only = Assembler(OccupationStore(3), KernelSpec(mode, 0.05, kernel.eps), grids).system(1, factors, f)

    def data_part(s):
        sys = Assembler(s, kernel, grids).system(1, factors, f)
        return (sys.matrix - lam_only.matrix) * s.total_weight, (sys.rhs - lam_only.rhs) * s.total_weight

    ma, ra = data_part(a)
    mb, rb = data_part(b)
    mab, rab = data_part(both)
    scale = np.abs(mab).max()
    np.testing.assert_allclose(mab, ma + mb, atol=1e-12 * scale)
    np.testing.assert_allclose(rab, ra + rb, atol=1e-12 * np.abs(rab).max())


@pytest.mark.parametrize("d", [1, 2, 3])
def test_binned_compression_matches_direct(d, rng):
    grids = [Grid1D(6, Periodic(TWO_PI)) if j != 1 else Grid1D(5, Reflected(0, TWO_PI)) for j in range(d)]
    st_ = synthetic_store(d, 3000, seed=d)
    kernel = KernelSpec("grid_delta", 1e-3)
    f = TensorSum(grids, [rng.standard_normal((3, g.n_nodes)) for g in grids])
    direct = Assembler(st_, kernel, grids)
    direct.binned = None
    binned = Assembler(st_, kernel, grids)
    binned.binned = binned.make_binned()
    factors = [rng.standard_normal(g.n_nodes) for g in grids]
    for j in range(d):
        a, b = direct.system(j, factors, f), binned.system(j, factors, f)
        np.testing.assert_allclose(b.matrix, a.matrix, atol=1e-13 * np.abs(a.matrix).max())
        np.testing.assert_allclose(b.rhs, a.rhs, atol=1e-13 * np.abs(a.rhs).max())
    assert BinnedPointData.worthwhile(3000, grids[:1])


def test_von_mises_moments_match_brute_force(rng):
    g = Grid1D(7, Periodic(TWO_PI))
    vm = VonMises1D(0.5, TWO_PI)
    y = rng.uniform(0, TWO_PI, 3)
    mom = CellMoments.von_mises(g, vm, y)
    u = PLFunction(g, rng.standard_normal(7))
    x = np.linspace(0, TWO_PI, 200001)
    for s in range(3):
        ref = np.trapezoid(u(x) * vm(y[s], x), x)
        assert mom.integral(u.values)[s] == pytest.approx(ref, rel=1e-7, abs=1e-9)
