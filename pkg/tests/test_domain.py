import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tabf.domain import (
    BoxSpec,
    DimensionMismatch,
    ExtendedState,
    FourierProfile,
    PLProfile,
    Periodic,
    PolymerRing,
    Reflected,
    SeparableTest,
    ToyModel3D,
    energy,
    fd_check,
    gradient,
    min_image,
    potential_from_dict,
    reflect,
    wrap,
    wrap_state,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


@pytest.mark.parametrize("x, expected", [(1.25, 0.25), (0.0, 0.0), (-0.1, 0.9), (1.0, 0.0)])
def test_wrap_examples(x, expected):
    assert wrap(x, 1.0) == pytest.approx(expected, abs=1e-15)


def test_min_image_examples():
    assert min_image(0.1, 0.9, 1.0) == pytest.approx(0.2)
    assert min_image(0.3, 0.3, 1.0) == 0.0
    assert min_image(0.0, 0.5, 1.0) == -0.5
    assert min_image(0.5, 0.0, 1.0) == -0.5


@given(finite, st.floats(0.1, 10))
def test_wrap_lands_in_box(x, length):
    y = wrap(x, length)
    assert 0.0 <= y < length
    assert (x - y) / length == pytest.approx(round((x - y) / length), abs=1e-9)


@given(finite, finite)
def test_min_image_is_shortest(a, b):
    d = min_image(a, b, 1.0)
    assert -0.5 <= d < 0.5
    assert (a - b - d) == pytest.approx(round(a - b - d), abs=1e-9)


@given(st.floats(-5, 5, allow_nan=False))
def test_reflect_stays_inside(x):
    y = reflect(x, -0.2, 1.2)
    assert -0.2 <= y <= 1.2


def test_reflect_mirror_rule():
    assert reflect(1.2 + 0.3, -0.2, 1.2) == pytest.approx(0.9)
    assert reflect(-0.2 - 0.1, -0.2, 1.2) == pytest.approx(-0.1)
    # overshoot longer than the interval folds twice
    assert reflect(1.2 + 1.4 + 0.1, -0.2, 1.2) == pytest.approx(-0.1)


def test_domain_validation():
    with pytest.raises(ValueError):
        Periodic(0.0)
    with pytest.raises(ValueError):
        Reflected(1.0, 1.0)
    with pytest.raises(ValueError):
        BoxSpec(1, 0, 1.0, Periodic(1.0))
    with pytest.raises(ValueError):
        BoxSpec(1, 1, -1.0, Periodic(1.0))


def test_toy_energy_by_hand():
    toy = ToyModel3D()
    x1, x2, x3 = 0.3, -1.1, 2.0
    expected = (-math.sin(3 * x1) * math.sin(x2) * math.cos(x3 - 1)
                + math.cos(3 * x2 + 2) * (0.5 + math.cos(x3 - 2))
                + 2 * math.sin(2 * x1 + 0.5) * math.cos(x3)
                - 5 * math.cos(x1) * math.cos(x2) * math.cos(x3 + 1))
    assert energy(toy, ExtendedState([x3], [x1, x2])) == pytest.approx(expected, rel=1e-14)
    at0 = math.cos(2) * (0.5 + math.cos(-2)) + 2 * math.sin(0.5) - 5 * math.cos(1)
    assert energy(toy, ExtendedState([0.0], [0.0, 0.0])) == pytest.approx(at0, rel=1e-14)


def test_toy_is_periodic(rng):
    toy = ToyModel3D()
    q = rng.uniform(-10, 10, (50, 1))
    z = rng.uniform(-10, 10, (50, 2))
    box = toy.box()
    for a, b in zip(q, z):
        s = ExtendedState(a, b)
        w = wrap_state(box, s)
        assert np.all((w.q >= 0) & (w.q < 2 * math.pi))
        assert energy(toy, w) == pytest.approx(energy(toy, s), abs=1e-12)


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        ToyModel3D().energy_batch(np.zeros(2), np.zeros(2))


def test_polymer_validation():
    with pytest.raises(ValueError):
        PolymerRing(10, 2)
    with pytest.raises(ValueError):
        PolymerRing(3, 3)
    with pytest.raises(ValueError):
        PolymerRing(10, 3, h=0.0)
    with pytest.raises(ValueError):
        PolymerRing(10, 3, wca_form="other")


def test_polymer_pieces_vanish_at_minima():
    pol = PolymerRing(10, 4)
    r1, om = pol.r1, pol.omega
    assert pol.double_well(r1) == pytest.approx(0.0, abs=1e-14)
    assert pol.double_well(r1 + om) == pytest.approx(0.0, abs=1e-14)
    assert pol.double_well(r1 + om / 2) == pytest.approx(pol.h)
    for r in (r1, r1 + 0.4, r1 + om):
        assert pol.extended((r - r1) / om, r) == 0.0
    assert pol.angle_energy(math.cos(pol.theta_d)) == 0.0
    assert pol.theta_d == pytest.approx(math.pi / 2)


def test_wca_forms_at_cutoff():
    cont = PolymerRing(10, 3)
    lit = PolymerRing(10, 3, wca_form="literal")
    r0 = cont.r0
    below = r0 * (1 - 1e-9)
    assert cont.wca(below) == pytest.approx(0.0, abs=1e-7)
    assert cont.wca_deriv(below) == pytest.approx(0.0, abs=1e-6)
    assert cont.wca(r0 * (1 + 1e-9)) == 0.0
    # the literal form jumps to 0.75 eps at the cutoff
    assert lit.wca(below) == pytest.approx(0.75 * lit.eps, rel=1e-6)


def test_polymer_regular_polygon_has_no_bonded_energy():
    pol = PolymerRing(30, 4)
    s = pol.initial_state()
    x = s.q.reshape(-1, 2)
    b, r = pol._bonds(x)
    np.testing.assert_allclose(r, pol.r1, rtol=1e-12)
    bonded = (pol.double_well(r) + pol.extended(np.zeros(4), r)).sum()
    assert bonded == pytest.approx(0.0, abs=1e-12)


def test_polymer_translation_invariance(rng):
    pol = PolymerRing(16, 3)
    s = pol.initial_state(rng, jitter=0.2)
    z = rng.uniform(-0.2, 1.2, 3)
    shift = np.tile(rng.uniform(-3, 3, 2), 16)
    e0 = energy(pol, ExtendedState(s.q, z))
    e1 = energy(pol, ExtendedState(wrap(s.q + shift, pol.box_length), z))
    assert e1 == pytest.approx(e0, rel=1e-10)


def test_polymer_initial_state_has_no_overlap(rng):
    pol = PolymerRing(100, 5)
    s = pol.initial_state(rng)
    assert s.q.shape == (200,)
    assert pol.box_length == pytest.approx(10.0)
    x = s.q.reshape(-1, 2)
    d = min_image(x[:, None], x[None], pol.box_length)
    r = np.sqrt((d ** 2).sum(-1)) + np.eye(100) * 1e9
    assert r.min() > 0.8 * pol.r0
    assert np.isfinite(energy(pol, s))


def _separable():
    return SeparableTest((FourierProfile((0.4, 0.1), (0.2,)), PLProfile((0.0, 1.0, 0.5, -0.3))))


def test_separable_gradient_is_profile_derivative(rng):
    sep = _separable()
    z = rng.uniform(0, 1, (20, 2))
    q = rng.uniform(0, 1, (20, 2))
    gq, gz = sep.gradient_batch(q, z)
    np.testing.assert_allclose(gz[:, 0], sep.profiles[0].deriv(z[:, 0]))
    np.testing.assert_allclose(gz[:, 1], sep.profiles[1].deriv(z[:, 1]))
    np.testing.assert_allclose(sep.energy_batch(q, z) - sep.free_energy(z),
                               np.cos(2 * np.pi * q).sum(-1), atol=1e-14)


def test_gradient_vanishes_at_critical_point():
    sep = SeparableTest((FourierProfile((1.0,)),), dim_q=1)
    g = gradient(sep, ExtendedState([0.5], [0.5]))
    np.testing.assert_allclose(g.grad_q, 0.0, atol=1e-12)
    np.testing.assert_allclose(g.grad_z, 0.0, atol=1e-12)


def _random_states(pot, rng, n):
    box = pot.box()
    for _ in range(n):
        if isinstance(pot, PolymerRing):
            s = pot.initial_state(rng, jitter=0.3)
            yield ExtendedState(s.q, rng.uniform(-0.2, 1.2, box.dim_z))
        else:
            lz = box.z_domain.size
            yield ExtendedState(rng.uniform(0, box.box_length_q, box.dim_q), rng.uniform(0, lz, box.dim_z))


@pytest.mark.parametrize("pot", [
    ToyModel3D(),
    PolymerRing(12, 3),
    PolymerRing(12, 4, wca_form="literal"),
    SeparableTest((FourierProfile((0.5, 0.2), (0.1,)), FourierProfile((), (0.7, 0.3)))),
], ids=["toy", "polymer-continuous", "polymer-literal", "separable"])
def test_gradient_matches_finite_differences(pot, rng):
    worst = max(fd_check(pot, s) for s in _random_states(pot, rng, 25))
    assert worst < 1e-6


@pytest.mark.parametrize("pot", [ToyModel3D(), PolymerRing(20, 5, wca_form="literal"), _separable()])
def test_potential_dict_round_trip(pot):
    back = potential_from_dict(pot.to_dict())
    assert back.to_dict() == pot.to_dict()
