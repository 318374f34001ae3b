import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from heatpaths.errors import CollarSelfIntersection, InvalidParameters
from heatpaths.geometry import make_domain, make_grid
from heatpaths.kernels import PropagatorQuery, free_propagator
from heatpaths.schrodinger import (
    BumpFamily,
    PotentialSign,
    delta_bump_potential,
    delta_exact,
    fi_residual,
    l_operator_terms,
    nested_l_operator_terms,
    richardson_terms,
    smooth_potential,
    smooth_potential_series,
    theorem1_potential,
)

HALF_LINE = make_domain("HalfLine")


def test_bump_profile_integrates_to_one():
    b = BumpFamily(0.1, HALF_LINE)
    mass = integrate.quad(b.first, 0, 0.2, points=[0.1], epsabs=1e-13)[0]
    assert mass == pytest.approx(1.0, abs=1e-10)
    assert b.integral(0.25) == pytest.approx(1.0)
    assert b.integral(-0.01) == 0.0


def test_bump_rejects_wide_collar():
    with pytest.raises(CollarSelfIntersection):
        BumpFamily(0.3, make_domain("Interval", {"lower": 0, "upper": 1}))
    with pytest.raises(InvalidParameters):
        BumpFamily(0.1, HALF_LINE, side="outer")


def test_constant_potential_series_is_exponential():
    q = PropagatorQuery(0.3, 0.0, -0.2, 0.8)
    pot = smooth_potential(lambda a: 0.7 * np.ones_like(a))
    r = smooth_potential_series(q, pot, max_order=10)
    assert r.value == pytest.approx(np.exp(-0.7 * 0.8) * free_propagator(q), rel=1e-7)


def test_creating_sign_flips_growth():
    q = PropagatorQuery(0.3, 0.0, -0.2, 0.8)
    pot = smooth_potential(lambda a: 0.5 * np.ones_like(a), sign=PotentialSign.CREATING)
    r = smooth_potential_series(q, pot, max_order=10)
    assert r.value == pytest.approx(np.exp(0.5 * 0.8) * free_propagator(q), rel=1e-7)


def test_fi_and_li_agree_for_gaussian_potential():
    q = PropagatorQuery(0.3, 0.0, 0.0, 0.8)
    pot = smooth_potential(lambda a, t=0.0: np.exp(-((np.asarray(a) - 0.5) ** 2) / 0.1) * (1 + 0.3 * t))
    fi = smooth_potential_series(q, pot, max_order=4, direction="FI")
    li = smooth_potential_series(q, pot, max_order=4, direction="LI")
    np.testing.assert_allclose(fi.terms, li.terms, atol=1e-7)


def test_fi_residual_separates_exact_from_wrong():
    q = PropagatorQuery(0.3, 0.0, -0.2, 0.8)
    pot = smooth_potential(lambda a: 0.7 * np.ones_like(a))
    exact = lambda a, t: np.exp(-0.7 * t) * np.exp(-((np.asarray(a) - 0.3) ** 2) / (2 * t)) / np.sqrt(2 * np.pi * t)
    wrong = lambda a, t: np.exp(-((np.asarray(a) - 0.3) ** 2) / (2 * t)) / np.sqrt(2 * np.pi * t)
    assert fi_residual(exact, pot, q) < 1e-8
    assert fi_residual(wrong, pot, q) > 1e-3


def test_richardson_recovers_quadratic_model():
    eps = np.array([0.1, 0.05, 0.025])
    vals = np.stack([2.0 + 3 * eps + 5 * eps**2, -1.0 + eps - eps**2], axis=1)
    limit, spread, bad = richardson_terms(vals)
    np.testing.assert_allclose(limit, [2.0, -1.0], atol=1e-12)
    assert not bad.any()


def test_same_width_chain_matches_single_width_terms():
    q = PropagatorQuery(1.0, 0.0, 1.0, 1.0)
    pot = delta_bump_potential(0.1, 1.0)
    grid = make_grid(0, 1, 60, 1)
    single = l_operator_terms(q, pot, 2, grid)
    nested = nested_l_operator_terms(q, [pot, pot], grid)
    np.testing.assert_allclose(nested, single, rtol=1e-10)


def test_boundary_bump_first_term_approaches_minus_image():
    q = PropagatorQuery(1.0, 0.0, 1.0, 1.0)
    image = free_propagator(PropagatorQuery(-1.0, 0.0, 1.0, 1.0))
    grid = make_grid(0, 1, 120, 1)
    gaps = [abs(l_operator_terms(q, theorem1_potential(HALF_LINE, e), 1, grid)[1] + image) for e in (0.1, 0.05, 0.025)]
    # first-order bias in the width: each halving roughly halves the gap
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[2] < 0.7 * gaps[1]


@settings(max_examples=30, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(0.1, 2), st.floats(0.0, 5.0))
def test_delta_propagator_bounded_by_free(x, y, t, coupling):
    q = PropagatorQuery(x, 0.0, y, t)
    v = delta_exact(q, coupling)
    assert -1e-15 <= v <= free_propagator(q) + 1e-15


@settings(max_examples=20, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(0.1, 2), st.floats(0.1, 3.0))
def test_delta_propagator_decreases_with_coupling(x, y, t, coupling):
    q = PropagatorQuery(x, 0.0, y, t)
    assert delta_exact(q, coupling * 1.5) <= delta_exact(q, coupling) + 1e-15


def test_delta_propagator_solves_heat_equation_off_the_point():
    h = 1e-3
    f = lambda y, t: delta_exact(PropagatorQuery(0.7, 0.0, y, t), 1.2)
    dt = (f(0.5, 1 + h) - f(0.5, 1 - h)) / (2 * h)
    dyy = (f(0.5 + h, 1) - 2 * f(0.5, 1) + f(0.5 - h, 1)) / h**2
    assert abs(dt - 0.5 * dyy) < 1e-5
