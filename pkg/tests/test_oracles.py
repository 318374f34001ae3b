"""Self-checks for the reference solutions: PDE residual, boundary condition, mass, and a walk cross-check."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from heatpaths import oracles
from heatpaths.errors import OutOfValidityRegion
from heatpaths.fk_montecarlo import MCConfig, reflected_walk_estimate
from heatpaths.geometry import make_domain
from heatpaths.kernels import PropagatorQuery


def _density(fn, x, s=0.0):
    return lambda y, t: fn(PropagatorQuery(x, s, y, t))


def _heat_residual(f, y, t, sigma=1.0, h=1e-3):
    dt = (f(y, t + h) - f(y, t - h)) / (2 * h)
    dyy = (f(y + h, t) - 2 * f(y, t) + f(y - h, t)) / h**2
    return abs(dt - 0.5 * sigma**2 * dyy)


ORACLES_1D = [
    oracles.half_space_absorbed,
    oracles.half_space_reflected,
    lambda q: oracles.interval_absorbed_images(q, 0.0, 1.0),
    lambda q: oracles.elastic_half_line(q, 1.0),
    lambda q: oracles.moving_line_absorbed(q, 0.0, 0.4),
    lambda q: oracles.moving_line_reflected(q, 0.0, -0.3),
]


@pytest.mark.parametrize("index", range(len(ORACLES_1D)))
def test_heat_equation_residual(index):
    f = _density(ORACLES_1D[index], 0.45)
    for y, t in [(0.7, 0.3), (0.6, 0.8)]:
        assert _heat_residual(f, y, t) < 1e-5


def test_dirichlet_walls():
    # the oracles accept interior points only, so approach each wall from inside
    gap = 1e-10
    for t in (0.2, 1.0):
        assert oracles.half_space_absorbed(PropagatorQuery(0.5, 0, gap, t)) < 1e-9
        assert oracles.interval_absorbed_images(PropagatorQuery(0.5, 0, 1.0 - gap, t)) < 1e-9
        wall = 0.4 * t
        assert oracles.moving_line_absorbed(PropagatorQuery(0.5, 0, wall + gap, t), 0.0, 0.4) < 1e-9


def test_neumann_and_robin_walls():
    h = 1e-5

    def wall_value_and_slope(f):
        # quadratic through y = h, 2h, 3h extrapolated to the wall
        a, b, c = f(h, 0.7), f(2 * h, 0.7), f(3 * h, 0.7)
        return 3 * a - 3 * b + c, (-5 * a + 8 * b - 3 * c) / (2 * h)

    _, slope = wall_value_and_slope(_density(oracles.half_space_reflected, 0.5))
    assert abs(slope) < 1e-4
    kappa = 1.3
    value, slope = wall_value_and_slope(_density(lambda q: oracles.elastic_half_line(q, kappa), 0.5))
    assert slope == pytest.approx(kappa * value, rel=1e-4)


def test_mass():
    q = lambda y: PropagatorQuery(0.5, 0.0, y, 0.8)
    reflected = integrate.quad(lambda y: oracles.half_space_reflected(q(y)), 0, np.inf)[0]
    assert reflected == pytest.approx(1.0, abs=1e-10)
    moving = integrate.quad(lambda y: oracles.moving_line_reflected(q(y), 0.0, 0.3), 0.3 * 0.8, np.inf)[0]
    assert moving == pytest.approx(1.0, abs=1e-8)
    absorbed = integrate.quad(lambda y: oracles.half_space_absorbed(q(y)), 0, np.inf)[0]
    assert absorbed == pytest.approx(oracles.half_line_survival(0.5, 0.8), abs=1e-10)


def test_interval_routes_agree():
    for t in (0.01, 0.2, 2.0):
        q = PropagatorQuery(0.2, 0.0, 0.9, t)
        assert oracles.interval_absorbed_images(q) == pytest.approx(oracles.interval_absorbed_eigen(q), abs=1e-12)


def test_elastic_limits():
    q = PropagatorQuery(0.5, 0.0, 0.3, 1.0)
    assert oracles.elastic_half_line(q, 0.0) == oracles.half_space_reflected(q)
    assert oracles.elastic_half_line(q, 1e6) == pytest.approx(oracles.half_space_absorbed(q), abs=1e-5)
    with pytest.raises(OutOfValidityRegion):
        oracles.elastic_half_line(q, -1.0)


def test_kelvin_green_vanishes_on_sphere_and_is_harmonic():
    x = np.array([0.2, -0.1, 0.3])
    near_sphere = np.array([0.0, 0.6, 0.8]) * (1 - 1e-10)
    assert abs(oracles.ball_green_kelvin(near_sphere, x)) < 1e-9
    y, h = np.array([-0.3, 0.2, 0.1]), 1e-3
    lap = sum(
        oracles.ball_green_kelvin(y + h * e, x) + oracles.ball_green_kelvin(y - h * e, x) - 2 * oracles.ball_green_kelvin(y, x)
        for e in np.eye(3)
    ) / h**2
    assert abs(lap) < 1e-5


def test_moving_reflected_walk_cross_check():
    dom = make_domain("MovingHalfLine", {"offset": 0.0, "velocity": 0.3})
    g = lambda y: np.exp(-((y - 1.0) ** 2) / 0.08) / np.sqrt(0.08 * np.pi)
    q = PropagatorQuery(0.6, 0.0, 0.6, 1.0)
    est = reflected_walk_estimate(q, dom, MCConfig(n_paths=40_000, dt=1e-3, seed=5, estimator="SmearedDensity", test_function=g))
    ref = integrate.quad(lambda y: g(y) * oracles.moving_line_reflected(PropagatorQuery(0.6, 0.0, y, 1.0), 0.0, 0.3), 0.3, 4)[0]
    assert abs(est.mean - ref) < 4 * est.stderr + 5e-3


@settings(max_examples=40, deadline=None)
@given(st.floats(0.05, 3), st.floats(0.05, 3), st.floats(0.05, 2))
def test_absorbed_below_free_below_reflected(x, y, t):
    q = PropagatorQuery(x, 0.0, y, t)
    free = oracles.half_space_reflected(q) - oracles.half_space_absorbed(q)  # twice the image term
    assert free >= 0
    assert oracles.half_space_absorbed(q) <= oracles.elastic_half_line(q, 0.7) <= oracles.half_space_reflected(q) + 1e-15


@settings(max_examples=40, deadline=None)
@given(st.floats(0.05, 0.95), st.floats(0.05, 0.95), st.floats(0.02, 1.0))
def test_interval_symmetric(x, y, t):
    a = oracles.interval_absorbed_images(PropagatorQuery(x, 0, y, t))
    b = oracles.interval_absorbed_images(PropagatorQuery(y, 0, x, t))
    assert a == pytest.approx(b, rel=1e-12, abs=1e-300)
