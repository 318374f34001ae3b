import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from heatpaths import oracles
from heatpaths.errors import InvalidParameters, QueryOutsideDomain, ResolutionViolation, WeightOverflow
from heatpaths.fk_montecarlo import (
    EstimatorKind,
    MCConfig,
    feynman_kac_estimate,
    killed_walk_estimate,
    path_stream,
    reflected_walk_estimate,
)
from heatpaths.geometry import make_domain
from heatpaths.kernels import PropagatorQuery, heat_kernel
from heatpaths.schrodinger import PotentialSign, smooth_potential, theorem1_potential

HALF_LINE = make_domain("HalfLine")
GAUSS = lambda y: np.exp(-((np.asarray(y) - 0.5) ** 2) / 0.02) / np.sqrt(0.02 * np.pi)


def test_config_validation():
    with pytest.raises(InvalidParameters):
        MCConfig(n_paths=0)
    with pytest.raises(InvalidParameters):
        MCConfig(estimator="SmearedDensity")
    with pytest.raises(InvalidParameters):
        MCConfig(estimator="BinnedDensity", bins=[1.0, 0.5])
    assert MCConfig().estimator is EstimatorKind.SURVIVAL


def test_streams_are_keyed_by_seed_and_chunk():
    a = path_stream(7, 3).standard_normal(5)
    assert np.array_equal(a, path_stream(7, 3).standard_normal(5))
    assert not np.array_equal(a, path_stream(7, 4).standard_normal(5))


def test_same_seed_same_estimate_for_any_worker_count():
    q = PropagatorQuery(0.5, 0, 0.5, 1.0)
    cfg = MCConfig(n_paths=40_000, dt=0.01, seed=2, chunk_size=5000)
    one = killed_walk_estimate(q, HALF_LINE, cfg)
    two = killed_walk_estimate(q, HALF_LINE, cfg, workers=2)
    assert (one.mean, one.stderr) == (two.mean, two.stderr)


def test_resolution_and_domain_checks():
    narrow = make_domain("Interval", {"lower": 0, "upper": 0.01})
    with pytest.raises(ResolutionViolation):
        killed_walk_estimate(PropagatorQuery(0.005, 0, 0.005, 1), narrow, MCConfig(n_paths=10, dt=0.01))
    with pytest.raises(QueryOutsideDomain):
        killed_walk_estimate(PropagatorQuery(-0.5, 0, 0.5, 1), HALF_LINE, MCConfig(n_paths=10))


def test_weight_overflow_detected():
    pot = smooth_potential(lambda a: 800 * np.ones_like(a), sign=PotentialSign.CREATING)
    with pytest.raises(WeightOverflow):
        feynman_kac_estimate(PropagatorQuery(0.5, 0, 0.5, 1), pot, MCConfig(n_paths=100, dt=0.01))


def test_bump_width_must_match():
    pot = theorem1_potential(HALF_LINE, 0.1)
    with pytest.raises(InvalidParameters):
        feynman_kac_estimate(PropagatorQuery(0.5, 0, 0.5, 1), pot, MCConfig(n_paths=100, dt=0.01, epsilon=0.2))


def test_zero_potential_is_free_walk():
    q = PropagatorQuery(0.2, 0.0, 0.0, 0.5)
    cfg = MCConfig(n_paths=50_000, dt=0.01, seed=3, estimator="SmearedDensity", test_function=GAUSS)
    est = feynman_kac_estimate(q, smooth_potential(lambda a: np.zeros_like(a)), cfg)
    exact = integrate.quad(lambda y: GAUSS(y) * heat_kernel(y, 0.2, 0.5, 1.0, 1), -6, 6)[0]
    assert abs(est.mean - exact) < 3 * est.stderr


def test_constant_potential_gives_exact_discount():
    est = feynman_kac_estimate(PropagatorQuery(0.2, 0.0, 0.0, 1.0), smooth_potential(lambda a: 0.7 * np.ones_like(a)),
                               MCConfig(n_paths=1000, dt=0.01))
    assert est.mean == pytest.approx(np.exp(-0.7), rel=1e-12)


def test_reflected_walk_conserves_mass():
    est = reflected_walk_estimate(PropagatorQuery(0.2, 0.0, 0.2, 1.0), HALF_LINE, MCConfig(n_paths=5000, dt=0.01))
    assert est.mean == 1.0


def test_killed_density_matches_absorbed_oracle():
    q = PropagatorQuery(0.5, 0.0, 0.5, 0.5)
    cfg = MCConfig(n_paths=100_000, dt=0.005, seed=4, estimator="SmearedDensity", test_function=GAUSS)
    est = killed_walk_estimate(q, HALF_LINE, cfg)
    ref = integrate.quad(lambda y: GAUSS(y) * oracles.half_space_absorbed(PropagatorQuery(0.5, 0, y, 0.5)), 1e-12, 4)[0]
    assert abs(est.mean - ref) < 3 * est.stderr


def test_bridge_correction_reduces_bias():
    q = PropagatorQuery(0.3, 0.0, 0.3, 1.0)
    exact = oracles.half_line_survival(0.3, 1.0)
    bias = {}
    for flag in (True, False):
        est = killed_walk_estimate(q, HALF_LINE, MCConfig(n_paths=100_000, dt=0.02, seed=9, bridge_correction=flag))
        bias[flag] = abs(est.mean - exact)
    assert bias[True] < bias[False]


@settings(max_examples=8, deadline=None)
@given(st.floats(0.1, 1.5), st.integers(0, 2**32 - 1))
def test_survival_is_monotone_in_time(x, seed):
    cfg = MCConfig(n_paths=4000, dt=0.01, seed=seed)
    vals = [killed_walk_estimate(PropagatorQuery(x, 0, x, t), HALF_LINE, cfg).mean for t in (0.3, 0.6, 1.0)]
    assert 1.0 >= vals[0] >= vals[1] >= vals[2] >= 0.0


@settings(max_examples=8, deadline=None)
@given(st.floats(0.1, 1.5), st.integers(0, 2**32 - 1))
def test_killed_below_free(x, seed):
    # the free walk keeps every path, so its survival count is exactly one
    cfg = MCConfig(n_paths=4000, dt=0.01, seed=seed, estimator="SmearedDensity", test_function=GAUSS)
    q = PropagatorQuery(x, 0, x, 0.5)
    killed = killed_walk_estimate(q, HALF_LINE, cfg)
    free = feynman_kac_estimate(q, smooth_potential(lambda a: np.zeros_like(a)), cfg)
    assert killed.mean <= free.mean + 3 * np.hypot(killed.stderr, free.stderr)
