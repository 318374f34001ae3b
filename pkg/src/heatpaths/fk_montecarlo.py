"""Monte Carlo path estimators: killed and reflected walks, and Feynman-Kac weighted free paths.

Paths are simulated in fixed-size chunks.  Chunk ``k`` draws from a Philox
stream keyed by ``(seed, k)``, so results do not depend on how chunks are
spread over worker processes, and chunk sums are reduced in chunk order.
"""

from __future__ import annotations

import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np

from .errors import InvalidParameters, QueryOutsideDomain, ResolutionViolation, WeightOverflow
from .geometry import Domain, DomainKind
from .kernels import PropagatorQuery
from .schrodinger import PotentialKind, PotentialSpec

__all__ = [
    "EstimatorKind",
    "MCConfig",
    "MCEstimate",
    "killed_walk_estimate",
    "reflected_walk_estimate",
    "feynman_kac_estimate",
    "ReflectedWalkCandidate",
    "path_stream",
]

_LOG_WEIGHT_LIMIT = 700.0


class EstimatorKind(str, Enum):
    SURVIVAL = "SurvivalProbability"
    SMEARED = "SmearedDensity"
    BINNED = "BinnedDensity"


@dataclass(frozen=True)
class MCConfig:
    """Sampling settings.

    ``dt`` is the Euler step.  For bump potentials the Feynman-Kac sampler
    uses it far from the collar and shrinks steps to (epsilon / 8 sigma)^2
    near it unless ``collar_refinement`` is off, in which case ``dt`` itself
    must meet that bound.
    """

    n_paths: int = 100_000
    dt: float = 1e-3
    seed: int = 0
    epsilon: float | None = None
    estimator: EstimatorKind = EstimatorKind.SURVIVAL
    test_function: Callable | None = None
    bins: np.ndarray | None = None
    bridge_correction: bool = True
    collar_refinement: bool = True
    chunk_size: int = 16384

    def __post_init__(self):
        object.__setattr__(self, "estimator", EstimatorKind(self.estimator))
        if int(self.n_paths) < 1:
            raise InvalidParameters("n_paths must be at least 1")
        if not self.dt > 0:
            raise InvalidParameters("dt must be positive")
        if self.epsilon is not None and not self.epsilon > 0:
            raise InvalidParameters("epsilon must be positive")
        if not 0 <= int(self.seed) < 2**64:
            raise InvalidParameters("seed must be a 64-bit unsigned integer")
        if self.estimator is EstimatorKind.SMEARED and self.test_function is None:
            raise InvalidParameters("the smeared estimator needs a test function")
        if self.estimator is EstimatorKind.BINNED:
            edges = None if self.bins is None else np.asarray(self.bins, dtype=float)
            if edges is None or edges.ndim != 1 or len(edges) < 2 or np.any(np.diff(edges) <= 0):
                raise InvalidParameters("the binned estimator needs increasing bin edges")
        if int(self.chunk_size) < 1:
            raise InvalidParameters("chunk_size must be positive")


@dataclass
class MCEstimate:
    """Sample mean with stderr = sample std / sqrt(n_paths); arrays for binned densities."""

    mean: float | np.ndarray
    stderr: float | np.ndarray
    n_paths: int
    dt: float
    epsilon: float | None
    estimator_kind: EstimatorKind
    extra: dict = field(default_factory=dict)


def path_stream(seed: int, chunk: int) -> np.random.Generator:
    """Counter-based generator for one chunk of paths."""
    return np.random.Generator(np.random.Philox(key=[int(seed), int(chunk)]))


# ---------------------------------------------------------------------------
# chunked execution
# ---------------------------------------------------------------------------

_JOB: Callable | None = None


def _run_chunk(args):
    chunk, n, seed = args
    values = _JOB(path_stream(seed, chunk), n)
    values = np.asarray(values, dtype=float)
    return values.sum(axis=0), (values**2).sum(axis=0)


def _run_paths(job: Callable, cfg: MCConfig, workers: int = 1):
    """Run ``job(rng, n) -> per-path values`` over all chunks and reduce."""
    global _JOB
    n_total = int(cfg.n_paths)
    size = int(cfg.chunk_size)
    tasks = [(k, min(size, n_total - k * size), int(cfg.seed)) for k in range(-(-n_total // size))]
    _JOB = job
    try:
        if workers > 1 and len(tasks) > 1 and "fork" in multiprocessing.get_all_start_methods():
            ctx = multiprocessing.get_context("fork")
            with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
                parts = list(pool.map(_run_chunk, tasks))
        else:
            parts = [_run_chunk(t) for t in tasks]
    finally:
        _JOB = None
    sums = np.sum(np.stack([p[0] for p in parts]), axis=0)
    squares = np.sum(np.stack([p[1] for p in parts]), axis=0)
    mean = sums / n_total
    var = np.maximum(squares / n_total - mean**2, 0.0)
    if n_total > 1:
        var = var * n_total / (n_total - 1)
    stderr = np.sqrt(var / n_total)
    if np.ndim(mean) == 0:
        return float(mean), float(stderr)
    return mean, stderr


def _endpoint_values(cfg: MCConfig, positions: np.ndarray, weight: np.ndarray, domain: Domain | None, time: float):
    """Per-path contribution of the chosen estimator at the final time."""
    kind = cfg.estimator
    if kind is EstimatorKind.SURVIVAL:
        if domain is None:
            return weight
        return weight * (np.asarray(domain.signed_distance(positions, time)) > 0)
    if kind is EstimatorKind.SMEARED:
        pts = positions[:, 0] if positions.shape[1] == 1 else positions
        return weight * np.asarray(cfg.test_function(pts), dtype=float)
    edges = np.asarray(cfg.bins, dtype=float)
    idx = np.searchsorted(edges, positions[:, 0], side="right") - 1
    out = np.zeros((len(positions), len(edges) - 1))
    ok = (idx >= 0) & (idx < len(edges) - 1)
    out[np.flatnonzero(ok), idx[ok]] = weight[ok] / np.diff(edges)[idx[ok]]
    return out


def _feature_size(domain: Domain) -> float:
    if domain.kind is DomainKind.POLYGON:
        v = np.asarray(domain.params["vertices"], dtype=float)
        return float(np.min(np.linalg.norm(np.roll(v, -1, axis=0) - v, axis=1)))
    return float(domain.reach())


def _check_walk(q: PropagatorQuery, domain: Domain, cfg: MCConfig) -> tuple[int, float]:
    if domain.dimension != q.dimension:
        raise InvalidParameters("query and domain dimensions differ")
    if not q.t > q.s:
        raise InvalidParameters("t must exceed s")
    if not domain.contains(q.x, q.s):
        raise QueryOutsideDomain("the start point must be inside the domain")
    if _feature_size(domain) < 4 * q.sigma * np.sqrt(cfg.dt):
        raise ResolutionViolation(
            f"step dt={cfg.dt} is too coarse for a domain feature of size {_feature_size(domain):.3g}"
        )
    n_steps = int(np.ceil(q.elapsed / cfg.dt - 1e-9))
    return n_steps, q.elapsed / n_steps


# ---------------------------------------------------------------------------
# walks with walls
# ---------------------------------------------------------------------------


def killed_walk_estimate(q: PropagatorQuery, domain: Domain, cfg: MCConfig, workers: int = 1) -> MCEstimate:
    """Euler walk killed when it leaves the domain.

    With ``bridge_correction`` a surviving step is also killed with the
    probability that a Brownian bridge between the two positions touches
    the local boundary plane, exp(-2 d1 d2 / (sigma^2 dt)).
    """
    n_steps, h = _check_walk(q, domain, cfg)
    sig = q.sigma
    d = q.dimension
    scale = sig * np.sqrt(h)

    def job(rng, n):
        pos = np.tile(q.x, (n, 1))
        alive = np.ones(n, dtype=bool)
        live = np.arange(n)
        dist = np.asarray(domain.signed_distance(pos, q.s), dtype=float).reshape(n)
        for k in range(n_steps):
            tau = q.s + (k + 1) * h
            m = len(live)
            p = pos[live] + rng.standard_normal((m, d)) * scale
            nd = np.asarray(domain.signed_distance(p, tau), dtype=float).reshape(m)
            dead = nd <= 0
            if cfg.bridge_correction:
                cross = np.exp(-2 * dist[live].clip(0) * nd.clip(0) / (sig**2 * h))
                dead |= rng.random(m) < cross
            pos[live] = p
            dist[live] = nd
            alive[live[dead]] = False
            live = live[~dead]
            if not m:
                break
        return _endpoint_values(cfg, pos, alive.astype(float), None, q.t)

    mean, err = _run_paths(job, cfg, workers)
    return MCEstimate(mean, err, int(cfg.n_paths), h, cfg.epsilon, cfg.estimator)


def _reflect(domain: Domain, pts: np.ndarray, time: float) -> np.ndarray:
    for _ in range(8):
        out = np.asarray(domain.signed_distance(pts, time), dtype=float).reshape(len(pts)) < 0
        if not out.any():
            break
        foot, normal = domain.nearest_boundary(pts[out], time)
        depth = np.sum((pts[out] - foot) * normal, axis=1, keepdims=True)
        pts[out] = pts[out] - 2 * depth * normal
    return pts


def reflected_walk_estimate(q: PropagatorQuery, domain: Domain, cfg: MCConfig, workers: int = 1) -> MCEstimate:
    """Euler walk mirrored about the nearest boundary tangent plane whenever a step leaves the domain."""
    n_steps, h = _check_walk(q, domain, cfg)
    d = q.dimension
    scale = q.sigma * np.sqrt(h)

    def job(rng, n):
        pos = np.tile(q.x, (n, 1))
        for k in range(n_steps):
            pos += rng.standard_normal((n, d)) * scale
            pos = _reflect(domain, pos, q.s + (k + 1) * h)
        return _endpoint_values(cfg, pos, np.ones(n), None, q.t)

    mean, err = _run_paths(job, cfg, workers)
    return MCEstimate(mean, err, int(cfg.n_paths), h, cfg.epsilon, cfg.estimator)


@dataclass
class ReflectedWalkCandidate:
    """Smeared reflected density  int g(y) R(y, t | z, tau) dy  estimated by reflected walks."""

    domain: Domain
    t: float
    test_function: Callable
    n_paths: int = 20_000
    dt: float = 1e-3
    seed: int = 0
    sigma: float = 1.0

    def smeared(self, z: float, tau: float) -> tuple[float, float]:
        from .kernels import ModelParams

        q = PropagatorQuery(z, tau, z, self.t, ModelParams(self.sigma, 1))
        # start points on the moving wall are nudged inside
        if self.domain.signed_distance(q.x, tau) <= 0:
            p = self.domain.params
            q = PropagatorQuery(z + p["direction"] * 1e-12, tau, z, self.t, ModelParams(self.sigma, 1))
        h = min(self.dt, (self.t - tau) / 2)
        cfg = MCConfig(
            n_paths=self.n_paths, dt=h, seed=self.seed, estimator=EstimatorKind.SMEARED,
            test_function=self.test_function,
        )
        est = reflected_walk_estimate(q, self.domain, cfg)
        return est.mean, est.stderr


# ---------------------------------------------------------------------------
# Feynman-Kac
# ---------------------------------------------------------------------------


def feynman_kac_estimate(q: PropagatorQuery, potential: PotentialSpec, cfg: MCConfig, workers: int = 1) -> MCEstimate:
    """Free paths weighted by exp(-lambda int V dtau) with the trapezoid rule per step.

    The survival estimator returns the weighted mass inside the bump's
    domain (all of space for smooth potentials).  Weights above one are
    kept as importance weights for creating potentials.
    """
    if not q.t > q.s:
        raise InvalidParameters("t must exceed s")
    sig = q.sigma
    d = q.dimension
    lam = potential.coupling
    domain = None
    fine = None
    if potential.kind is PotentialKind.SINGULAR_BUMP:
        bump = potential.bump
        domain = bump.domain
        if domain.dimension != d:
            raise InvalidParameters("query and potential dimensions differ")
        if cfg.epsilon is None or not np.isclose(cfg.epsilon, bump.epsilon, rtol=1e-12):
            raise InvalidParameters("cfg.epsilon must equal the bump width")
        fine = (bump.epsilon / (8 * sig)) ** 2
        if not cfg.collar_refinement and cfg.dt > fine * (1 + 1e-12):
            raise ResolutionViolation(f"sigma sqrt(dt) must not exceed epsilon/8; dt <= {fine:.3g}")
        if not cfg.collar_refinement:
            fine = None
        width = 2 * bump.epsilon
    coarse = min(cfg.dt, q.elapsed)

    def V(pos, tau):
        pts = pos[:, 0] if d == 1 else pos
        return lam * np.asarray(potential(pts, tau), dtype=float).reshape(len(pos))

    def job(rng, n):
        pos = np.tile(q.x, (n, 1))
        now = np.full(n, float(q.s))
        logw = np.zeros(n)
        vals = V(pos, q.s)
        live = np.arange(n)
        while len(live):
            remaining = q.t - now[live]
            h = np.minimum(coarse, remaining)
            if fine is not None:
                xi = np.asarray(domain.signed_distance(pos[live], q.s), dtype=float).reshape(len(live))
                gap = np.maximum(np.maximum(-xi, xi - width), 0.0)
                h = np.minimum(h, np.maximum((gap / (5 * sig)) ** 2, fine))
            # finishing steps that would leave a sliver are merged
            last = remaining - h < 1e-12 * q.elapsed
            h = np.where(last, remaining, h)
            new = pos[live] + rng.standard_normal((len(live), d)) * (sig * np.sqrt(h))[:, None]
            t_new = np.where(last, q.t, now[live] + h)
            v_new = V(new, t_new)
            logw[live] -= 0.5 * h * (vals[live] + v_new)
            pos[live] = new
            now[live] = t_new
            vals[live] = v_new
            if np.any(np.abs(logw[live]) > _LOG_WEIGHT_LIMIT):
                raise WeightOverflow("a path weight left the range exp(+-700)")
            live = live[~last]
        weight = np.exp(logw)
        return _endpoint_values(cfg, pos, weight, domain, q.t)

    mean, err = _run_paths(job, cfg, workers)
    used = cfg.dt if fine is None else fine
    return MCEstimate(mean, err, int(cfg.n_paths), used, cfg.epsilon, cfg.estimator, {"coarse_dt": coarse})
