"""Boundary-layer perturbation series for absorbed, reflected and elastic propagators.

Each order is built from the previous one by a Volterra-type recurrence on
the (time node, boundary node) grid, so an order-i simplex integral costs one
kernel application instead of an i-fold quadrature.

Discretisation
--------------
* time: graded trapezoid grid (see :func:`geometry.make_grid`);
* boundary: the domain's node rule;
* near-diagonal cells: the integral of the kernel over a node's own smooth
  patch is known in closed form (circle, straight edge, single point).  It is
  subtracted inside the node sum and added back with product-integration
  weights in time, which captures the inverse-square-root behaviour of the
  patch integral as the time gap closes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf, eval_legendre, ive

from .errors import (
    CoincidentPoints,
    DimensionTooLow,
    InsufficientCandidateSupport,
    InvalidParameters,
    QuadratureUnderresolved,
    QueryOutsideDomain,
    SeriesDivergenceSuspected,
)
from .geometry import Convexity, Domain, DomainKind, QuadratureGrid, make_grid
from .kernels import ModelParams, PropagatorQuery, green_kernel, heat_kernel

__all__ = [
    "Direction",
    "Layer",
    "ConvergenceMode",
    "SeriesResult",
    "BoundaryLayerDensity",
    "LayerEngine",
    "classify_mode",
    "absorbed_series",
    "reflected_series",
    "elastic_series",
    "moving_absorbed_series",
    "series_batch",
    "green_absorbed_series",
    "SeriesPropagator",
    "residual_integral_equation",
    "lemma3_integral",
    "lemma3_identity_check",
    "SmearedCandidate",
    "moving_reflected_residual",
    "ResidualReport",
]


class Direction(str, Enum):
    FP = "FP"
    LP = "LP"


class Layer(str, Enum):
    SBL = "SBL"
    DBL = "DBL"


class ConvergenceMode(str, Enum):
    ALTERNATING = "Alternating"
    MONOTONE = "Monotone"
    MIXED = "Mixed"
    UNDETERMINED = "Undetermined"


@dataclass
class SeriesResult:
    terms: list[float]
    partial_sums: list[float]
    convergence_mode: ConvergenceMode
    truncation_order: int
    quadrature_report: dict = field(default_factory=dict)

    @property
    def value(self) -> float:
        return self.partial_sums[-1]


@dataclass
class BoundaryLayerDensity:
    values: np.ndarray
    order: int


def classify_mode(terms: Sequence[float], convexity: Convexity = Convexity.CONVEX, rel_floor: float = 1e-14) -> ConvergenceMode:
    """Sign pattern of the correction terms (terms[1:]), ignoring exact zeros."""
    scale = abs(terms[0]) if terms else 0.0
    corr = [c for c in terms[1:] if abs(c) > rel_floor * max(scale, 1e-300)]
    if len(corr) < 2:
        return ConvergenceMode.UNDETERMINED
    if convexity is Convexity.MIXED:
        return ConvergenceMode.MIXED
    signs = np.sign(corr)
    if np.all(signs == signs[0]):
        return ConvergenceMode.MONOTONE
    if np.all(signs[1:] == -signs[:-1]):
        return ConvergenceMode.ALTERNATING
    return ConvergenceMode.UNDETERMINED


# ---------------------------------------------------------------------------
# near-diagonal self interaction
# ---------------------------------------------------------------------------


def _circle_flux_factor(a: np.ndarray) -> np.ndarray:
    """exp(-a) (I0(a) - I1(a)), with an asymptotic branch against cancellation."""
    out = np.empty_like(a)
    big = a > 1e3
    ab = a[big]
    out[big] = (0.5 / ab + 0.1875 / ab**2 + 0.17578125 / ab**3) / np.sqrt(2 * np.pi * ab)
    out[~big] = ive(0, a[~big]) - ive(1, a[~big])
    return out


def _self_kernel(domain: Domain, arrays, a: int, sigma: float, kappa_a: float, backward: bool):
    """Closed-form integral of the kernel over node ``a``'s own patch, as a function of the time gap."""
    s2 = sigma**2
    if domain.dimension == 1:
        n = arrays.normals[a, 0]
        v = arrays.velocities[a, 0]
        drift = -n * v if backward else n * v
        coef = drift - kappa_a * s2
        if coef == 0:
            return None, None

        def point(D, coef=coef, v=v):
            return coef * np.exp(-(v * v) * D / (2 * s2)) / np.sqrt(2 * np.pi * s2 * D)

        return ("point", coef, v), point
    if domain.kind in (DomainKind.DISK, DomainKind.EXTERIOR_DISK):
        R = float(domain.params["radius"])
        sgn = 1.0 if domain.kind is DomainKind.DISK else -1.0

        def circle(D, R=R, sgn=sgn, k=kappa_a):
            aa = R**2 / (s2 * D)
            val = sgn * R**2 / (s2 * D**2) * _circle_flux_factor(aa)
            if k:
                val = val - k * s2 * R / (s2 * D) * ive(0, aa)
            return val

        return ("circle", R, sgn, kappa_a), circle
    if domain.kind is DomainKind.POLYGON:
        if kappa_a == 0:
            return None, None
        lo, hi = arrays.patch_lo[a], arrays.patch_hi[a]

        def edge(D, lo=lo, hi=hi, k=kappa_a):
            w = np.sqrt(2 * s2 * D)
            return -k * s2 * 0.5 * (erf(lo / w) + erf(hi / w)) / np.sqrt(2 * np.pi * s2 * D)

        return ("edge", lo, hi, kappa_a), edge
    raise InvalidParameters(f"time-domain layer series not available for {domain.kind.value}")


def _product_weights(times: np.ndarray, s: float, fn: Callable, n_gl: int = 16, stencil: int = 4) -> np.ndarray:
    """Weights P[j, k] with  int_s^{t_j} fn(t_j - u) f(u) du  ~  sum_k P[j, k] f(t_k).

    On each cell ``f`` is replaced by its Lagrange interpolant through
    ``stencil`` neighbouring nodes (f vanishes at ``s``, which serves as an
    extra node).  Cells are integrated by Gauss-Legendre in sqrt(t_j - u),
    which removes the inverse-square-root endpoint behaviour of ``fn``.
    """
    N = len(times)
    nodes = np.concatenate([[s], times])
    J, C = np.tril_indices(N)
    tj = times[J]
    left, right = nodes[C], nodes[C + 1]
    vlo, vhi = np.sqrt(np.maximum(tj - right, 0.0)), np.sqrt(tj - left)
    xg, wg = np.polynomial.legendre.leggauss(n_gl)
    half = 0.5 * (vhi - vlo)[:, None]
    v = half * (xg + 1) + vlo[:, None]
    cv = fn(v**2) * half * wg * 2 * v
    u = tj[:, None] - v**2
    # stencil of node indices (into ``nodes``) around cell [C, C+1]
    first = np.clip(C + 1 - stencil // 2, 0, N + 1 - stencil)
    idx = first[:, None] + np.arange(stencil)[None, :]
    pts = nodes[idx]
    P = np.zeros((N, N))
    for k in range(stencil):
        basis = np.ones_like(u)
        for m in range(stencil):
            if m != k:
                basis *= (u - pts[:, m, None]) / (pts[:, k, None] - pts[:, m, None])
        wk = np.sum(cv * basis, axis=1)
        col = idx[:, k] - 1
        keep = col >= 0
        np.add.at(P, (J[keep], col[keep]), wk[keep])
    return P


# ---------------------------------------------------------------------------
# engine
# ---------------------------------------------------------------------------

_BLOCK_BUDGET = 4e7  # kernel entries kept in memory across orders


class LayerEngine:
    """Discrete layer operators for one (domain, grid, sigma, elastic) combination.

    ``elastic=False`` zeroes the elasticity field, so reflected and elastic
    series with kappa = 0 run through identical arithmetic.
    """

    def __init__(self, domain: Domain, grid: QuadratureGrid, sigma: float = 1.0, elastic: bool = False):
        if domain.kind is DomainKind.BALL:
            raise InvalidParameters("use green_absorbed_series for the ball")
        self.domain = domain
        self.grid = grid
        self.sigma = float(sigma)
        self.dim = domain.dimension
        tau = grid.time_nodes
        self.tau = tau
        self.w = grid.time_weights
        N = len(tau)
        base = domain.boundary_arrays(grid.n_boundary, grid.s)
        self.arrays = base
        M = len(base)
        self.M = M
        if domain.moving:
            pos = np.stack([domain.boundary_arrays(grid.n_boundary, th).positions for th in tau])
        else:
            pos = np.broadcast_to(base.positions, (N, M, self.dim))
        self.pos = pos
        self.normals = base.normals
        self.W = base.weights
        self.kappa = base.kappa if elastic else np.zeros(M)
        continuous = self.dim > 1
        same = base.patch[:, None] == base.patch[None, :]
        self.subtract = same & continuous & ~np.eye(M, dtype=bool)
        self._blocks: dict[tuple[int, bool], tuple] = {}
        self._keep_blocks = N * N * M * M <= _BLOCK_BUDGET
        self._P: dict[bool, list[tuple[np.ndarray, np.ndarray]]] = {}

    # -- kernels -----------------------------------------------------------

    def _block(self, j: int, backward: bool):
        key = (j, backward)
        if key in self._blocks:
            return self._blocks[key]
        N = len(self.tau)
        cols = np.arange(j + 1, N) if backward else np.arange(0, j)
        if len(cols) == 0:
            out = (cols, None, None)
        else:
            pa = self.pos[j]
            pb = self.pos[cols]
            dt = (self.tau[cols] - self.tau[j]) if backward else (self.tau[j] - self.tau[cols])
            diff = pa[None, :, None, :] - pb[:, None, :, :]
            proj = np.einsum("ad,cabd->cab", self.normals, diff)
            g = heat_kernel(diff, 0.0, dt[:, None, None], self.sigma, self.dim)
            K = (proj / dt[:, None, None] - self.kappa[None, :, None] * self.sigma**2) * g
            idx = np.arange(self.M)
            K[:, idx, idx] = 0.0
            K *= self.w[cols][:, None, None] * self.W[None, None, :]
            rowsum = np.sum(np.where(self.subtract[None], K, 0.0), axis=2)
            out = (cols, K, rowsum)
        if self._keep_blocks:
            self._blocks[key] = out
        return out

    def _self_weights(self, backward: bool):
        if backward in self._P:
            return self._P[backward]
        groups: dict[tuple, tuple[Callable, list[int]]] = {}
        for a in range(self.M):
            key, fn = _self_kernel(self.domain, self.arrays, a, self.sigma, float(self.kappa[a]), backward)
            if fn is None:
                continue
            groups.setdefault(key, (fn, []))[1].append(a)
        out = []
        for fn, idx in groups.values():
            P = _product_weights(self.tau, self.grid.s, fn)
            if backward:
                # the grid is symmetric under time reversal, so the backward
                # weights are the forward weights on the mirrored index set
                P = P[::-1, ::-1]
            out.append((np.asarray(idx), P))
        self._P[backward] = out
        return out

    def apply(self, F: np.ndarray, backward: bool = False) -> np.ndarray:
        """One application of the layer operator to F with shape (n_time, M, Q)."""
        N, M, Q = F.shape
        out = np.zeros_like(F)
        for j in range(N):
            cols, K, rowsum = self._block(j, backward)
            if K is None:
                continue
            Fc = F[cols]
            acc = np.tensordot(K, Fc, axes=([0, 2], [0, 1]))
            acc -= np.einsum("ca,caq->aq", rowsum, Fc)
            out[j] = acc
        for idx, P in self._self_weights(backward):
            out[:, idx, :] += np.einsum("jk,kaq->jaq", P, F[:, idx, :])
        return out

    # -- end layers ----------------------------------------------------------

    def first_layer(self, points: np.ndarray, backward: bool = False) -> np.ndarray:
        """Forward: derivative at the boundary of B(beta, tau | x, s) for each x.

        Backward: derivative at the boundary of B(y, t | beta, tau) for each y.
        """
        pts = np.asarray(points, dtype=float).reshape(-1, self.dim)
        if backward:
            dt = (self.grid.t - self.tau)[:, None, None]
        else:
            dt = (self.tau - self.grid.s)[:, None, None]
        diff = self.pos[:, :, None, :] - pts[None, None, :, :]
        proj = np.einsum("ad,jaqd->jaq", self.normals, diff)
        g = heat_kernel(diff, 0.0, dt, self.sigma, self.dim)
        return (proj / dt - self.kappa[None, :, None] * self.sigma**2) * g

    def end_kernel(self, points: np.ndarray, backward: bool = False) -> np.ndarray:
        """Plain heat kernel between boundary nodes and the far end point, weighted for contraction."""
        pts = np.asarray(points, dtype=float).reshape(-1, self.dim)
        diff = self.pos[:, :, None, :] - pts[None, None, :, :]
        dt = (self.tau - self.grid.s) if backward else (self.grid.t - self.tau)
        g = heat_kernel(diff, 0.0, dt[:, None, None], self.sigma, self.dim)
        return g * self.w[:, None, None] * self.W[None, :, None]

    def raw_terms(self, xs: np.ndarray, ys: np.ndarray, max_order: int, direction: Direction, stop: Callable | None = None):
        """Unsigned order-by-order integrals X_1..X_n for each (x_q, y_q) pair, plus layer densities."""
        backward = Direction(direction) is Direction.LP
        start, end = (ys, xs) if backward else (xs, ys)
        F = self.first_layer(start, backward)
        E = self.end_kernel(end, backward)
        out, layers = [], []
        for order in range(1, max_order + 1):
            if order > 1:
                F = self.apply(F, backward)
            X = np.einsum("jaq,jaq->q", E, F)
            out.append(X)
            layers.append(F)
            if stop is not None and stop(order, np.asarray(out)):
                break
        return np.asarray(out), layers


_ENGINES: list[tuple[object, object, float, bool, LayerEngine]] = []


def _engine(domain: Domain, grid: QuadratureGrid, sigma: float, elastic: bool) -> LayerEngine:
    for d, g, sg, el, eng in _ENGINES:
        if d is domain and g is grid and sg == sigma and el == elastic:
            return eng
    eng = LayerEngine(domain, grid, sigma, elastic)
    _ENGINES.append((domain, grid, sigma, elastic, eng))
    if len(_ENGINES) > 6:
        _ENGINES.pop(0)
    return eng


# ---------------------------------------------------------------------------
# series front ends
# ---------------------------------------------------------------------------

_SIGNS = {"absorbed": -1.0, "reflected": 1.0, "elastic": 1.0}


def _check_query(q: PropagatorQuery, domain: Domain):
    if q.dimension != domain.dimension:
        raise InvalidParameters("query and domain dimensions differ")
    if not q.t > q.s:
        raise InvalidParameters("t must exceed s")
    if not domain.contains(q.x, q.s):
        raise QueryOutsideDomain(f"x={q.x} is not inside the domain at time s")
    if not domain.contains(q.y, q.t):
        raise QueryOutsideDomain(f"y={q.y} is not inside the domain at time t")


def _resolve_grid(q: PropagatorQuery, grid: QuadratureGrid | None) -> QuadratureGrid:
    if grid is None:
        return make_grid(q.s, q.t)
    if abs(grid.s - q.s) > 1e-14 or abs(grid.t - q.t) > 1e-14:
        raise InvalidParameters("grid endpoints must match the query times")
    return grid


def series_batch(
    queries: Sequence[PropagatorQuery],
    domain: Domain,
    grid: QuadratureGrid | None = None,
    kind: str = "absorbed",
    direction: Direction | str = Direction.FP,
    max_order: int = 8,
    rel_tol: float = 1e-8,
    check_resolution: bool = True,
    resolution_tol: float = 1e-3,
    divergence_check: bool | None = None,
) -> list[SeriesResult]:
    """Series for many queries sharing (s, t, sigma); kernels are built once.

    ``kind`` is one of ``absorbed``, ``reflected``, ``elastic``.
    """
    if not queries:
        return []
    q0 = queries[0]
    sigma = q0.sigma
    for q in queries:
        _check_query(q, domain)
        if q.s != q0.s or q.t != q0.t or q.sigma != sigma:
            raise InvalidParameters("batched queries must share s, t and sigma")
    if max_order < 0:
        raise InvalidParameters("max_order must be >= 0")
    grid = _resolve_grid(q0, grid)
    sign = _SIGNS[kind]
    elastic = kind == "elastic"
    if divergence_check is None:
        divergence_check = elastic
    eng = _engine(domain, grid, sigma, elastic)
    xs = np.array([q.x for q in queries])
    ys = np.array([q.y for q in queries])
    free = heat_kernel(ys, xs, q0.elapsed, sigma, q0.dimension)
    tol = rel_tol * np.abs(free)

    def stop(order, X):
        signed = np.abs(X[-1])
        if np.all(signed < tol):
            return True
        if divergence_check and len(X) >= 4:
            a = np.abs(X[-4:])
            if np.any((a[1] > a[0]) & (a[2] > a[1]) & (a[3] > a[2])):
                return True
        return False

    if max_order > 0:
        X, _ = eng.raw_terms(xs, ys, max_order, Direction(direction), stop)
    else:
        X = np.zeros((0, len(queries)))

    if check_resolution and max_order > 0:
        coarse = LayerEngine(domain, grid.halved(), sigma, elastic)
        Xc, _ = coarse.raw_terms(xs, ys, 1, Direction(direction))
        bad = np.abs(Xc[0] - X[0]) > resolution_tol * np.abs(free) + 1e-300
        if np.any(bad):
            i = int(np.argmax(bad))
            raise QuadratureUnderresolved(
                f"first-order term changes by {abs(Xc[0][i] - X[0][i]):.3e} when the time grid is halved "
                f"(query {i}); refine the grid or increase grading"
            )

    results = []
    report = {"n_time": grid.n_time, "n_boundary": eng.M, "grading": grid.grading_exponent}
    for qi in range(len(queries)):
        terms = [float(free[qi])] + [float(sign**i * X[i - 1, qi]) for i in range(1, len(X) + 1)]
        partial = list(np.cumsum(terms))
        res = SeriesResult(
            terms=terms,
            partial_sums=[float(p) for p in partial],
            convergence_mode=classify_mode(terms, domain.convexity),
            truncation_order=len(terms) - 1,
            quadrature_report=dict(report),
        )
        if divergence_check and len(terms) >= 5:
            a = np.abs(terms[-4:])
            if a[1] > a[0] and a[2] > a[1] and a[3] > a[2]:
                raise SeriesDivergenceSuspected(
                    f"correction terms grew for three consecutive orders up to order {len(terms) - 1}", res
                )
        results.append(res)
    return results


def absorbed_series(q, domain, grid=None, max_order: int = 8, direction=Direction.FP, **kw) -> SeriesResult:
    return series_batch([q], domain, grid, "absorbed", direction, max_order, **kw)[0]


def reflected_series(q, domain, grid=None, max_order: int = 8, direction=Direction.FP, **kw) -> SeriesResult:
    return series_batch([q], domain, grid, "reflected", direction, max_order, **kw)[0]


def elastic_series(q, domain, grid=None, max_order: int = 8, direction=Direction.FP, **kw) -> SeriesResult:
    return series_batch([q], domain, grid, "elastic", direction, max_order, **kw)[0]


def moving_absorbed_series(q, moving_domain, grid=None, max_order: int = 8, direction=Direction.FP, **kw) -> SeriesResult:
    if moving_domain.kind is not DomainKind.MOVING_HALF_LINE:
        raise InvalidParameters("moving series need a MovingHalfLine domain")
    return series_batch([q], moving_domain, grid, "absorbed", direction, max_order, **kw)[0]


# ---------------------------------------------------------------------------
# Green function of the ball
# ---------------------------------------------------------------------------


def _green_normal(at, normal, other, sigma: float, dim: int):
    diff = np.asarray(at) - np.asarray(other)
    r = np.linalg.norm(diff, axis=-1)
    proj = np.sum(normal * diff, axis=-1)
    from scipy.special import gamma

    c = gamma(dim / 2 - 1) / (2 * np.pi ** (dim / 2))
    return c * (dim - 2) * proj / r**dim


def green_absorbed_series(
    y,
    x,
    domain: Domain,
    n_boundary: int = 256,
    max_order: int = 8,
    layer: Layer | str = Layer.DBL,
    sigma: float = 1.0,
    rel_tol: float = 1e-8,
    legendre_degree: int | None = None,
) -> SeriesResult:
    """Time-integrated first-passage (DBL) or last-passage (SBL) series on a ball.

    The weakly singular boundary-to-boundary kernel 1/(4 pi R |b - g|) is
    replaced by its Legendre expansion truncated at the degree the node rule
    resolves, a spectral Nystrom treatment of the coincidence.
    """
    if domain.dimension < 3:
        raise DimensionTooLow("Green-function series need d >= 3")
    if domain.kind is not DomainKind.BALL:
        raise InvalidParameters("Green-function series are implemented for the ball")
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    if np.array_equal(x, y):
        raise CoincidentPoints("x equals y")
    if not (domain.contains(x) and domain.contains(y)):
        raise QueryOutsideDomain("x and y must be inside the ball")
    arr = domain.boundary_arrays(n_boundary)
    pos, nrm, W = arr.positions, arr.normals, arr.weights
    R = float(domain.params["radius"])
    n_theta = int(round(np.sqrt(n_boundary)))
    L = n_theta - 1 if legendre_degree is None else legendre_degree
    cosang = np.clip(nrm @ nrm.T, -1.0, 1.0)
    K = sum(eval_legendre(l, cosang) for l in range(L + 1)) / (4 * np.pi * R**2)
    KW = K * W[None, :]
    d = 3
    free = float(green_kernel(y, x, sigma, d))
    if Layer(layer) is Layer.DBL:
        left = green_kernel(y, pos, sigma, d) * W
        right = _green_normal(pos, nrm, x, sigma, d)
    else:
        left = _green_normal(pos, nrm, y, sigma, d) * W
        right = green_kernel(pos, x, sigma, d)
    terms = [free]
    vec = right
    for order in range(1, max_order + 1):
        if order > 1:
            vec = KW @ vec
        terms.append(float((-1) ** order * left @ vec))
        if abs(terms[-1]) < rel_tol * abs(free):
            break
    return SeriesResult(
        terms=terms,
        partial_sums=[float(v) for v in np.cumsum(terms)],
        convergence_mode=classify_mode(terms, domain.convexity),
        truncation_order=len(terms) - 1,
        quadrature_report={"n_boundary": len(W), "legendre_degree": L},
    )


# ---------------------------------------------------------------------------
# propagators usable inside residual checks
# ---------------------------------------------------------------------------


class SeriesPropagator:
    """Evaluate a truncated series at arbitrary (y, t | x, s) by building grids on demand."""

    def __init__(self, domain: Domain, kind: str = "absorbed", order: int = 8, n_time: int = 120, n_boundary: int = 64, sigma: float = 1.0):
        self.domain = domain
        self.kind = kind
        self.order = order
        self.n_time = n_time
        self.n_boundary = n_boundary
        self.sigma = sigma
        self._grids: dict[tuple[float, float], QuadratureGrid] = {}

    def __call__(self, y, t: float, x, s: float) -> float:
        key = (float(s), float(t))
        if key not in self._grids:
            self._grids[key] = make_grid(s, t, self.n_time, self.n_boundary)
        q = PropagatorQuery(x, s, y, t, ModelParams(self.sigma, self.domain.dimension))
        return series_batch(
            [q], self.domain, self._grids[key], self.kind, Direction.FP, self.order, rel_tol=0.0, check_resolution=False
        )[0].value


def _flux(fn: Callable, point: np.ndarray, normal: np.ndarray, sigma: float, h: float) -> float:
    """Inward normal derivative  -sigma^2 n . grad  by a one-sided second-order stencil."""
    f0, f1, f2 = (fn(point - k * h * normal) for k in range(3))
    return sigma**2 * (-3 * f0 + 4 * f1 - f2) / (2 * h)


def residual_integral_equation(
    q: PropagatorQuery,
    domain: Domain,
    grid: QuadratureGrid | None,
    candidate: Callable,
    which: str,
    fd_step: float = 1e-4,
) -> float:
    """Absolute residual of a candidate propagator in its own boundary integral equation.

    ``candidate(y, t, x, s)`` returns the propagator; boundary fluxes are
    taken from it by finite differences, so the check exercises the factor
    one-half that multiplies the unknown's own flux.
    ``which`` is one of Prop1_FP, Prop1_LP, Prop2_FR, Prop2_LR.
    """
    grid = _resolve_grid(q, grid)
    sigma, d = q.sigma, q.dimension
    tau, w = grid.time_nodes, grid.time_weights
    total = 0.0
    for j, th in enumerate(tau):
        arr = domain.boundary_arrays(grid.n_boundary, th)
        for b, n, wb, vel in zip(arr.positions, arr.normals, arr.weights, arr.velocities):
            if which == "Prop1_FP":
                flux = _flux(lambda p: candidate(p, th, q.x, q.s), b, n, sigma, fd_step)
                val = -heat_kernel(q.y, b, q.t - th, sigma, d) * 0.5 * flux
            elif which == "Prop1_LP":
                flux = _flux(lambda p: candidate(q.y, q.t, p, th), b, n, sigma, fd_step)
                val = -0.5 * flux * heat_kernel(b, q.x, th - q.s, sigma, d)
            elif which == "Prop2_FR":
                fwd = np.dot(n, b - q.x) / (th - q.s) * heat_kernel(b, q.x, th - q.s, sigma, d)
                gb = heat_kernel(b, q.x, th - q.s, sigma, d)
                val = candidate(q.y, q.t, b, th) * (-np.dot(n, vel) * gb + 0.5 * fwd)
            elif which == "Prop2_LR":
                bwd = np.dot(n, b - q.y) / (q.t - th) * heat_kernel(q.y, b, q.t - th, sigma, d)
                val = 0.5 * bwd * candidate(b, th, q.x, q.s)
            else:
                raise InvalidParameters(f"unknown equation {which!r}")
            total += w[j] * wb * val
    lhs = candidate(q.y, q.t, q.x, q.s)
    return float(abs(lhs - (heat_kernel(q.y, q.x, q.elapsed, sigma, d) + total)))


def _patch_moments(u, half, sigma: float, dim: int):
    """Kernel mass and second moment over the flat patch around the coincident node.

    2D: an arc of half-length ``half``; 3D: a disk of radius ``half``.
    """
    c = 2 * sigma**2 * u
    if dim == 2:
        m0 = erf(half / np.sqrt(c)) / np.sqrt(np.pi * c)
        m2 = (sigma**2 * u) * m0 - 2 * half * sigma**2 * u * np.exp(-half * half / c) / (np.pi * c)
        return m0, m2
    m0 = -np.expm1(-half * half / c) / np.sqrt(np.pi * c)
    m2 = 2 * np.pi * (np.pi * c) ** -1.5 * (c / 2) * (c - (c + half * half) * np.exp(-half * half / c))
    return m0, m2


def _flux_identity_on_boundary(q: PropagatorQuery, domain: Domain, n_boundary: int, y_on_wall: bool) -> float:
    """Point-on-wall branch: adaptive time integral per node, exact patch kernel at the coincident node."""
    from scipy import integrate

    arr = domain.boundary_arrays(n_boundary, q.s)
    sigma, d, s, t = q.sigma, q.dimension, q.s, q.t
    wall_pt = q.y if y_on_wall else q.x
    gaps = np.linalg.norm(arr.positions - wall_pt, axis=1)
    hit = int(np.argmin(gaps))
    total = 0.0
    for a, (b, n, w) in enumerate(zip(arr.positions, arr.normals, arr.weights)):
        if a == hit and d > 1 and gaps[a] < 1e-9:
            # curvature from the nearest neighbour: n(beta) . (beta - b) ~ curv l^2 / 2 inside the patch
            others = np.delete(np.arange(len(arr.weights)), a)
            nb = arr.positions[others[np.argmin(np.linalg.norm(arr.positions[others] - b, axis=1))]]
            curv = -2 * np.dot(n, nb - b) / np.sum((nb - b) ** 2)
            half = w / 2 if d == 2 else np.sqrt(w / np.pi)

            def f(tau):
                if not s < tau < t:
                    return 0.0
                if y_on_wall:
                    m0, m2 = _patch_moments(t - tau, half, sigma, d)
                    return (0.5 * curv * m2 / (t - tau) - m0 * np.dot(n, b - q.x) / (tau - s)) * heat_kernel(b, q.x, tau - s, sigma, d)
                m0, m2 = _patch_moments(tau - s, half, sigma, d)
                return heat_kernel(q.y, b, t - tau, sigma, d) * (m0 * np.dot(n, b - q.y) / (t - tau) - 0.5 * curv * m2 / (tau - s))

            total += integrate.quad(f, s, t, limit=200, epsabs=1e-13)[0]
            continue

        def f(tau):
            if not s < tau < t:
                return 0.0  # deep subdivision can round a node onto an endpoint
            return heat_kernel(q.y, b, t - tau, sigma, d) * (
                np.dot(n, b - q.y) / (t - tau) - np.dot(n, b - q.x) / (tau - s)
            ) * heat_kernel(b, q.x, tau - s, sigma, d)

        r2 = gaps[a] ** 2
        peak = (t - r2 / (4 * sigma**2)) if y_on_wall else (s + r2 / (4 * sigma**2))
        pts = [peak] if s < peak < t else None
        total += w * integrate.quad(f, s, t, points=pts, limit=200, epsabs=1e-13)[0]
    return float(total)


def lemma3_integral(q: PropagatorQuery, domain: Domain, grid: QuadratureGrid | None = None) -> float:
    """Signed value of  int dtau oint dbeta B(y|beta) (backward - forward derivative) B(beta|x).

    Zero for interior x and y; -B(y|x) with y on the wall and +B(y|x) with x on it.
    """
    grid = _resolve_grid(q, grid)
    on_wall = [abs(float(np.ravel(domain.signed_distance(p, q.s))[0])) < 1e-12 for p in (q.x, q.y)]
    if any(on_wall):
        if all(on_wall):
            raise InvalidParameters("at most one of x and y may sit on the boundary")
        return _flux_identity_on_boundary(q, domain, grid.n_boundary, on_wall[1])
    arr = domain.boundary_arrays(grid.n_boundary, grid.s)
    tau = grid.time_nodes[:, None]
    pos, nrm = arr.positions[None], arr.normals[None]
    sigma, d = q.sigma, q.dimension
    dt_in = tau - q.s
    dt_out = q.t - tau
    b_in = heat_kernel(pos, q.x, dt_in[..., None][..., 0], sigma, d)
    b_out = heat_kernel(q.y, pos, dt_out, sigma, d)
    back = np.sum(nrm * (pos - q.y), axis=-1) / dt_out
    fwd = np.sum(nrm * (pos - q.x), axis=-1) / dt_in
    integrand = b_out * (back - fwd) * b_in
    return float(np.sum(grid.time_weights[:, None] * arr.weights[None] * integrand))


def lemma3_identity_check(q: PropagatorQuery, domain: Domain, grid: QuadratureGrid | None = None) -> float:
    return abs(lemma3_integral(q, domain, grid))


# ---------------------------------------------------------------------------
# moving reflected wall: residual certification of a candidate
# ---------------------------------------------------------------------------


class SmearedCandidate:
    """Protocol: ``smeared(z, tau) -> (value, stderr)`` estimates int g(y) R(y, t | z, tau) dy."""

    t: float
    test_function: Callable

    def smeared(self, z: float, tau: float) -> tuple[float, float]:  # pragma: no cover - protocol
        raise NotImplementedError


@dataclass
class ResidualReport:
    residual: float
    stderr: float
    per_point: list[float]

    def __float__(self) -> float:
        return self.residual


def moving_reflected_residual(
    q: PropagatorQuery,
    moving_domain: Domain,
    grid: QuadratureGrid | None,
    candidate: SmearedCandidate,
    test_points: Sequence[float] | None = None,
    details: bool = False,
):
    """Residual of the first-reflection equation with boundary-velocity term, smeared in y.

    Both sides are integrated against the candidate's test function g, so
    R enters only through  S(z, tau) = int g(y) R(y, t | z, tau) dy.
    Returns the largest absolute residual over ``test_points`` (default: q.x).
    """
    if moving_domain.dimension != 1:
        raise InvalidParameters("moving reflected residual is one-dimensional")
    grid = _resolve_grid(q, grid)
    if abs(getattr(candidate, "t", q.t) - q.t) > 1e-14:
        raise InsufficientCandidateSupport("candidate is smeared at a different final time")
    sigma = q.sigma
    points = [float(q.x[0])] if test_points is None else [float(p) for p in test_points]
    g = candidate.test_function
    tau, w = grid.time_nodes, grid.time_weights
    p = moving_domain.params
    n = -p["direction"]
    v = p["velocity"]
    bvals = []
    for th in tau:
        try:
            bvals.append(candidate.smeared(moving_domain.boundary_offset(th), th))
        except (KeyError, IndexError, ValueError) as exc:
            raise InsufficientCandidateSupport(f"candidate cannot be evaluated at tau={th}") from exc
    S_b = np.array([b[0] for b in bvals])
    E_b = np.array([b[1] for b in bvals])
    ys = np.linspace(-12, 12, 4801) * sigma * np.sqrt(q.elapsed)
    res, errs = [], []
    for x in points:
        lhs, lerr = candidate.smeared(x, q.s)
        free = np.trapezoid(g(x + ys) * heat_kernel(x + ys[:, None], x, q.elapsed, sigma, 1), ys)
        bpos = np.array([moving_domain.boundary_offset(th) for th in tau])
        gb = heat_kernel(bpos[:, None], x, tau - q.s, sigma, 1)
        factor = (-n * v + 0.5 * n * (bpos - x) / (tau - q.s)) * gb
        rhs = free + np.sum(w * factor * S_b)
        res.append(abs(lhs - rhs))
        errs.append(float(np.sqrt(lerr**2 + np.sum((w * factor * E_b) ** 2))))
    worst = int(np.argmax(res))
    report = ResidualReport(residual=float(res[worst]), stderr=errs[worst], per_point=[float(r) for r in res])
    return report if details else report.residual
