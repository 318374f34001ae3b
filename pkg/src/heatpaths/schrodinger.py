"""Perturbation series for the heat propagator with a potential.

Smooth potentials use the K operator (one-dimensional, periodic spectral box).
Singular potentials built from the one-sided bump family use the L operator:
each term is evaluated on the collar where the bump lives, at a decreasing
sequence of widths, and extrapolated to zero width term by term.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from scipy import integrate
from scipy.interpolate import CubicSpline
from scipy.special import erf, erfcx, roots_hermite

from .errors import (
    CollarSelfIntersection,
    ExtrapolationUnstable,
    InvalidParameters,
    SupportTruncation,
)
from .geometry import Domain, DomainKind, QuadratureGrid, make_grid
from .kernels import PropagatorQuery, free_propagator, heat_kernel
from .layer_series import ConvergenceMode, _product_weights, classify_mode

__all__ = [
    "PotentialKind",
    "PotentialSign",
    "BoundaryMode",
    "BumpFamily",
    "PotentialSpec",
    "OperatorSeriesResult",
    "smooth_potential",
    "k_operator_apply",
    "smooth_potential_series",
    "l_operator_series",
    "l_operator_terms",
    "nested_l_operator_terms",
    "richardson_terms",
    "delta_exact",
    "delta_bump_potential",
    "theorem1_potential",
    "fi_residual",
]


class PotentialKind(str, Enum):
    SMOOTH = "Smooth"
    SINGULAR_BUMP = "SingularBump"


class PotentialSign(str, Enum):
    KILLING = "Killing"
    CREATING = "Creating"


class BoundaryMode(str, Enum):
    ABSORBING = "Absorbing"
    REFLECTING = "Reflecting"
    ELASTIC = "Elastic"


# ---------------------------------------------------------------------------
# bump profile
# ---------------------------------------------------------------------------


def _bump(w):
    """exp(1/(w^2 - 1)) on (-1, 1), zero outside."""
    w = np.asarray(w, dtype=float)
    out = np.zeros_like(w)
    inside = np.abs(w) < 1
    out[inside] = np.exp(1.0 / (w[inside] ** 2 - 1.0))
    return out


def _bump_slope(w):
    w = np.asarray(w, dtype=float)
    out = np.zeros_like(w)
    inside = np.abs(w) < 1
    wi = w[inside]
    out[inside] = np.exp(1.0 / (wi**2 - 1.0)) * (-2 * wi / (wi**2 - 1.0) ** 2)
    return out


@lru_cache(maxsize=1)
def _bump_tables():
    mass = integrate.quad(lambda u: float(_bump(u)), -1, 1, epsabs=1e-13, epsrel=1e-12)[0]
    edges = np.linspace(-1, 1, 2001)
    xg, wg = np.polynomial.legendre.leggauss(10)
    mid, half = 0.5 * (edges[1:] + edges[:-1]), 0.5 * (edges[1:] - edges[:-1])
    pieces = np.sum(_bump(mid[:, None] + half[:, None] * xg) * wg, axis=1) * half
    cumulative = np.concatenate([[0.0], np.cumsum(pieces)]) / mass
    cumulative[-1] = 1.0
    return 1.0 / mass, CubicSpline(edges, cumulative)


@dataclass(frozen=True)
class BumpFamily:
    """Smoothed indicator I_eps of a domain, built on the inward normal coordinate.

    The profile I'_eps(xi) = (c/eps) exp(1/((1 - xi/eps)^2 - 1)) lives on
    0 < xi < 2 eps, where xi is the signed distance into the domain, so
    I_eps rises from 0 on the boundary to 1 at depth 2 eps.
    """

    epsilon: float
    domain: Domain
    side: str = "inner"

    def __post_init__(self):
        if not self.epsilon > 0:
            raise InvalidParameters("epsilon must be positive")
        if self.side != "inner":
            raise InvalidParameters(
                "only the one-sided bump inside the domain is supported: a symmetric derivative-of-delta "
                "family gives an infinite second-order term"
            )
        if 2 * self.epsilon >= self.domain.reach():
            raise CollarSelfIntersection(
                f"collar width {2 * self.epsilon} reaches the domain's reach {self.domain.reach()}"
            )

    @property
    def normalization(self) -> float:
        return _bump_tables()[0]

    # profile in the normal coordinate ------------------------------------
    def first(self, xi):
        """I'_eps."""
        c = self.normalization
        return c / self.epsilon * _bump(np.asarray(xi, dtype=float) / self.epsilon - 1)

    def second(self, xi):
        """I''_eps."""
        c = self.normalization
        return c / self.epsilon**2 * _bump_slope(np.asarray(xi, dtype=float) / self.epsilon - 1)

    def integral(self, xi):
        """I_eps."""
        w = np.asarray(xi, dtype=float) / self.epsilon - 1
        spline = _bump_tables()[1]
        return np.where(w <= -1, 0.0, np.where(w >= 1, 1.0, spline(np.clip(w, -1, 1))))

    # spatial fields --------------------------------------------------------
    def normal_coordinate(self, x, time: float = 0.0):
        return self.domain.signed_distance(x, time)

    def indicator(self, x, time: float = 0.0):
        return self.integral(self.normal_coordinate(x, time))

    def normal_derivative(self, x, time: float = 0.0):
        """n . grad I_eps with n the outward normal of the nearest boundary point."""
        return -self.first(self.normal_coordinate(x, time))

    def laplacian(self, x, time: float = 0.0):
        xi = self.normal_coordinate(x, time)
        lap = self.second(xi)
        curvature = self._distance_laplacian(x, time)
        if curvature is not None:
            lap = lap + self.first(xi) * curvature
        return lap

    def _distance_laplacian(self, x, time):
        d = self.domain
        if d.dimension == 1:
            return None
        if d.kind in (DomainKind.DISK, DomainKind.EXTERIOR_DISK, DomainKind.BALL):
            c = np.asarray(d.params["center"], dtype=float)
            rho = np.linalg.norm(np.asarray(x, dtype=float) - c, axis=-1)
            rho = np.maximum(rho, 1e-300)
            sgn = -1.0 if d.kind is not DomainKind.EXTERIOR_DISK else 1.0
            return sgn * (d.dimension - 1) / rho
        raise CollarSelfIntersection("the bump Laplacian needs a boundary with positive reach")


@dataclass(frozen=True)
class PotentialSpec:
    """Killing potential lambda * V.

    Smooth: V = smooth_fn(alpha, tau).
    SingularBump: V = second_coeff * Laplacian(I_eps) + first_coeff * (n . grad I_eps).
    The sign flips V for creating potentials.
    """

    kind: PotentialKind
    coupling: float = 1.0
    smooth_fn: Callable | None = None
    bump: BumpFamily | None = None
    sign: PotentialSign = PotentialSign.KILLING
    second_coeff: float = 0.0
    first_coeff: float = 0.0
    label: str = ""

    def __post_init__(self):
        kind = PotentialKind(self.kind)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "sign", PotentialSign(self.sign))
        if kind is PotentialKind.SMOOTH and (self.smooth_fn is None or self.bump is not None):
            raise InvalidParameters("a smooth potential needs smooth_fn and no bump")
        if kind is PotentialKind.SINGULAR_BUMP and (self.bump is None or self.smooth_fn is not None):
            raise InvalidParameters("a bump potential needs a BumpFamily and no smooth_fn")

    @property
    def signum(self) -> float:
        return 1.0 if self.sign is PotentialSign.KILLING else -1.0

    def __call__(self, alpha, tau: float | np.ndarray = 0.0):
        """Signed V(alpha, tau), excluding the coupling."""
        if self.kind is PotentialKind.SMOOTH:
            return self.signum * np.asarray(self.smooth_fn(alpha, tau), dtype=float)
        b = self.bump
        val = 0.0
        if self.second_coeff:
            val = val + self.second_coeff * b.laplacian(alpha, float(np.mean(tau)))
        if self.first_coeff:
            val = val + self.first_coeff * b.normal_derivative(alpha, float(np.mean(tau)))
        return self.signum * np.asarray(val, dtype=float)

    def with_epsilon(self, epsilon: float) -> "PotentialSpec":
        if self.bump is None:
            raise InvalidParameters("only bump potentials have a width")
        return PotentialSpec(
            self.kind, self.coupling, None, BumpFamily(epsilon, self.bump.domain, self.bump.side),
            self.sign, self.second_coeff, self.first_coeff, self.label,
        )

    def with_sign(self, sign: PotentialSign) -> "PotentialSpec":
        return PotentialSpec(
            self.kind, self.coupling, self.smooth_fn, self.bump, sign, self.second_coeff, self.first_coeff, self.label
        )


def smooth_potential(fn: Callable, coupling: float = 1.0, sign=PotentialSign.KILLING, label: str = "") -> PotentialSpec:
    """Wrap ``fn(alpha, tau)``; a function of alpha alone is accepted too."""
    try:
        fn(np.zeros(2), 0.0)
        wrapped = fn
    except TypeError:
        def wrapped(alpha, tau, _f=fn):
            return _f(alpha)
    return PotentialSpec(PotentialKind.SMOOTH, coupling, wrapped, None, sign, label=label)


@dataclass
class OperatorSeriesResult:
    terms: list[float]
    partial_sums: list[float]
    convergence_mode: ConvergenceMode
    truncation_order: int
    epsilon_used: list[list[float]] = field(default_factory=list)
    raw_terms: dict = field(default_factory=dict)
    spread: list[float] = field(default_factory=list)

    @property
    def value(self) -> float:
        return self.partial_sums[-1]


def _result(terms: list[float], epsilon_used=None, raw=None, spread=None) -> OperatorSeriesResult:
    return OperatorSeriesResult(
        terms=[float(v) for v in terms],
        partial_sums=[float(v) for v in np.cumsum(terms)],
        convergence_mode=classify_mode(terms),
        truncation_order=len(terms) - 1,
        epsilon_used=epsilon_used or [],
        raw_terms=raw or {},
        spread=spread or [],
    )


# ---------------------------------------------------------------------------
# Dirac delta
# ---------------------------------------------------------------------------


def delta_exact(q: PropagatorQuery, coupling: float) -> float:
    """Propagator for the killing rate coupling * delta(alpha) on the line."""
    if q.dimension != 1:
        raise InvalidParameters("the delta propagator is one-dimensional")
    b = free_propagator(q)
    if coupling == 0:
        return b
    s2 = q.sigma**2
    var = s2 * q.elapsed
    base = abs(q.y[0]) + abs(q.x[0])
    rate = coupling / s2

    # substitute u = rate * alpha so the weight is exp(-u)
    def integrand(u):
        z = base + u / rate
        return np.exp(-u - z * z / (2 * var)) / np.sqrt(2 * np.pi * var)

    val, _ = integrate.quad(integrand, 0, np.inf, epsabs=1e-13, epsrel=1e-12)
    return float(b - val)


def delta_bump_potential(epsilon: float, coupling: float = 1.0, origin: float = 0.0) -> PotentialSpec:
    """coupling * I'_eps: a one-sided family tending to coupling * delta at ``origin``."""
    from .geometry import make_domain

    dom = make_domain(DomainKind.HALF_LINE, {"origin": origin, "direction": 1.0})
    return PotentialSpec(
        PotentialKind.SINGULAR_BUMP, coupling, None, BumpFamily(epsilon, dom), PotentialSign.KILLING,
        0.0, -1.0, label="delta",
    )


def theorem1_potential(domain: Domain, epsilon: float, mode="Absorbing", kappa: float | None = None, sigma: float = 1.0) -> PotentialSpec:
    """Bump potentials whose zero-width limit imposes a boundary condition.

    Absorbing:  -(sigma^2/2) Lap I_eps
    Reflecting: +(sigma^2/2) Lap I_eps
    Elastic:    +(sigma^2/2) Lap I_eps - sigma^2 kappa n . grad I_eps
    """
    mode = BoundaryMode(mode)
    bump = BumpFamily(epsilon, domain)
    half = 0.5 * sigma**2
    if mode is BoundaryMode.ABSORBING:
        return PotentialSpec(PotentialKind.SINGULAR_BUMP, 1.0, None, bump, PotentialSign.KILLING, -half, 0.0, "absorbing")
    if mode is BoundaryMode.REFLECTING:
        return PotentialSpec(PotentialKind.SINGULAR_BUMP, 1.0, None, bump, PotentialSign.KILLING, half, 0.0, "reflecting")
    k = domain.kappa if kappa is None else kappa
    if callable(k):
        raise InvalidParameters("theorem1_potential needs a constant elasticity; pass kappa explicitly")
    if k < 0:
        raise InvalidParameters("kappa must be non-negative")
    return PotentialSpec(
        PotentialKind.SINGULAR_BUMP, 1.0, None, bump, PotentialSign.KILLING, half, -sigma**2 * float(k), "elastic"
    )


# ---------------------------------------------------------------------------
# K operator (smooth potentials)
# ---------------------------------------------------------------------------


def _bridge_window_nodes(mean: np.ndarray, sd: np.ndarray, breakpoints: Sequence[float], n_panels: int, n_gl: int):
    """Composite Gauss-Legendre nodes on mean +- 10 sd, split at breakpoints."""
    xg, wg = np.polynomial.legendre.leggauss(n_gl)
    nodes, weights = [], []
    for m, s in zip(np.atleast_1d(mean), np.atleast_1d(sd)):
        lo, hi = m - 10 * s, m + 10 * s
        edges = np.linspace(lo, hi, n_panels + 1)
        extra = [b for b in breakpoints if lo < b < hi]
        edges = np.unique(np.concatenate([edges, extra]))
        mid, half = 0.5 * (edges[1:] + edges[:-1]), 0.5 * (edges[1:] - edges[:-1])
        nodes.append((mid[:, None] + half[:, None] * xg).ravel())
        weights.append((half[:, None] * wg).ravel())
    return nodes, weights


def k_operator_apply(
    f: Callable | None,
    potential: PotentialSpec,
    q: PropagatorQuery,
    n_time: int = 48,
    n_panels: int = 40,
    breakpoints: Sequence[float] = (),
) -> float:
    """int_s^t dtau int dalpha B(y,t|alpha,tau) V(alpha,tau) f(alpha,tau).

    ``f=None`` means the free kernel B(alpha,tau|x,s).  The alpha integral
    runs over a window following the Brownian bridge from (x,s) to (y,t), so
    the quadrature tracks the narrow ends of the time interval.
    """
    if potential.kind is not PotentialKind.SMOOTH:
        raise InvalidParameters("k_operator_apply needs a smooth potential")
    if q.dimension != 1:
        raise InvalidParameters("the K operator is implemented in one dimension")
    x, y, s, t, sigma = q.x[0], q.y[0], q.s, q.t, q.sigma
    T = t - s
    # after the bridge-window alpha integral the integrand is smooth in tau
    xg, wg = np.polynomial.legendre.leggauss(n_time)
    taus, tw = s + 0.5 * T * (xg + 1), 0.5 * T * wg
    mean = x + (y - x) * (taus - s) / T
    sd = sigma * np.sqrt((taus - s) * (t - taus) / T)
    nodes, weights = _bridge_window_nodes(mean, sd, breakpoints, n_panels, 8)
    total = 0.0
    for tau, w_t, a, wa in zip(taus, tw, nodes, weights):
        bout = heat_kernel(y, a[:, None], t - tau, sigma, 1)
        bin_ = heat_kernel(a[:, None], x, tau - s, sigma, 1)
        fv = bin_ if f is None else np.asarray(f(a, tau), dtype=float)
        total += w_t * np.sum(wa * bout * potential(a, tau) * fv)
    return float(total)


def fi_residual(candidate: Callable, potential: PotentialSpec, q: PropagatorQuery, **kw) -> float:
    """|psi - (B - lambda K*psi)| for ``candidate(alpha, tau)`` = psi(alpha, tau | x, s) and psi(y, t | x, s)."""
    lhs = float(candidate(np.array([q.y[0]]), q.t)[0])
    k = k_operator_apply(candidate, potential, q, **kw)
    return abs(lhs - (free_propagator(q) - potential.coupling * k))


def _phi_moments(z: np.ndarray, m_max: int) -> np.ndarray:
    """I_m(z) = int_0^1 exp(-z (1 - w)) w^m dw for m = 0..m_max."""
    z = np.asarray(z, dtype=float)
    out = np.empty((m_max + 1,) + z.shape)
    small = z < 2.0
    zs = z[small]
    from math import factorial

    for m in range(m_max + 1):
        acc = np.zeros_like(zs)
        term_fact = factorial(m)
        for k in range(40):
            acc += (-zs) ** k * term_fact / factorial(m + k + 1)
        out[m][small] = acc
    zb = z[~small]
    prev = -np.expm1(-zb) / zb
    out[0][~small] = prev
    for m in range(1, m_max + 1):
        prev = (1 - m * prev) / zb
        out[m][~small] = prev
    return out


class _SpectralBox:
    """Periodic grid on which heat propagation is exact in Fourier space."""

    def __init__(self, anchor: float, half_width: float, n_points: int, sigma: float):
        dx = 2 * half_width / n_points
        k0 = int(round(half_width / dx))
        self.alpha = anchor + (np.arange(n_points) - k0) * dx
        self.anchor_index = k0
        self.dx = dx
        self.sigma = sigma
        freq = 2 * np.pi * np.fft.rfftfreq(n_points, d=dx)
        self.rate = 0.5 * sigma**2 * freq**2


def _support_check(potential: PotentialSpec, x: float, y: float, T: float, sigma: float, box: _SpectralBox, taus):
    lo, hi = min(x, y), max(x, y)
    span = box.alpha[-1] - box.alpha[0]
    wide = np.linspace(box.alpha[0] - span, box.alpha[-1] + span, 6 * len(box.alpha) // 2 + 1)
    dist = np.maximum(0.0, np.maximum(lo - wide, wide - hi))
    env = np.exp(-(dist**2) / (2 * sigma**2 * T))
    inside = (wide >= box.alpha[0]) & (wide <= box.alpha[-1])
    worst = 0.0
    for tau in taus:
        mass = np.abs(potential(wide, tau)) * env
        total = mass.sum()
        if total > 0:
            worst = max(worst, mass[~inside].sum() / total)
    if worst > 1e-4:
        raise SupportTruncation(f"{worst:.2e} of the potential's path-weighted mass lies outside the box")


def _propagate(nodes: np.ndarray, src_hat: np.ndarray, rate: np.ndarray, start_hat: np.ndarray | None = None) -> np.ndarray:
    """Fourier coefficients of  e^{(u-u0)A} start + int_{u0}^u e^{(u-v)A} src(v) dv  at every node.

    The source is interpolated by cubics in time, and each mode is integrated exactly.
    """
    n_nodes = len(nodes)
    out = np.zeros_like(src_hat)
    if start_hat is not None:
        out[0] = start_hat
    for n in range(n_nodes - 1):
        h = nodes[n + 1] - nodes[n]
        first = min(max(n - 1, 0), n_nodes - 4)
        idx = np.arange(first, first + 4)
        pts = (nodes[idx] - nodes[n]) / h
        vand = pts[:, None] ** np.arange(4)[None, :]
        coef = np.linalg.inv(vand)  # coef[m, k]: basis k in powers (u/h)^m
        moments = _phi_moments(rate * h, 3)  # (4, n_modes)
        weights = h * np.einsum("mk,mq->kq", coef, moments)
        out[n + 1] = np.exp(-rate * h) * out[n] + np.einsum("kq,kq->q", weights, src_hat[idx])
    return out


def _k_series_forward(potential, x, y, s, t, sigma, grid, box, max_order, n_hermite, reverse_time, n_bridge_time=32):
    """Unsigned terms  (K*)^i B  evaluated at (y, t), i = 1..max_order."""
    if reverse_time:
        def V(a, tau):
            return potential(a, s + t - tau)
    else:
        V = potential
    nodes = np.concatenate([[s], grid.time_nodes, [t]])
    alpha = box.alpha
    n_alpha = len(alpha)
    iy = int(round((y - alpha[0]) / box.dx))
    rate = box.rate
    # Until u0 the free kernel is too narrow for the grid; there the first layer
    # is a Brownian-bridge average of V under Gauss-Hermite, afterwards the
    # source V B(.|x) is propagated exactly mode by mode.
    u0 = s + min((4 * box.dx / sigma) ** 2, 0.25 * (t - s))
    near = np.flatnonzero(np.abs(alpha - x) <= 12 * sigma * np.sqrt(u0 - s))
    hx, hw = roots_hermite(n_hermite)
    hw = hw / np.sqrt(np.pi)
    gx, gw = np.polynomial.legendre.leggauss(n_bridge_time)

    def bridge_layer(th):
        span = th - s
        u = s + 0.5 * span * (gx + 1)
        wu = 0.5 * span * gw
        frac = (u - s) / span
        bsd = sigma * np.sqrt((u - s) * (th - u) / span)
        pa = alpha[near]
        acc = np.zeros_like(pa)
        for ui, wi, fi, sdi in zip(u, wu, frac, bsd):
            pts = (x + (pa - x) * fi)[:, None] + np.sqrt(2) * sdi * hx[None, :]
            acc += wi * (V(pts.ravel(), ui).reshape(pts.shape) @ hw)
        row = np.zeros(n_alpha)
        row[near] = heat_kernel(pa[:, None], x, span, sigma, 1) * acc
        return row

    layer = np.zeros((len(nodes), n_alpha))
    early = np.flatnonzero((nodes > s) & (nodes <= u0))
    for j in early:
        layer[j] = bridge_layer(nodes[j])
    late = np.flatnonzero(nodes > u0)
    ladder = s + (u0 - s) * 1.15 ** np.arange(200)
    fine = np.unique(np.concatenate([[u0], ladder[(ladder > u0) & (ladder < t)], nodes[late]]))
    src = np.stack([V(alpha, u) * heat_kernel(alpha[:, None], x, u - s, sigma, 1) for u in fine])
    hat = _propagate(fine, np.fft.rfft(src, axis=1), rate, np.fft.rfft(bridge_layer(u0)))
    pick = np.searchsorted(fine, nodes[late])
    layer[late] = np.fft.irfft(hat[pick], n=n_alpha, axis=1)
    terms = [float(layer[-1, iy])]
    # higher orders: exact heat propagation per Fourier mode, cubic-in-time source
    Vn = np.stack([V(alpha, th) for th in nodes])
    for _ in range(2, max_order + 1):
        src_hat = np.fft.rfft(Vn * layer, axis=1)
        src_hat[0] = 0.0  # layer vanishes at s
        layer = np.fft.irfft(_propagate(nodes, src_hat, rate), n=n_alpha, axis=1)
        terms.append(float(layer[-1, iy]))
    return terms


def smooth_potential_series(
    q: PropagatorQuery,
    potential: PotentialSpec,
    grid: QuadratureGrid | None = None,
    max_order: int = 8,
    direction: str = "FI",
    n_space: int = 2048,
    half_width: float | None = None,
    n_hermite: int = 64,
    rel_tol: float = 0.0,
) -> OperatorSeriesResult:
    """psi_V = B + sum (-lambda)^i (K*)^i B  (FI)  or  B + sum (-lambda)^i B (*K)^i  (LI)."""
    if potential.kind is not PotentialKind.SMOOTH:
        raise InvalidParameters("smooth_potential_series needs a smooth potential")
    if q.dimension != 1:
        raise InvalidParameters("the K-series is implemented in one dimension")
    if direction not in ("FI", "LI"):
        raise InvalidParameters("direction must be FI or LI")
    x, y, s, t, sigma = q.x[0], q.y[0], q.s, q.t, q.sigma
    T = t - s
    if grid is None:
        grid = make_grid(s, t, 100, 1)
    lam = potential.coupling
    b = free_propagator(q)
    if lam == 0 or max_order == 0:
        return _result([b])
    if half_width is None:
        half_width = 0.5 * abs(y - x) + 10 * sigma * np.sqrt(T)
    # the evaluation point sits on the grid; the box is centred between x and y
    start, end = (y, x) if direction == "LI" else (x, y)
    box = _SpectralBox(end, half_width, n_space, sigma)
    shift = 0.5 * (start + end) - end
    box.alpha = box.alpha + np.round(shift / box.dx) * box.dx
    _support_check(potential, x, y, T, sigma, box, [s, 0.5 * (s + t), t])
    raw = _k_series_forward(potential, start, end, s, t, sigma, grid, box, max_order, n_hermite, direction == "LI")
    terms = [b]
    for i, r in enumerate(raw, start=1):
        terms.append((-lam) ** i * r)
        if rel_tol and abs(terms[-1]) < rel_tol * abs(b):
            break
    return _result(terms)


# ---------------------------------------------------------------------------
# L operator (bump potentials on a one-dimensional collar)
# ---------------------------------------------------------------------------


def _gauss_time_moments(a: np.ndarray, h: float, m_max: int) -> np.ndarray:
    """int_0^h D^(m - 1/2) exp(-a/D) dD for m = 0..m_max, a >= 0 (shape (m_max+1, len(a)))."""
    a = np.asarray(a, dtype=float)
    z = np.sqrt(a / h)
    e = np.exp(-a / h)
    out = np.empty((m_max + 1,) + a.shape)
    out[0] = e * 2 * np.sqrt(h) - 2 * np.sqrt(np.pi * a) * erfcx(z) * e
    for m in range(1, m_max + 1):
        out[m] = (h ** (m + 0.5) * e - a * out[m - 1]) / (m + 0.5)
    return out


def _gauss_product_weights(times: np.ndarray, s: float, dists: np.ndarray, sigma: float, n_gl: int = 8, stencil: int = 4):
    """P[j, k, r]:  int_s^{t_j} B(dists[r], t_j - u) f(u) du  ~  sum_k P[j, k, r] f(t_k), f(s) = 0.

    Cells away from the diagonal use Gauss-Legendre in sqrt(t_j - u); the
    diagonal cell uses exact moments of the Gaussian in the time gap.
    """
    N = len(times)
    R = len(dists)
    nodes = np.concatenate([[s], times])
    a = dists**2 / (2 * sigma**2)
    norm = 1.0 / np.sqrt(2 * np.pi * sigma**2)
    xg, wg = np.polynomial.legendre.leggauss(n_gl)
    P = np.zeros((N, N, R))
    for j in range(N):
        tj = times[j]
        C = np.arange(j + 1)
        first = np.clip(C + 1 - stencil // 2, 0, N + 1 - stencil)
        idx = first[:, None] + np.arange(stencil)[None, :]
        pts = nodes[idx]
        # off-diagonal cells
        off = C[:-1]
        if len(off):
            left, right = nodes[off], nodes[off + 1]
            vlo, vhi = np.sqrt(tj - right), np.sqrt(tj - left)
            half = 0.5 * (vhi - vlo)[:, None]
            v = half * (xg + 1) + vlo[:, None]
            jac = half * wg * 2 * v
            D = v**2
            u = tj - D
            kern = norm / np.sqrt(D)[:, :, None] * np.exp(-a[None, None, :] / D[:, :, None])
            kern *= jac[:, :, None]
            opts = pts[:-1]
            for k in range(stencil):
                basis = np.ones_like(u)
                for m in range(stencil):
                    if m != k:
                        basis *= (u - opts[:, m, None]) / (opts[:, k, None] - opts[:, m, None])
                wk = np.einsum("cg,cgr->cr", basis, kern)
                col = idx[:-1, k] - 1
                keep = col >= 0
                np.add.at(P[j], col[keep], wk[keep])
        # diagonal cell: exact moments, Lagrange basis written in powers of the gap
        h = tj - nodes[j]
        gaps = (tj - pts[-1]) / h
        vand = gaps[:, None] ** np.arange(stencil)[None, :]
        coef = np.linalg.inv(vand)
        mom = _gauss_time_moments(a, h, stencil - 1) * norm
        scaled = mom / (h ** np.arange(stencil))[:, None]
        wdiag = coef.T @ scaled  # (stencil, R)
        for k in range(stencil):
            col = idx[-1, k] - 1
            if col >= 0:
                P[j, col] += wdiag[k]
    return P


class CollarEngine:
    """Discrete L operator for a one-dimensional bump potential at fixed width."""

    def __init__(self, potential: PotentialSpec, grid: QuadratureGrid, sigma: float, n_collar: int = 32):
        bump = potential.bump
        dom = bump.domain
        if dom.dimension != 1:
            raise InvalidParameters("the L-series collar quadrature is one-dimensional")
        eps = bump.epsilon
        xg, wg = np.polynomial.legendre.leggauss(n_collar)
        xi = eps * (xg + 1)
        wxi = eps * wg
        walls = dom.boundary_arrays(1, grid.s)
        pos, wts, coll, depth = [], [], [], []
        for ci, (p, n) in enumerate(zip(walls.positions[:, 0], walls.normals[:, 0])):
            pos.append(p - n * xi)
            wts.append(wxi)
            coll.append(np.full(n_collar, ci))
            depth.append(xi)
        self.alpha = np.concatenate(pos)
        self.omega = np.concatenate(wts)
        self.collar = np.concatenate(coll)
        self.depth = np.concatenate(depth)
        self.V = potential(self.alpha)
        self.sigma = sigma
        self.grid = grid
        self.eps = eps
        tau = grid.time_nodes
        M = len(self.alpha)
        dist = np.abs(self.alpha[:, None] - self.alpha[None, :])
        uniq, inv = np.unique(np.round(dist, 15), return_inverse=True)
        self.ridx = inv.reshape(M, M)
        self.same = self.collar[:, None] == self.collar[None, :]
        self.Preg = _gauss_product_weights(tau, grid.s, uniq, sigma)
        self.Pself = []
        s2 = sigma**2
        for a in range(M):
            lo, hi = self.depth[a], 2 * eps - self.depth[a]

            def own(D, lo=lo, hi=hi):
                w = np.sqrt(2 * s2 * D)
                return 0.5 * (erf(lo / w) + erf(hi / w))

            self.Pself.append(_product_weights(tau, grid.s, own))
        self.Pself = np.stack(self.Pself, axis=1)  # (N, M, N)

    def apply(self, F: np.ndarray, backward: bool = False) -> np.ndarray:
        """F has shape (n_time, M, Q)."""
        N, M, Q = F.shape
        if backward:
            F = F[::-1]
        VF = self.V[None, :, None] * F
        wVF = self.omega[None, :, None] * VF
        out = np.zeros_like(F)
        omega_same = self.omega[None, :] * self.same
        for j in range(N):
            K = self.Preg[j][:, self.ridx]  # (N, M, M)
            out[j] = np.tensordot(K, wVF, axes=([0, 2], [0, 1]))
            rs = np.einsum("kab,ab->ka", K, omega_same)
            out[j] -= np.einsum("ka,kaq->aq", rs, VF)
            out[j] += np.einsum("ak,kaq->aq", self.Pself[j], VF)
        return out[::-1] if backward else out

    def terms(self, x: float, y: float, max_order: int, direction: str = "FI") -> list[float]:
        """Unsigned  (L*)^i B  (FI) or  B (*L)^i  (LI) at (y, t | x, s)."""
        g = self.grid
        tau = g.time_nodes
        sig = self.sigma
        backward = direction == "LI"
        al = self.alpha[None, :, None]
        after = (g.t - tau)[:, None]
        before = (tau - g.s)[:, None]
        if backward:
            F = heat_kernel(np.array([y]), al, after, sig, 1)
            E = heat_kernel(al, np.array([x]), before, sig, 1)
        else:
            F = heat_kernel(al, np.array([x]), before, sig, 1)
            E = heat_kernel(np.array([y]), al, after, sig, 1)
        F = F.reshape(len(tau), -1, 1)
        E = E.reshape(len(tau), -1, 1) * (g.time_weights[:, None, None] * (self.omega * self.V)[None, :, None])
        out = []
        for order in range(1, max_order + 1):
            if order > 1:
                F = self.apply(F, backward)
            out.append(float(np.sum(E * F)))
        return out


def _collar_nodes(potential: PotentialSpec, s: float, n_collar: int):
    bump = potential.bump
    xg, wg = np.polynomial.legendre.leggauss(n_collar)
    depth = bump.epsilon * (xg + 1)
    walls = bump.domain.boundary_arrays(1, s)
    alpha, wall = [], []
    for ci, (p, n) in enumerate(zip(walls.positions[:, 0], walls.normals[:, 0])):
        alpha.append(p - n * depth)
        wall.append(np.full(n_collar, ci))
    k = len(wall)
    return np.concatenate(alpha), np.tile(bump.epsilon * wg, k), np.concatenate(wall), np.tile(depth, k)


class _CollarHop:
    """L operator of one bump width, read off at the collar nodes of another width.

    Target nodes that fall inside the source collar get the kink of the
    time-integrated kernel removed by subtracting the source values
    interpolated at the target, which are added back with an exact spatial mass.
    """

    def __init__(self, source: PotentialSpec, target: PotentialSpec, grid: QuadratureGrid, sigma: float, n_collar: int):
        tau = grid.time_nodes
        self.src_alpha, self.src_omega, src_wall, src_depth = _collar_nodes(source, grid.s, n_collar)
        alpha, _, wall, depth = _collar_nodes(target, grid.s, n_collar)
        self.V = source(self.src_alpha)
        width = 2 * source.bump.epsilon
        dist = np.abs(alpha[:, None] - self.src_alpha[None, :])
        uniq, inv = np.unique(np.round(dist, 15), return_inverse=True)
        self.ridx = inv.reshape(dist.shape)
        self.P = _gauss_product_weights(tau, grid.s, uniq, sigma)
        inside = (depth > 0) & (depth < width)
        self.inside = inside
        same = (wall[:, None] == src_wall[None, :]) & inside[:, None]
        self.mask = self.src_omega[None, :] * same
        # interpolation of source-collar values at target depths (same wall)
        n = n_collar
        u_src = src_depth[:n] / source.bump.epsilon - 1
        basis = np.polynomial.legendre.legvander(u_src, n - 1)
        u_tgt = np.clip(depth / source.bump.epsilon - 1, -1, 1)
        interp = np.polynomial.legendre.legvander(u_tgt, n - 1) @ np.linalg.inv(basis)
        self.interp = np.zeros((len(alpha), len(self.src_alpha)))
        for a in np.flatnonzero(inside):
            cols = np.flatnonzero(src_wall == wall[a])
            self.interp[a, cols] = interp[a]
        s2 = sigma**2
        self.Pself = np.zeros((len(tau), len(alpha), len(tau)))
        for a in np.flatnonzero(inside):
            lo, hi = depth[a], width - depth[a]

            def own(D, lo=lo, hi=hi):
                w = np.sqrt(2 * s2 * D)
                return 0.5 * (erf(lo / w) + erf(hi / w))

            self.Pself[:, a, :] = _product_weights(tau, grid.s, own)

    def apply(self, F: np.ndarray) -> np.ndarray:
        """F has shape (n_time, M_source); returns (n_time, M_target)."""
        VF = self.V[None, :] * F
        at_target = VF @ self.interp.T
        out = np.empty((F.shape[0], self.interp.shape[0]))
        for j in range(F.shape[0]):
            K = self.P[j][:, self.ridx]  # (N, M_t, M_s)
            out[j] = np.einsum("kab,kb->a", K, self.src_omega[None, :] * VF)
            out[j] -= np.einsum("kab,ab,ka->a", K, self.mask, at_target)
            out[j] += np.einsum("ak,ka->a", self.Pself[j], at_target)
        return out


def nested_l_operator_terms(
    q: PropagatorQuery, potentials: Sequence[PotentialSpec], grid: QuadratureGrid | None = None, n_collar: int = 32,
) -> list[float]:
    """Signed terms with a different bump for every factor of the operator chain.

    ``potentials[0]`` acts next to the source; term i uses the first i factors.
    Shrinking the inner widths faster than the outer ones takes the
    zero-width limits one factor at a time.
    """
    if q.dimension != 1:
        raise InvalidParameters("the L-series is implemented in one dimension")
    for p in potentials:
        if p.kind is not PotentialKind.SINGULAR_BUMP:
            raise InvalidParameters("the L operator needs bump potentials")
    grid = grid or make_grid(q.s, q.t, 120, 1)
    tau = grid.time_nodes
    sig = q.sigma
    x, y = q.x[0], q.y[0]
    out = [free_propagator(q)]
    alpha, omega, _, _ = _collar_nodes(potentials[0], grid.s, n_collar)
    F = heat_kernel(alpha[None, :, None], np.array([x]), (tau - grid.s)[:, None], sig, 1)
    for i, pot in enumerate(potentials):
        if i > 0:
            F = _CollarHop(potentials[i - 1], pot, grid, sig, n_collar).apply(F)
            alpha, omega, _, _ = _collar_nodes(pot, grid.s, n_collar)
        E = heat_kernel(np.array([y]), alpha[None, :, None], (grid.t - tau)[:, None], sig, 1)
        raw = float(np.sum(grid.time_weights[:, None] * (omega * pot(alpha))[None, :] * E * F))
        out.append((-pot.coupling) ** (i + 1) * raw)
    return out


def l_operator_terms(
    q: PropagatorQuery, potential: PotentialSpec, max_order: int, grid: QuadratureGrid | None = None,
    direction: str = "FI", n_collar: int = 32,
) -> list[float]:
    """Signed series terms (-lambda)^i (L*)^i B at the potential's own width, with the free term first."""
    if potential.kind is not PotentialKind.SINGULAR_BUMP:
        raise InvalidParameters("the L operator needs a bump potential")
    if q.dimension != 1:
        raise InvalidParameters("the L-series is implemented in one dimension")
    grid = grid or make_grid(q.s, q.t, 120, 1)
    eng = CollarEngine(potential, grid, q.sigma, n_collar)
    raw = eng.terms(q.x[0], q.y[0], max_order, direction)
    lam = potential.coupling
    return [free_propagator(q)] + [(-lam) ** i * r for i, r in enumerate(raw, start=1)]


def richardson_terms(values: np.ndarray, ratio: float = 0.5, contraction: float = 0.75, floor: float = 0.0):
    """Zero-width limit per term from values at widths eps0, eps0*ratio, eps0*ratio^2.

    Assumes error a*eps + b*eps^2; checks that successive differences shrink.
    Returns (limit, spread, bad) where spread is the largest gap between
    neighbouring widths relative to |limit|.
    """
    v = np.asarray(values, dtype=float)
    if v.shape[0] < 3:
        raise InvalidParameters("need three widths for the extrapolation")
    t0, t1, t2 = v[0], v[1], v[2]
    d1, d2 = t1 - t0, t2 - t1
    bad = np.abs(d2) > contraction * np.abs(d1) + floor
    r = 1.0 / ratio
    first = (r * t1 - t0) / (r - 1)
    second = (r * t2 - t1) / (r - 1)
    limit = (r * r * second - first) / (r * r - 1)
    spread = np.maximum(np.abs(d1), np.abs(d2)) / np.maximum(np.abs(limit), 1e-300)
    return limit, spread, bad


def l_operator_series(
    q: PropagatorQuery,
    potential: PotentialSpec,
    max_order: int = 6,
    eps_schedule: Sequence[float] | None = None,
    grid: QuadratureGrid | None = None,
    direction: str = "FI",
    n_collar: int = 32,
    stability_floor: float | None = None,
    nest_ratio: float | None = None,
) -> OperatorSeriesResult:
    """L-series with the zero-width limit taken inside every term.

    With ``nest_ratio`` each factor of the operator chain gets its own bump,
    ``nest_ratio`` times narrower than the factor after it, so the limits are
    taken factor by factor (innermost first) rather than jointly.  Only the
    forward direction is available in that mode.
    """
    if potential.kind is not PotentialKind.SINGULAR_BUMP:
        raise InvalidParameters("the L operator needs a bump potential")
    if eps_schedule is None:
        e0 = potential.bump.epsilon
        eps_schedule = [e0, e0 / 2, e0 / 4]
    eps_schedule = [float(e) for e in eps_schedule]
    if len(eps_schedule) != 3 or not (eps_schedule[0] > eps_schedule[1] > eps_schedule[2] > 0):
        raise InvalidParameters("eps_schedule must hold three strictly decreasing widths")
    ratio = eps_schedule[1] / eps_schedule[0]
    if abs(eps_schedule[2] / eps_schedule[1] - ratio) > 1e-12:
        raise InvalidParameters("eps_schedule must be geometric")
    dom = potential.bump.domain
    e0 = eps_schedule[0]
    for p in (q.x, q.y):
        xi = float(dom.signed_distance(p, q.s))
        if -e0 < xi < 3 * e0:
            raise InvalidParameters("x and y must stay away from the collar of the widest bump")
    grid = grid or make_grid(q.s, q.t, 120, 1)
    if nest_ratio is None:
        rows = [l_operator_terms(q, potential.with_epsilon(e), max_order, grid, direction, n_collar) for e in eps_schedule]
    else:
        if not nest_ratio > 1 or direction != "FI":
            raise InvalidParameters("nesting needs nest_ratio > 1 and the forward direction")
        rows = [
            nested_l_operator_terms(
                q, [potential.with_epsilon(e * nest_ratio ** -(max_order - 1 - k)) for k in range(max_order)], grid, n_collar
            )
            for e in eps_schedule
        ]
    vals = np.array(rows)
    b = vals[0, 0]
    # differences below a millionth of the largest correction are quadrature noise
    floor = 1e-6 * np.max(np.abs(vals[:, 1:])) if stability_floor is None else stability_floor
    limit, spread, bad = richardson_terms(vals[:, 1:], ratio, floor=floor)
    if np.any(bad):
        i = int(np.argmax(bad)) + 1
        raise ExtrapolationUnstable(
            f"term {i} does not settle as the width shrinks: values {vals[:, i].tolist()}"
        )
    terms = [float(b)] + [float(v) for v in limit]
    return _result(
        terms,
        epsilon_used=[list(eps_schedule)] * len(terms),
        raw={e: list(map(float, r)) for e, r in zip(eps_schedule, rows)},
        spread=[0.0] + [float(v) for v in spread],
    )
