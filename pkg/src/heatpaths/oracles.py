"""Closed-form and quadrature reference solutions used as ground truth."""

from __future__ import annotations

from enum import Enum
from typing import Mapping

import numpy as np
from scipy import integrate
from scipy.special import erf, erfc, erfcx

from .errors import InvalidParameters, OutOfValidityRegion
from .kernels import PropagatorQuery, free_propagator

__all__ = [
    "OracleKind",
    "oracle_eval",
    "half_space_absorbed",
    "half_space_reflected",
    "interval_absorbed_images",
    "interval_absorbed_eigen",
    "elastic_half_line",
    "moving_line_absorbed",
    "moving_line_reflected",
    "ball_green_kelvin",
    "half_line_survival",
]


class OracleKind(str, Enum):
    HALF_SPACE_ABSORBED = "HalfSpaceAbsorbed"
    HALF_SPACE_REFLECTED = "HalfSpaceReflected"
    INTERVAL_ABSORBED_IMAGES = "IntervalAbsorbedImages"
    ELASTIC_HALF_LINE = "ElasticHalfLine"
    DELTA_POTENTIAL_1D = "DeltaPotential1D"
    MOVING_LINE_ABSORBED = "MovingLineAbsorbed"
    MOVING_LINE_REFLECTED = "MovingLineReflected"
    BALL_GREEN_KELVIN = "BallGreenKelvin"
    HALF_LINE_SURVIVAL = "HalfLineSurvival"


def _gauss1(z, var):
    return np.exp(-(z**2) / (2 * var)) / np.sqrt(2 * np.pi * var)


def _half_line_local(q: PropagatorQuery, origin: float, direction: float) -> tuple[float, float]:
    if q.dimension != 1:
        raise OutOfValidityRegion("half-line oracles are one-dimensional")
    zx = direction * (q.x[0] - origin)
    zy = direction * (q.y[0] - origin)
    if zx <= 0 or zy <= 0:
        raise OutOfValidityRegion("x and y must lie inside the half-line")
    return zx, zy


def half_space_absorbed(q: PropagatorQuery, origin: float = 0.0, direction: float = 1.0) -> float:
    zx, zy = _half_line_local(q, origin, direction)
    var = q.sigma**2 * q.elapsed
    return float(_gauss1(zy - zx, var) - _gauss1(zy + zx, var))


def half_space_reflected(q: PropagatorQuery, origin: float = 0.0, direction: float = 1.0) -> float:
    zx, zy = _half_line_local(q, origin, direction)
    var = q.sigma**2 * q.elapsed
    return float(_gauss1(zy - zx, var) + _gauss1(zy + zx, var))


def _interval_local(q: PropagatorQuery, lower: float, upper: float) -> tuple[float, float, float]:
    if q.dimension != 1 or not upper > lower:
        raise OutOfValidityRegion("interval oracle needs d=1 and lower < upper")
    x0, y0 = q.x[0] - lower, q.y[0] - lower
    length = upper - lower
    if not (0 < x0 < length and 0 < y0 < length):
        raise OutOfValidityRegion("x and y must lie inside the interval")
    return x0, y0, length


def interval_absorbed_images(q: PropagatorQuery, lower: float = 0.0, upper: float = 1.0) -> float:
    """Alternating image sum over reflections in both endpoints, tail below 1e-12."""
    x0, y0, length = _interval_local(q, lower, upper)
    var = q.sigma**2 * q.elapsed
    reach = np.sqrt(2 * var * max(np.log(1e13 / np.sqrt(2 * np.pi * var)), 1.0))
    n_max = int(np.ceil((reach + 2 * length) / (2 * length))) + 1
    n = np.arange(-n_max, n_max + 1)
    shift = 2 * n * length
    total = _gauss1(y0 - (x0 + shift), var) - _gauss1(y0 - (shift - x0), var)
    return float(np.sum(total))


def interval_absorbed_eigen(q: PropagatorQuery, lower: float = 0.0, upper: float = 1.0) -> float:
    """Sine-series solution, an independent route to the interval density."""
    x0, y0, length = _interval_local(q, lower, upper)
    rate = np.pi**2 * q.sigma**2 * q.elapsed / (2 * length**2)
    n_max = int(np.ceil(np.sqrt(45.0 / rate))) + 1
    n = np.arange(1, n_max + 1)
    k = n * np.pi / length
    return float(np.sum(2 / length * np.sin(k * x0) * np.sin(k * y0) * np.exp(-rate * n**2)))


def elastic_half_line(q: PropagatorQuery, kappa: float, origin: float = 0.0, direction: float = 1.0) -> float:
    """Robin half-line density, boundary condition dE/dz = kappa E at the wall."""
    if kappa < 0:
        raise OutOfValidityRegion("kappa must be non-negative")
    zx, zy = _half_line_local(q, origin, direction)
    var = q.sigma**2 * q.elapsed
    base = _gauss1(zy - zx, var) + _gauss1(zy + zx, var)
    if kappa == 0:
        return float(base)
    # substitute u = kappa * alpha so the weight is exp(-u) for every kappa
    val, _ = integrate.quad(lambda u: np.exp(-u) * _gauss1(zy + zx + u / kappa, var), 0, np.inf, epsabs=1e-14, epsrel=1e-12)
    return float(base - 2 * val)


def _moving_local(q: PropagatorQuery, offset: float, velocity: float, direction: float, start_time: float):
    if q.dimension != 1:
        raise OutOfValidityRegion("moving-boundary oracles are one-dimensional")
    b_s = offset + velocity * (q.s - start_time)
    b_t = offset + velocity * (q.t - start_time)
    z0 = direction * (q.x[0] - b_s)
    z1 = direction * (q.y[0] - b_t)
    if z0 <= 0 or z1 <= 0:
        raise OutOfValidityRegion("x and y must be inside the moving domain at s and t")
    return z0, z1


def moving_line_absorbed(
    q: PropagatorQuery, offset: float, velocity: float, direction: float = 1.0, start_time: float = 0.0
) -> float:
    """Free density times the bridge non-crossing probability of the moving wall.

    In the frame of the wall the path is a Brownian bridge from z0 to z1,
    which avoids zero with probability 1 - exp(-2 z0 z1 / (sigma^2 T)).
    """
    z0, z1 = _moving_local(q, offset, velocity, direction, start_time)
    T = q.elapsed
    b = free_propagator(q)
    return float(b * -np.expm1(-2 * z0 * z1 / (q.sigma**2 * T)))


def moving_line_reflected(
    q: PropagatorQuery, offset: float, velocity: float, direction: float = 1.0, start_time: float = 0.0
) -> float:
    """Reflected density for a wall moving at constant speed.

    In the wall frame the motion is reflected Brownian motion with drift
    mu = -direction * velocity, whose transition density is known in closed form.
    """
    z0, z1 = _moving_local(q, offset, velocity, direction, start_time)
    T = q.elapsed
    s2 = q.sigma**2
    mu = -direction * velocity
    var = s2 * T
    far = z1 + z0 + mu * T
    lift = 2 * mu * z1 / s2
    w = far / np.sqrt(2 * var)
    image = np.exp(lift - w**2) / np.sqrt(2 * np.pi * var)
    # exp(lift) * erfc(w) / 2 without overflow
    tail = 0.5 * erfcx(w) * np.exp(lift - w**2) if w > 0 else 0.5 * erfc(w) * np.exp(lift)
    return float(_gauss1(z1 - z0 - mu * T, var) + image - 2 * mu / s2 * tail)


def ball_green_kelvin(y, x, radius: float = 1.0, center=(0.0, 0.0, 0.0), sigma: float = 1.0) -> float:
    """Dirichlet Green function of a ball in three dimensions via the Kelvin image."""
    c = np.asarray(center, dtype=float)
    xr = np.asarray(x, dtype=float) - c
    yr = np.asarray(y, dtype=float) - c
    rx, ry = np.linalg.norm(xr), np.linalg.norm(yr)
    if rx >= radius or ry >= radius:
        raise OutOfValidityRegion("x and y must lie inside the ball")
    if np.array_equal(xr, yr):
        raise OutOfValidityRegion("x and y coincide")
    direct = 1.0 / np.linalg.norm(yr - xr)
    if rx == 0:
        image = 1.0 / radius
    else:
        image = radius / (rx * np.linalg.norm(yr - (radius**2 / rx**2) * xr))
    return float((direct - image) / (2 * np.pi * sigma**2))


def half_line_survival(x: float, elapsed: float, sigma: float = 1.0, origin: float = 0.0, direction: float = 1.0) -> float:
    z = direction * (x - origin)
    if z <= 0 or elapsed <= 0:
        raise OutOfValidityRegion("start must be inside and elapsed time positive")
    return float(erf(z / np.sqrt(2 * sigma**2 * elapsed)))


def oracle_eval(kind, q: PropagatorQuery | None = None, extra: Mapping | None = None) -> float:
    """Dispatch by :class:`OracleKind`; ``extra`` carries shape and model parameters."""
    kind = OracleKind(kind)
    e = dict(extra or {})
    if kind is OracleKind.HALF_LINE_SURVIVAL:
        return half_line_survival(
            float(np.atleast_1d(q.x)[0]), q.elapsed, q.sigma, e.get("origin", 0.0), e.get("direction", 1.0)
        )
    if kind is OracleKind.BALL_GREEN_KELVIN:
        sigma = q.sigma if q is not None else e.get("sigma", 1.0)
        y = e.get("y", q.y if q is not None else None)
        x = e.get("x", q.x if q is not None else None)
        return ball_green_kelvin(y, x, e.get("radius", 1.0), e.get("center", (0.0, 0.0, 0.0)), sigma)
    if q is None:
        raise InvalidParameters("this oracle needs a propagator query")
    if kind is OracleKind.HALF_SPACE_ABSORBED:
        return half_space_absorbed(q, e.get("origin", 0.0), e.get("direction", 1.0))
    if kind is OracleKind.HALF_SPACE_REFLECTED:
        return half_space_reflected(q, e.get("origin", 0.0), e.get("direction", 1.0))
    if kind is OracleKind.INTERVAL_ABSORBED_IMAGES:
        return interval_absorbed_images(q, e.get("lower", 0.0), e.get("upper", 1.0))
    if kind is OracleKind.ELASTIC_HALF_LINE:
        return elastic_half_line(q, e["kappa"], e.get("origin", 0.0), e.get("direction", 1.0))
    if kind is OracleKind.DELTA_POTENTIAL_1D:
        from .schrodinger import delta_exact

        return delta_exact(q, e["coupling"])
    moving = (e.get("offset", 0.0), e.get("velocity", 0.0), e.get("direction", 1.0), e.get("start_time", 0.0))
    if kind is OracleKind.MOVING_LINE_ABSORBED:
        return moving_line_absorbed(q, *moving)
    return moving_line_reflected(q, *moving)

