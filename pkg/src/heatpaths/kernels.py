"""Free-space heat kernel, its boundary normal derivatives and the free Green function.

Normal derivatives are the sigma^2-scaled *inward* ones, written with the
outward unit normal n:  d_beta f = -sigma^2 n . grad_beta f.  Applied to the
Gaussian this gives n.(beta - x)/(theta - s) times the kernel itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gamma

from .errors import CoincidentPoints, DimensionTooLow, InvalidParameters, NonpositiveTimeInterval
from .geometry import BoundaryNode

__all__ = [
    "ModelParams",
    "PropagatorQuery",
    "heat_kernel",
    "free_propagator",
    "normal_kernel",
    "inward_normal_kernel",
    "inward_normal_kernel_backward",
    "boundary_boundary_kernel",
    "green_kernel",
    "free_green",
]


@dataclass(frozen=True)
class ModelParams:
    sigma: float = 1.0
    dimension: int = 1

    def __post_init__(self):
        if not self.sigma > 0:
            raise InvalidParameters("sigma must be positive")
        if self.dimension not in (1, 2, 3):
            raise InvalidParameters("dimension must be 1, 2 or 3")


@dataclass(frozen=True)
class PropagatorQuery:
    """Evaluation request for a density at (y, t) started from (x, s)."""

    x: np.ndarray
    s: float
    y: np.ndarray
    t: float
    params: ModelParams = ModelParams()

    def __post_init__(self):
        d = self.params.dimension
        object.__setattr__(self, "s", float(self.s))
        object.__setattr__(self, "t", float(self.t))
        object.__setattr__(self, "x", np.atleast_1d(np.asarray(self.x, dtype=float)))
        object.__setattr__(self, "y", np.atleast_1d(np.asarray(self.y, dtype=float)))
        if self.x.shape != (d,) or self.y.shape != (d,):
            raise InvalidParameters(f"x and y must have {d} coordinates")

    @property
    def sigma(self) -> float:
        return self.params.sigma

    @property
    def dimension(self) -> int:
        return self.params.dimension

    @property
    def elapsed(self) -> float:
        return self.t - self.s

    def swapped(self) -> "PropagatorQuery":
        return PropagatorQuery(self.y, self.s, self.x, self.t, self.params)


def heat_kernel(y, x, dt, sigma: float, dim: int):
    """Broadcasting Gaussian density; ``y`` and ``x`` carry a trailing axis of length ``dim``."""
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    dt = np.asarray(dt, dtype=float)
    r2 = np.sum((y - x) ** 2, axis=-1)
    var = sigma**2 * dt
    return (2 * np.pi * var) ** (-dim / 2) * np.exp(-r2 / (2 * var))


def free_propagator(q: PropagatorQuery) -> float:
    if not q.t > q.s:
        raise NonpositiveTimeInterval(f"t={q.t} must exceed s={q.s}")
    return float(heat_kernel(q.y, q.x, q.elapsed, q.sigma, q.dimension))


def normal_kernel(at, normal, other, dt, sigma: float, dim: int):
    """Inward derivative taken at ``at`` of the heat kernel linking ``at`` and ``other``.

    Equals n.(at - other)/dt times the Gaussian; the same expression serves
    the forward derivative (``at`` is the later point) and the backward one
    (``at`` is the earlier point).
    """
    at = np.asarray(at, dtype=float)
    other = np.asarray(other, dtype=float)
    proj = np.sum(np.asarray(normal) * (at - other), axis=-1)
    return proj / dt * heat_kernel(at, other, dt, sigma, dim)


def inward_normal_kernel(node: BoundaryNode, theta: float, x, s: float, params: ModelParams) -> float:
    """Forward derivative at the boundary node of B(beta, theta | x, s)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if not theta > s:
        if np.allclose(node.position, x):
            raise CoincidentPoints("node coincides with the source at equal times")
        raise NonpositiveTimeInterval("theta must exceed s")
    return float(normal_kernel(node.position, node.outward_normal, x, theta - s, params.sigma, params.dimension))


def inward_normal_kernel_backward(node: BoundaryNode, theta: float, y, t: float, params: ModelParams) -> float:
    """Backward derivative at the boundary node of B(y, t | beta, theta)."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if not t > theta:
        if np.allclose(node.position, y):
            raise CoincidentPoints("node coincides with the target at equal times")
        raise NonpositiveTimeInterval("t must exceed theta")
    return float(normal_kernel(node.position, node.outward_normal, y, t - theta, params.sigma, params.dimension))


def boundary_boundary_kernel(
    node_a: BoundaryNode, theta_a: float, node_b: BoundaryNode, theta_b: float, params: ModelParams
) -> float:
    """Derivative at node_a of B(beta_a, theta_a | beta_b, theta_b); zero at coincident nodes."""
    if not theta_a > theta_b:
        raise NonpositiveTimeInterval("theta_a must exceed theta_b")
    if np.array_equal(node_a.position, node_b.position):
        return 0.0
    return float(
        normal_kernel(node_a.position, node_a.outward_normal, node_b.position, theta_a - theta_b, params.sigma, params.dimension)
    )


def green_kernel(y, x, sigma: float, dim: int):
    """Time-integrated free kernel for dim >= 3 (broadcasting)."""
    if dim < 3:
        raise DimensionTooLow("the free Green function diverges for d < 3")
    r = np.linalg.norm(np.asarray(y, dtype=float) - np.asarray(x, dtype=float), axis=-1)
    return gamma(dim / 2 - 1) / (2 * np.pi ** (dim / 2) * sigma**2) * r ** (2.0 - dim)


def free_green(y, x, params: ModelParams) -> float:
    if params.dimension < 3:
        raise DimensionTooLow("the free Green function diverges for d < 3")
    y = np.atleast_1d(np.asarray(y, dtype=float))
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if np.array_equal(x, y):
        raise CoincidentPoints("y equals x")
    return float(green_kernel(y, x, params.sigma, params.dimension))
