"""Static and moving domains with boundary quadrature and a graded time grid."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Mapping

import numpy as np

from .errors import InvalidParameters

__all__ = [
    "DomainKind",
    "Convexity",
    "BoundaryNode",
    "BoundaryArrays",
    "Domain",
    "QuadratureGrid",
    "make_domain",
    "boundary_quadrature",
    "make_grid",
]


class DomainKind(str, Enum):
    HALF_LINE = "HalfLine"
    INTERVAL = "Interval"
    DISK = "Disk"
    BALL = "Ball"
    POLYGON = "Polygon"
    EXTERIOR_DISK = "ExteriorDisk"
    MOVING_HALF_LINE = "MovingHalfLine"


class Convexity(str, Enum):
    CONVEX = "Convex"
    CONCAVE = "Concave"
    MIXED = "Mixed"


_DIMENSION = {
    DomainKind.HALF_LINE: 1,
    DomainKind.INTERVAL: 1,
    DomainKind.MOVING_HALF_LINE: 1,
    DomainKind.DISK: 2,
    DomainKind.EXTERIOR_DISK: 2,
    DomainKind.POLYGON: 2,
    DomainKind.BALL: 3,
}


@dataclass(frozen=True)
class BoundaryNode:
    position: np.ndarray
    outward_normal: np.ndarray
    weight: float
    velocity: np.ndarray
    kappa: float = 0.0


@dataclass(frozen=True)
class BoundaryArrays:
    """Vectorised boundary quadrature.

    ``patch`` groups nodes that lie on one smooth piece (a circle, a polygon
    edge, an endpoint); ``patch_lo``/``patch_hi`` give the arclength from each
    node to the ends of a straight patch and are used for the local
    self-interaction integrals.
    """

    positions: np.ndarray
    normals: np.ndarray
    weights: np.ndarray
    velocities: np.ndarray
    kappa: np.ndarray
    patch: np.ndarray
    patch_lo: np.ndarray
    patch_hi: np.ndarray

    def __len__(self) -> int:
        return len(self.weights)

    def nodes(self) -> list[BoundaryNode]:
        return [
            BoundaryNode(
                position=self.positions[i].copy(),
                outward_normal=self.normals[i].copy(),
                weight=float(self.weights[i]),
                velocity=self.velocities[i].copy(),
                kappa=float(self.kappa[i]),
            )
            for i in range(len(self))
        ]


def _as_points(x, dim: int) -> tuple[np.ndarray, tuple]:
    """Return (N, dim) points and the leading shape used to restore results."""
    a = np.asarray(x, dtype=float)
    if dim == 1 and (a.ndim == 0 or a.shape[-1] != 1):
        return a.reshape(-1, 1), a.shape
    if a.shape[-1] != dim:
        raise InvalidParameters(f"points must have last axis {dim}, got shape {a.shape}")
    return a.reshape(-1, dim), a.shape[:-1]


def _segment_intersect(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        return np.sign((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))

    o1, o2 = orient(p1, p2, q1), orient(p1, p2, q2)
    o3, o4 = orient(q1, q2, p1), orient(q1, q2, p2)
    return o1 * o2 < 0 and o3 * o4 < 0


@dataclass(frozen=True)
class Domain:
    kind: DomainKind
    dimension: int
    params: Mapping[str, object]
    convexity: Convexity
    kappa: float | Callable[[np.ndarray], float] = 0.0
    moving: bool = field(default=False)

    # ---- geometry ---------------------------------------------------------

    def boundary_offset(self, time: float) -> float:
        """Boundary location of a moving half-line at ``time``."""
        p = self.params
        return float(p["offset"]) + float(p["velocity"]) * (time - float(p["start_time"]))

    def signed_distance(self, x, time: float = 0.0):
        """Distance to the boundary, positive inside the domain."""
        pts, shape = _as_points(x, self.dimension)
        p = self.params
        k = self.kind
        if k is DomainKind.HALF_LINE:
            d = p["direction"] * (pts[:, 0] - p["origin"])
        elif k is DomainKind.MOVING_HALF_LINE:
            d = p["direction"] * (pts[:, 0] - self.boundary_offset(time))
        elif k is DomainKind.INTERVAL:
            d = np.minimum(pts[:, 0] - p["lower"], p["upper"] - pts[:, 0])
        elif k in (DomainKind.DISK, DomainKind.BALL):
            d = p["radius"] - np.linalg.norm(pts - p["center"], axis=1)
        elif k is DomainKind.EXTERIOR_DISK:
            d = np.linalg.norm(pts - p["center"], axis=1) - p["radius"]
        else:
            d = self._polygon_signed_distance(pts)
        return d.reshape(shape) if shape else float(d[0])

    def indicator(self, x, time: float = 0.0):
        d = np.asarray(self.signed_distance(x, time))
        out = (d > 0).astype(float)
        return out if out.ndim else float(out)

    def contains(self, x, time: float = 0.0) -> bool:
        return bool(np.all(np.asarray(self.signed_distance(x, time)) > 0))

    def nearest_boundary(self, x, time: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
        """Nearest boundary point and its outward normal, for (N, d) points."""
        pts, _ = _as_points(x, self.dimension)
        p = self.params
        k = self.kind
        if k in (DomainKind.HALF_LINE, DomainKind.MOVING_HALF_LINE):
            b = p["origin"] if k is DomainKind.HALF_LINE else self.boundary_offset(time)
            foot = np.full_like(pts, b)
            normal = np.full_like(pts, -p["direction"])
        elif k is DomainKind.INTERVAL:
            lower = pts[:, 0] - p["lower"] < p["upper"] - pts[:, 0]
            foot = np.where(lower, p["lower"], p["upper"])[:, None]
            normal = np.where(lower, -1.0, 1.0)[:, None]
        elif k in (DomainKind.DISK, DomainKind.BALL, DomainKind.EXTERIOR_DISK):
            rel = pts - p["center"]
            r = np.linalg.norm(rel, axis=1, keepdims=True)
            unit = rel / np.where(r > 0, r, 1.0)
            unit[r[:, 0] == 0] = np.eye(self.dimension)[0]
            foot = p["center"] + p["radius"] * unit
            normal = unit if k is not DomainKind.EXTERIOR_DISK else -unit
        else:
            foot, normal = self._polygon_nearest(pts)
        return foot, normal

    def reach(self) -> float:
        """Largest collar width that stays a tubular neighbourhood."""
        p = self.params
        k = self.kind
        if k in (DomainKind.HALF_LINE, DomainKind.MOVING_HALF_LINE):
            return np.inf
        if k is DomainKind.INTERVAL:
            return 0.5 * (p["upper"] - p["lower"])
        if k in (DomainKind.DISK, DomainKind.BALL, DomainKind.EXTERIOR_DISK):
            return float(p["radius"])
        return 0.0  # polygon corners

    def kappa_at(self, positions: np.ndarray) -> np.ndarray:
        if callable(self.kappa):
            vals = np.array([float(self.kappa(q)) for q in positions])
        else:
            vals = np.full(len(positions), float(self.kappa))
        if np.any(vals < 0):
            raise InvalidParameters("elasticity must be non-negative")
        return vals

    # ---- boundary quadrature ---------------------------------------------

    def boundary_arrays(self, n_nodes: int, time: float = 0.0) -> BoundaryArrays:
        if n_nodes < 1:
            raise InvalidParameters("n_nodes must be >= 1")
        p = self.params
        k = self.kind
        d = self.dimension
        if k in (DomainKind.HALF_LINE, DomainKind.MOVING_HALF_LINE):
            b = p["origin"] if k is DomainKind.HALF_LINE else self.boundary_offset(time)
            pos = np.array([[b]], dtype=float)
            nrm = np.array([[-p["direction"]]], dtype=float)
            w = np.ones(1)
            vel = np.zeros((1, 1))
            if k is DomainKind.MOVING_HALF_LINE:
                vel[0, 0] = p["velocity"]
            patch = np.zeros(1, dtype=int)
            lo = hi = np.zeros(1)
        elif k is DomainKind.INTERVAL:
            pos = np.array([[p["lower"]], [p["upper"]]], dtype=float)
            nrm = np.array([[-1.0], [1.0]])
            w = np.ones(2)
            vel = np.zeros((2, 1))
            patch = np.arange(2)
            lo = hi = np.zeros(2)
        elif k in (DomainKind.DISK, DomainKind.EXTERIOR_DISK):
            phi = 2 * np.pi * np.arange(n_nodes) / n_nodes
            unit = np.column_stack([np.cos(phi), np.sin(phi)])
            pos = p["center"] + p["radius"] * unit
            nrm = unit if k is DomainKind.DISK else -unit
            w = np.full(n_nodes, 2 * np.pi * p["radius"] / n_nodes)
            vel = np.zeros_like(pos)
            patch = np.zeros(n_nodes, dtype=int)
            lo = hi = np.full(n_nodes, np.pi * p["radius"])
        elif k is DomainKind.BALL:
            pos, nrm, w = _sphere_nodes(n_nodes, p["center"], p["radius"])
            vel = np.zeros_like(pos)
            patch = np.zeros(len(w), dtype=int)
            lo = hi = np.zeros(len(w))
        else:
            pos, nrm, w, patch, lo, hi = self._polygon_nodes(n_nodes)
            vel = np.zeros_like(pos)
        return BoundaryArrays(
            positions=pos.reshape(-1, d),
            normals=nrm.reshape(-1, d),
            weights=w,
            velocities=vel.reshape(-1, d),
            kappa=self.kappa_at(pos.reshape(-1, d)),
            patch=patch,
            patch_lo=np.asarray(lo, dtype=float),
            patch_hi=np.asarray(hi, dtype=float),
        )

    # ---- polygon helpers --------------------------------------------------

    def _edges(self) -> tuple[np.ndarray, np.ndarray]:
        v = np.asarray(self.params["vertices"], dtype=float)
        return v, np.roll(v, -1, axis=0)

    def _polygon_nearest(self, pts: np.ndarray):
        a, b = self._edges()
        ab = b - a
        t = np.einsum("nek,ek->ne", pts[:, None, :] - a[None], ab) / np.sum(ab**2, axis=1)
        t = np.clip(t, 0.0, 1.0)
        proj = a[None] + t[..., None] * ab[None]
        dist = np.linalg.norm(pts[:, None, :] - proj, axis=2)
        idx = np.argmin(dist, axis=1)
        foot = proj[np.arange(len(pts)), idx]
        tangent = ab[idx] / np.linalg.norm(ab[idx], axis=1, keepdims=True)
        normal = np.column_stack([tangent[:, 1], -tangent[:, 0]])
        return foot, normal

    def _polygon_signed_distance(self, pts: np.ndarray) -> np.ndarray:
        a, b = self._edges()
        foot, _ = self._polygon_nearest(pts)
        dist = np.linalg.norm(pts - foot, axis=1)
        # even-odd crossing test
        inside = np.zeros(len(pts), dtype=bool)
        for (x1, y1), (x2, y2) in zip(a, b):
            cond = (y1 > pts[:, 1]) != (y2 > pts[:, 1])
            with np.errstate(divide="ignore", invalid="ignore"):
                xc = x1 + (pts[:, 1] - y1) * (x2 - x1) / (y2 - y1)
            inside ^= cond & (pts[:, 0] < xc)
        return np.where(inside, dist, -dist)

    def _polygon_nodes(self, n_nodes: int):
        a, b = self._edges()
        lengths = np.linalg.norm(b - a, axis=1)
        counts = np.maximum(1, np.round(n_nodes * lengths / lengths.sum()).astype(int))
        pos, nrm, w, patch, lo, hi = [], [], [], [], [], []
        for e, (pa, pb, length, m) in enumerate(zip(a, b, lengths, counts)):
            frac = (np.arange(m) + 0.5) / m
            tangent = (pb - pa) / length
            pos.append(pa + frac[:, None] * (pb - pa))
            nrm.append(np.tile([tangent[1], -tangent[0]], (m, 1)))
            w.append(np.full(m, length / m))
            patch.append(np.full(m, e))
            lo.append(frac * length)
            hi.append((1 - frac) * length)
        return (
            np.vstack(pos),
            np.vstack(nrm),
            np.concatenate(w),
            np.concatenate(patch),
            np.concatenate(lo),
            np.concatenate(hi),
        )


def _sphere_nodes(n_nodes: int, center, radius: float):
    """Gauss-Legendre in cos(polar angle) times a uniform azimuthal rule."""
    n_theta = max(1, int(round(np.sqrt(n_nodes))))
    n_phi = max(1, n_nodes // n_theta)
    ct, wt = np.polynomial.legendre.leggauss(n_theta)
    phi = 2 * np.pi * (np.arange(n_phi) + 0.5) / n_phi
    C, P = np.meshgrid(ct, phi, indexing="ij")
    S = np.sqrt(1 - C**2)
    unit = np.column_stack([(S * np.cos(P)).ravel(), (S * np.sin(P)).ravel(), C.ravel()])
    w = (wt[:, None] * np.full(n_phi, 2 * np.pi / n_phi)[None]).ravel() * radius**2
    return np.asarray(center) + radius * unit, unit, w


def _polygon_convexity(vertices: np.ndarray) -> Convexity:
    e = np.roll(vertices, -1, axis=0) - vertices
    cross = e[:, 0] * np.roll(e, -1, axis=0)[:, 1] - e[:, 1] * np.roll(e, -1, axis=0)[:, 0]
    return Convexity.CONVEX if np.all(cross > 0) else Convexity.MIXED


def make_domain(kind, parameters: Mapping | None = None, kappa=0.0, **extra) -> Domain:
    """Build a validated :class:`Domain`.

    Parameters by kind (defaults in brackets):
    HalfLine origin [0], direction [+1 means the domain is x > origin];
    Interval lower, upper; Disk/Ball/ExteriorDisk center, radius;
    Polygon vertices; MovingHalfLine offset, velocity, start_time [0], direction [+1].
    """
    kind = DomainKind(kind)
    p = dict(parameters or {})
    p.update(extra)
    dim = _DIMENSION[kind]
    if kind is DomainKind.HALF_LINE:
        p.setdefault("origin", 0.0)
        p.setdefault("direction", 1.0)
        convexity = Convexity.CONVEX
    elif kind is DomainKind.MOVING_HALF_LINE:
        p.setdefault("offset", 0.0)
        p.setdefault("velocity", 0.0)
        p.setdefault("start_time", 0.0)
        p.setdefault("direction", 1.0)
        if not np.isfinite(float(p["velocity"])):
            raise InvalidParameters("boundary velocity must be finite")
        convexity = Convexity.CONVEX
    elif kind is DomainKind.INTERVAL:
        if "lower" not in p or "upper" not in p or not float(p["lower"]) < float(p["upper"]):
            raise InvalidParameters("interval needs lower < upper")
        convexity = Convexity.CONVEX
    elif kind in (DomainKind.DISK, DomainKind.BALL, DomainKind.EXTERIOR_DISK):
        p.setdefault("center", [0.0] * dim)
        p["center"] = np.asarray(p["center"], dtype=float)
        if p["center"].shape != (dim,):
            raise InvalidParameters(f"center must have {dim} coordinates")
        if float(p.get("radius", 0.0)) <= 0:
            raise InvalidParameters("radius must be positive")
        convexity = Convexity.CONCAVE if kind is DomainKind.EXTERIOR_DISK else Convexity.CONVEX
    else:
        v = np.asarray(p.get("vertices", []), dtype=float)
        if v.ndim != 2 or v.shape[1] != 2 or len(v) < 3:
            raise InvalidParameters("polygon needs at least three 2D vertices")
        area2 = np.sum(v[:, 0] * np.roll(v[:, 1], -1) - np.roll(v[:, 0], -1) * v[:, 1])
        if abs(area2) < 1e-14:
            raise InvalidParameters("degenerate polygon")
        if area2 < 0:
            v = v[::-1].copy()
        n = len(v)
        for i in range(n):
            for j in range(i + 1, n):
                if j == i + 1 or (i == 0 and j == n - 1):
                    continue
                if _segment_intersect(v[i], v[(i + 1) % n], v[j], v[(j + 1) % n]):
                    raise InvalidParameters("polygon edges intersect")
        p["vertices"] = v
        convexity = _polygon_convexity(v)
    for key in ("origin", "direction", "offset", "velocity", "start_time", "lower", "upper", "radius"):
        if key in p:
            p[key] = float(p[key])
    if kind in (DomainKind.HALF_LINE, DomainKind.MOVING_HALF_LINE) and p["direction"] not in (1.0, -1.0):
        raise InvalidParameters("direction must be +1 or -1")
    return Domain(
        kind=kind,
        dimension=dim,
        params=p,
        convexity=convexity,
        kappa=kappa,
        moving=kind is DomainKind.MOVING_HALF_LINE,
    )


def boundary_quadrature(domain: Domain, n_nodes: int, time: float = 0.0) -> list[BoundaryNode]:
    return domain.boundary_arrays(n_nodes, time).nodes()


@dataclass(frozen=True)
class QuadratureGrid:
    """Graded time nodes in (s, t) with trapezoid weights in the grading variable.

    The map u -> u^p / (u^p + (1-u)^p) is symmetric under u -> 1-u, so the
    grid is invariant under time reversal about the midpoint.
    """

    s: float
    t: float
    time_nodes: np.ndarray
    time_weights: np.ndarray
    n_boundary: int
    grading_exponent: float

    @property
    def n_time(self) -> int:
        return len(self.time_nodes)

    def halved(self) -> "QuadratureGrid":
        return make_grid(self.s, self.t, (self.n_time + 1) // 2, self.n_boundary, self.grading_exponent)


def make_grid(s: float, t: float, n_time: int = 200, n_boundary: int = 64, grading: float = 2.0) -> QuadratureGrid:
    """``n_time`` interior nodes on (s, t) clustered toward both ends."""
    if not t > s:
        raise InvalidParameters("grid needs t > s")
    if n_time < 2 or grading <= 0:
        raise InvalidParameters("need n_time >= 2 and grading > 0")
    n = n_time + 1
    u = np.arange(1, n) / n
    a, b = u**grading, (1 - u) ** grading
    g = a / (a + b)
    dg = grading * (u * (1 - u)) ** (grading - 1) / (a + b) ** 2
    span = t - s
    return QuadratureGrid(
        s=float(s),
        t=float(t),
        time_nodes=s + span * g,
        time_weights=span * dg / n,
        n_boundary=int(n_boundary),
        grading_exponent=float(grading),
    )
