"""Planar geometry: oriented boxes, polygons, trajectories and grid projection.

Coordinates are meters in the ego frame (x forward, y left). Headings are
radians normalized to (-pi, pi].
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import kernels

DT = 0.5


class GeometryError(ValueError):
    """Raised for non-finite or degenerate geometric input."""


class Point2(NamedTuple):
    x: float
    y: float


def _finite(*values):
    for v in values:
        if not np.all(np.isfinite(v)):
            raise GeometryError(f"non-finite geometry input: {v!r}")


def normalize_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    wrapped = math.remainder(theta, 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


@dataclass(frozen=True)
class OrientedBox:
    center: Point2
    half_extents: tuple[float, float]
    heading: float = 0.0

    def __post_init__(self):
        _finite(self.center[0], self.center[1], self.heading, *self.half_extents)
        if self.half_extents[0] <= 0 or self.half_extents[1] <= 0:
            raise GeometryError(f"half extents must be positive, got {self.half_extents}")
        object.__setattr__(self, "center", Point2(float(self.center[0]), float(self.center[1])))
        object.__setattr__(self, "half_extents", (float(self.half_extents[0]), float(self.half_extents[1])))
        object.__setattr__(self, "heading", normalize_angle(float(self.heading)))

    def as_row(self) -> np.ndarray:
        return np.array([self.center.x, self.center.y, *self.half_extents, self.heading])

    def corners(self) -> np.ndarray:
        c, s = math.cos(self.heading), math.sin(self.heading)
        hx, hy = self.half_extents
        local = np.array([[hx, hy], [-hx, hy], [-hx, -hy], [hx, -hy]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array(self.center)

    def contains(self, p) -> bool:
        c, s = math.cos(self.heading), math.sin(self.heading)
        dx, dy = p[0] - self.center.x, p[1] - self.center.y
        return abs(c * dx + s * dy) <= self.half_extents[0] and abs(-s * dx + c * dy) <= self.half_extents[1]


def obb_overlap(a: OrientedBox, b: OrientedBox) -> bool:
    """Closed-set SAT test over the four edge normals; touching counts as overlap."""
    return bool(kernels.obb_overlap_pairs(a.as_row()[None], b.as_row()[None])[0])


def obb_separation(a: OrientedBox, b: OrientedBox) -> float:
    """Largest projected gap over the SAT axes (> 0 separated, <= 0 penetrating)."""
    return float(kernels.obb_separation_pairs(a.as_row()[None], b.as_row()[None])[0])


def signed_area(vertices: np.ndarray) -> float:
    x, y = vertices[:, 0], vertices[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _has_self_intersection(v: np.ndarray) -> bool:
    """Proper crossings between non-adjacent edges (vectorized O(n^2))."""
    n = len(v)
    p, q = v, np.roll(v, -1, axis=0)

    def orient(a, b, c):
        return (b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (b[..., 1] - a[..., 1]) * (c[..., 0] - a[..., 0])

    P1, P2 = p[:, None], q[:, None]
    Q1, Q2 = p[None], q[None]
    d1, d2 = orient(Q1, Q2, P1), orient(Q1, Q2, P2)
    d3, d4 = orient(P1, P2, Q1), orient(P1, P2, Q2)
    cross = (d1 * d2 < 0) & (d3 * d4 < 0)
    i, j = np.indices((n, n))
    adjacent = (np.abs(i - j) <= 1) | (np.abs(i - j) == n - 1)
    return bool(np.any(cross & ~adjacent))


@dataclass(frozen=True)
class Polygon2:
    vertices: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 2 or v.shape[0] < 3:
            raise GeometryError("polygon needs at least 3 (x, y) vertices")
        _finite(v)
        if signed_area(v) <= 0:
            raise GeometryError("polygon must be counter-clockwise with positive area")
        if _has_self_intersection(v):
            raise GeometryError("polygon is self-intersecting")
        v.setflags(write=False)
        object.__setattr__(self, "vertices", v)

    def __eq__(self, other):
        return isinstance(other, Polygon2) and np.array_equal(self.vertices, other.vertices)

    __hash__ = None


def point_in_polygon(p, poly: Polygon2) -> bool:
    """Ray casting; points on an edge count as inside."""
    _finite(p[0], p[1])
    return bool(kernels.points_in_polygon(np.array([[p[0], p[1]]], dtype=np.float64), poly.vertices)[0])


def points_in_polygon(points: np.ndarray, poly: Polygon2) -> np.ndarray:
    return kernels.points_in_polygon(points, poly.vertices)


@dataclass(frozen=True)
class Trajectory:
    points: np.ndarray
    dt: float = DT

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 2)
        if len(pts) < 1 or self.dt <= 0:
            raise GeometryError("trajectory needs >= 1 point and dt > 0")
        _finite(pts)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class IncrementSeq:
    deltas: np.ndarray
    dt: float = DT

    def __post_init__(self):
        d = np.array(self.deltas, dtype=np.float64).reshape(-1, 2)
        if len(d) < 1 or self.dt <= 0:
            raise GeometryError("increment sequence needs >= 1 step and dt > 0")
        _finite(d)
        object.__setattr__(self, "deltas", d)

    def __len__(self):
        return len(self.deltas)


def integrate_increments(inc: IncrementSeq, origin=(0.0, 0.0)) -> Trajectory:
    """points[j] = origin + sum of deltas[0..j], accumulated left to right."""
    pts = np.empty_like(inc.deltas)
    acc = np.array(origin, dtype=np.float64)
    for j, d in enumerate(inc.deltas):
        acc = acc + d
        pts[j] = acc
    return Trajectory(pts, inc.dt)


def differentiate(traj: Trajectory, origin=(0.0, 0.0)) -> IncrementSeq:
    """Inverse of :func:`integrate_increments`.

    Each delta is nudged by ulps when needed so that left-to-right
    accumulation reproduces the points bit for bit (always possible at
    driving-scale magnitudes).
    """
    prev = np.array(origin, dtype=np.float64)
    deltas = np.empty_like(traj.points)
    for j, p in enumerate(traj.points):
        for axis in range(2):
            d = p[axis] - prev[axis]
            for _ in range(4):
                s = prev[axis] + d
                if s == p[axis]:
                    break
                d = np.nextafter(d, np.inf if s < p[axis] else -np.inf)
            deltas[j, axis] = d
        prev = prev + deltas[j]
    return IncrementSeq(deltas, traj.dt)


@dataclass(frozen=True)
class GridSpec:
    origin: Point2
    cell_size: float
    width: int
    height: int

    def __post_init__(self):
        _finite(self.origin[0], self.origin[1], self.cell_size)
        if self.cell_size <= 0 or self.width < 1 or self.height < 1:
            raise GeometryError("grid needs cell_size > 0 and at least one cell")
        object.__setattr__(self, "origin", Point2(float(self.origin[0]), float(self.origin[1])))

    def cell_centers(self) -> np.ndarray:
        """(height, width, 2) world coordinates of cell centers; axis 0 is j (y), axis 1 is i (x)."""
        xs = self.origin.x + (np.arange(self.width) + 0.5) * self.cell_size
        ys = self.origin.y + (np.arange(self.height) + 0.5) * self.cell_size
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx, gy], axis=-1)


class GridCoord(NamedTuple):
    cell_i: int
    cell_j: int
    frac_u: float
    frac_v: float
    clamped: bool


def grid_coords(points: np.ndarray, spec: GridSpec):
    """Vectorized continuous grid coordinates, same convention as :func:`project_to_grid`.

    Returns (u, v, clamped) where u indexes x (cell i) and v indexes y (cell j).
    Out-of-grid coordinates are clamped into the border cell.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    u = (pts[:, 0] - spec.origin.x) / spec.cell_size
    v = (pts[:, 1] - spec.origin.y) / spec.cell_size
    out_u = (u < 0.0) | (u >= spec.width)
    out_v = (v < 0.0) | (v >= spec.height)
    uc = np.where(out_u, np.clip(u, 0.0, spec.width - 1.0), u)
    vc = np.where(out_v, np.clip(v, 0.0, spec.height - 1.0), v)
    return uc, vc, out_u | out_v


def project_to_grid(p, spec: GridSpec) -> GridCoord:
    """Split a world point into integer cell and fractional offset.

    Points outside the grid are clamped to the border cell and flagged.
    """
    _finite(p[0], p[1])
    u = (p[0] - spec.origin.x) / spec.cell_size
    v = (p[1] - spec.origin.y) / spec.cell_size
    clamped = False
    if not 0.0 <= u < spec.width:
        u = min(max(u, 0.0), float(spec.width - 1))
        clamped = True
    if not 0.0 <= v < spec.height:
        v = min(max(v, 0.0), float(spec.height - 1))
        clamped = True
    i, j = int(math.floor(u)), int(math.floor(v))
    return GridCoord(i, j, u - i, v - j, clamped)
