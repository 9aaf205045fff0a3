"""Numpy implementations of the geometry kernels (fallback for ``_kernels``)."""
import numpy as np

EDGE_TOL = 1e-9


def _sat_gaps(a, b):
    ca, sa = np.cos(a[:, 4]), np.sin(a[:, 4])
    cb, sb = np.cos(b[:, 4]), np.sin(b[:, 4])
    dx = b[:, 0] - a[:, 0]
    dy = b[:, 1] - a[:, 1]
    axes = ((ca, sa), (-sa, ca), (cb, sb), (-sb, cb))
    best = np.full(a.shape[0], -1e300)
    for nx, ny in axes:
        ra = a[:, 2] * np.abs(ca * nx + sa * ny) + a[:, 3] * np.abs(-sa * nx + ca * ny)
        rb = b[:, 2] * np.abs(cb * nx + sb * ny) + b[:, 3] * np.abs(-sb * nx + cb * ny)
        best = np.maximum(best, np.abs(dx * nx + dy * ny) - (ra + rb))
    return best


def obb_separation_pairs(a, b):
    return _sat_gaps(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))


def obb_overlap_pairs(a, b):
    return obb_separation_pairs(a, b) <= 0.0


def obb_overlap_any(ego, agents):
    agents = np.asarray(agents, dtype=np.float64)
    n, m = agents.shape[:2]
    if n == 0 or m == 0:
        return np.zeros(n, dtype=bool)
    ego_rep = np.repeat(np.asarray(ego, dtype=np.float64), m, axis=0)
    hit = obb_overlap_pairs(ego_rep, agents.reshape(n * m, 5))
    return hit.reshape(n, m).any(axis=1)


def points_in_polygon(pts, poly):
    pts = np.asarray(pts, dtype=np.float64)
    poly = np.asarray(poly, dtype=np.float64)
    px, py = pts[:, 0:1], pts[:, 1:2]
    xi, yi = poly[:, 0], poly[:, 1]
    xj, yj = np.roll(xi, 1), np.roll(yi, 1)
    ex, ey = xj - xi, yj - yi
    length = np.sqrt(ex * ex + ey * ey)
    cross = ex * (py - yi) - ey * (px - xi)
    on_edge = (
        (np.abs(cross) <= EDGE_TOL * length)
        & (px >= np.minimum(xi, xj) - EDGE_TOL)
        & (px <= np.maximum(xi, xj) + EDGE_TOL)
        & (py >= np.minimum(yi, yj) - EDGE_TOL)
        & (py <= np.maximum(yi, yj) + EDGE_TOL)
    ).any(axis=1)
    straddle = (yi > py) != (yj > py)
    with np.errstate(divide="ignore", invalid="ignore"):
        xint = xi + (py - yi) * ex / ey
    crossings = (straddle & (px < xint)).sum(axis=1)
    return on_edge | (crossings % 2 == 1)


def points_in_obbs(pts, boxes):
    pts = np.asarray(pts, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64)
    out = np.full(pts.shape[0], -1, dtype=np.int64)
    for k in range(boxes.shape[0]):
        c, s = np.cos(boxes[k, 4]), np.sin(boxes[k, 4])
        dx = pts[:, 0] - boxes[k, 0]
        dy = pts[:, 1] - boxes[k, 1]
        inside = (np.abs(c * dx + s * dy) <= boxes[k, 2]) & (np.abs(-s * dx + c * dy) <= boxes[k, 3])
        out[(out < 0) & inside] = k
    return out
