"""Independent reference implementations used only by the tests.

Each oracle avoids the code path it checks: dense sampling instead of SAT,
winding numbers instead of ray casting, explicit loops instead of numpy
reductions, central differences instead of reverse mode.
"""
from __future__ import annotations

import math

import numpy as np


def box_corners(row):
    cx, cy, hx, hy, th = row
    c, s = math.cos(th), math.sin(th)
    local = np.array([[hx, hy], [-hx, hy], [-hx, -hy], [hx, -hy]])
    return local @ np.array([[c, s], [-s, c]]) + np.array([cx, cy])


def box_boundary_samples(row, spacing=4e-4):
    """Points along the box outline (corners included) at roughly ``spacing``."""
    corners = box_corners(row)
    out = [corners]
    for k in range(4):
        a, b = corners[k], corners[(k + 1) % 4]
        n = max(int(math.ceil(np.hypot(*(b - a)) / spacing)), 1)
        t = np.arange(n)[:, None] / n
        out.append(a + t * (b - a))
    return np.vstack(out)


def box_contains(row, pts, tol=1e-12):
    cx, cy, hx, hy, th = row
    c, s = math.cos(th), math.sin(th)
    dx, dy = pts[:, 0] - cx, pts[:, 1] - cy
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (np.abs(u) <= hx + tol) & (np.abs(v) <= hy + tol)


def obb_overlap_sampled(a, b, spacing=4e-4) -> bool:
    """Two convex sets meet iff a boundary point of one lies in the other (or one contains the other)."""
    if box_contains(a, box_boundary_samples(b, spacing)).any():
        return True
    if box_contains(b, box_boundary_samples(a, spacing)).any():
        return True
    return bool(box_contains(a, np.array([b[:2]])).any() or box_contains(b, np.array([a[:2]])).any())


def obb_overlap_interior_sampled(a, b, n=100) -> bool:
    """Sample an n x n lattice over box b (edges included) and test containment in a."""
    cx, cy, hx, hy, th = b
    u, v = np.meshgrid(np.linspace(-hx, hx, n), np.linspace(-hy, hy, n))
    c, s = math.cos(th), math.sin(th)
    pts = np.column_stack([cx + c * u.ravel() - s * v.ravel(), cy + s * u.ravel() + c * v.ravel()])
    return bool(box_contains(a, pts).any())


def winding_number(p, vertices) -> int:
    """Standard crossing-direction winding number (point assumed off the boundary)."""
    wn = 0
    n = len(vertices)
    for i in range(n):
        x0, y0 = vertices[i]
        x1, y1 = vertices[(i + 1) % n]
        cross = (x1 - x0) * (p[1] - y0) - (p[0] - x0) * (y1 - y0)
        if y0 <= p[1] < y1 and cross > 0:
            wn += 1
        elif y1 <= p[1] < y0 and cross < 0:
            wn -= 1
    return wn


def dist_to_boundary(p, vertices) -> float:
    best = math.inf
    n = len(vertices)
    for i in range(n):
        a = np.asarray(vertices[i], dtype=float)
        b = np.asarray(vertices[(i + 1) % n], dtype=float)
        d = b - a
        t = min(max(float(np.dot(np.asarray(p) - a, d) / np.dot(d, d)), 0.0), 1.0)
        best = min(best, float(np.hypot(*(a + t * d - p))))
    return best


def central_diff(f, x, h=1e-5, idx=None):
    """Central finite differences of scalar f at x over the given flat indices."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    idx = range(flat.size) if idx is None else idx
    out = {}
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        out[i] = (fp - fm) / (2 * h)
    return out


def rel_err(a, b, floor=1e-6):
    return abs(a - b) / max(abs(a), abs(b), floor)


def suffix_sum_loops(r):
    G, T = len(r), len(r[0])
    out = np.zeros((G, T))
    for i in range(G):
        for j in range(T):
            acc = 0.0
            for t in range(T - 1, j - 1, -1):
                acc = r[i][t] + acc
            out[i, j] = acc
    return out


def normalize_loops(raw):
    G, T = len(raw), len(raw[0])
    out = np.zeros((G, T))
    for j in range(T):
        col = [raw[i][j] for i in range(G)]
        m = sum(col) / G
        sd = math.sqrt(sum((c - m) ** 2 for c in col) / G)
        for i in range(G):
            out[i, j] = (col[i] - m) / (sd + 1e-8)
    return out


def mse_loops(a, b):
    H, W, C = a.shape
    acc = 0.0
    for i in range(H):
        for j in range(W):
            for c in range(C):
                acc += (a[i, j, c] - b[i, j, c]) ** 2
    return acc / (H * W * C)


def l1_loops(a, b):
    acc, n = 0.0, 0
    for p, q in zip(a, b):
        for u, v in zip(p, q):
            acc += abs(u - v)
            n += 1
    return acc / n


def mean_dist_loops(batch_a, batch_b):
    acc, n = 0.0, 0
    for ra, rb in zip(batch_a, batch_b):
        for p, q in zip(ra, rb):
            acc += math.sqrt((p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2)
            n += 1
    return acc / n
