# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled geometry kernels.

Box rows are ``(cx, cy, hx, hy, heading)``. Every function here has a numpy
twin in :mod:`hierplan._kernels_py` with identical semantics.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport cos, sin, fabs, sqrt

cnp.import_array()

cdef double EDGE_TOL = 1e-9


cdef inline double _sat_gap(double ax, double ay, double ahx, double ahy, double ath,
                            double bx, double by, double bhx, double bhy, double bth) noexcept nogil:
    cdef double ca = cos(ath), sa = sin(ath), cb = cos(bth), sb = sin(bth)
    cdef double dx = bx - ax, dy = by - ay
    cdef double axes[4][2]
    axes[0][0] = ca; axes[0][1] = sa
    axes[1][0] = -sa; axes[1][1] = ca
    axes[2][0] = cb; axes[2][1] = sb
    axes[3][0] = -sb; axes[3][1] = cb
    cdef double best = -1e300, nx, ny, ra, rb, gap
    cdef int k
    for k in range(4):
        nx = axes[k][0]; ny = axes[k][1]
        ra = ahx * fabs(ca * nx + sa * ny) + ahy * fabs(-sa * nx + ca * ny)
        rb = bhx * fabs(cb * nx + sb * ny) + bhy * fabs(-sb * nx + cb * ny)
        gap = fabs(dx * nx + dy * ny) - (ra + rb)
        if gap > best:
            best = gap
    return best


def obb_separation_pairs(const double[:, ::1] a, const double[:, ::1] b):
    cdef Py_ssize_t n = a.shape[0], i
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        for i in range(n):
            o[i] = _sat_gap(a[i, 0], a[i, 1], a[i, 2], a[i, 3], a[i, 4],
                            b[i, 0], b[i, 1], b[i, 2], b[i, 3], b[i, 4])
    return out


def obb_overlap_pairs(const double[:, ::1] a, const double[:, ::1] b):
    cdef Py_ssize_t n = a.shape[0], i
    out = np.empty(n, dtype=np.bool_)
    cdef cnp.npy_bool[::1] o = out
    with nogil:
        for i in range(n):
            o[i] = _sat_gap(a[i, 0], a[i, 1], a[i, 2], a[i, 3], a[i, 4],
                            b[i, 0], b[i, 1], b[i, 2], b[i, 3], b[i, 4]) <= 0.0
    return out


def obb_overlap_any(const double[:, ::1] ego, const double[:, :, ::1] agents):
    """Row j is True when ego[j] touches any agents[j, k]."""
    cdef Py_ssize_t n = agents.shape[0], m = agents.shape[1], i, k
    out = np.zeros(n, dtype=np.bool_)
    cdef cnp.npy_bool[::1] o = out
    with nogil:
        for i in range(n):
            for k in range(m):
                if _sat_gap(ego[i, 0], ego[i, 1], ego[i, 2], ego[i, 3], ego[i, 4],
                            agents[i, k, 0], agents[i, k, 1], agents[i, k, 2],
                            agents[i, k, 3], agents[i, k, 4]) <= 0.0:
                    o[i] = 1
                    break
    return out


cdef inline bint _in_poly(double px, double py, const double[:, ::1] poly) noexcept nogil:
    cdef Py_ssize_t m = poly.shape[0], i, j
    cdef double xi, yi, xj, yj, ex, ey, cross, length, xint
    cdef bint inside = 0
    j = m - 1
    for i in range(m):
        xi = poly[i, 0]; yi = poly[i, 1]
        xj = poly[j, 0]; yj = poly[j, 1]
        ex = xj - xi; ey = yj - yi
        length = sqrt(ex * ex + ey * ey)
        cross = ex * (py - yi) - ey * (px - xi)
        if (fabs(cross) <= EDGE_TOL * length
                and px >= (xi if xi < xj else xj) - EDGE_TOL
                and px <= (xj if xi < xj else xi) + EDGE_TOL
                and py >= (yi if yi < yj else yj) - EDGE_TOL
                and py <= (yj if yi < yj else yi) + EDGE_TOL):
            return 1
        if (yi > py) != (yj > py):
            xint = xi + (py - yi) * ex / ey
            if px < xint:
                inside = not inside
        j = i
    return inside


def points_in_polygon(const double[:, ::1] pts, const double[:, ::1] poly):
    cdef Py_ssize_t n = pts.shape[0], i
    out = np.empty(n, dtype=np.bool_)
    cdef cnp.npy_bool[::1] o = out
    with nogil:
        for i in range(n):
            o[i] = _in_poly(pts[i, 0], pts[i, 1], poly)
    return out


def points_in_obbs(const double[:, ::1] pts, const double[:, ::1] boxes):
    """Index of the first box containing each point, or -1."""
    cdef Py_ssize_t n = pts.shape[0], m = boxes.shape[0], i, k
    out = np.full(n, -1, dtype=np.int64)
    cdef cnp.int64_t[::1] o = out
    cdef double c, s, dx, dy, u, v
    with nogil:
        for k in range(m):
            c = cos(boxes[k, 4]); s = sin(boxes[k, 4])
            for i in range(n):
                if o[i] >= 0:
                    continue
                dx = pts[i, 0] - boxes[k, 0]
                dy = pts[i, 1] - boxes[k, 1]
                u = c * dx + s * dy
                v = -s * dx + c * dy
                if fabs(u) <= boxes[k, 2] and fabs(v) <= boxes[k, 3]:
                    o[i] = k
    return out
