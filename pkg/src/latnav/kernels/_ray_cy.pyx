# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled ray-casting kernel; mirrors _ray_py.cast_rays exactly."""

import numpy as np

cimport numpy as cnp
from libc.math cimport cos, sin, sqrt, floor, INFINITY

BACKEND = "cython"


cdef double _grid_march(const unsigned char[:, ::1] occ, double resolution,
                        double x0, double y0, double dx, double dy,
                        double ray_max) noexcept nogil:
    cdef int h = occ.shape[0]
    cdef int w = occ.shape[1]
    cdef int ix = <int>floor(x0 / resolution)
    cdef int iy = <int>floor(y0 / resolution)
    cdef int step_x, step_y
    cdef double t, t_max_x, t_max_y, t_delta_x, t_delta_y, nx, ny
    if ix < 0 or ix >= w or iy < 0 or iy >= h or occ[iy, ix]:
        return 0.0
    step_x = 1 if dx > 0 else -1
    step_y = 1 if dy > 0 else -1
    if dx != 0.0:
        nx = (ix + (1 if dx > 0 else 0)) * resolution
        t_max_x = (nx - x0) / dx
        t_delta_x = resolution / (dx if dx > 0 else -dx)
    else:
        t_max_x = INFINITY
        t_delta_x = INFINITY
    if dy != 0.0:
        ny = (iy + (1 if dy > 0 else 0)) * resolution
        t_max_y = (ny - y0) / dy
        t_delta_y = resolution / (dy if dy > 0 else -dy)
    else:
        t_max_y = INFINITY
        t_delta_y = INFINITY
    while True:
        if t_max_x < t_max_y:
            t = t_max_x
            ix += step_x
            t_max_x += t_delta_x
        else:
            t = t_max_y
            iy += step_y
            t_max_y += t_delta_y
        if t > ray_max:
            return ray_max
        if ix < 0 or ix >= w or iy < 0 or iy >= h:
            return t
        if occ[iy, ix]:
            return t


cdef double _disc_hit(double x0, double y0, double dx, double dy,
                      double cx, double cy, double r, double best) noexcept nogil:
    cdef double ox = cx - x0
    cdef double oy = cy - y0
    cdef double b, disc, t
    if ox * ox + oy * oy <= r * r:
        return 0.0
    b = dx * ox + dy * oy
    if b <= 0.0:
        return best
    disc = b * b - (ox * ox + oy * oy) + r * r
    if disc <= 0.0:
        return best
    t = b - sqrt(disc)
    if 0.0 <= t < best:
        return t
    return best


def cast_rays(occ, double resolution, double x0, double y0, angles,
              double ray_max, ped_xy, ped_r):
    occ_c = np.ascontiguousarray(occ, dtype=np.uint8)
    cdef const unsigned char[:, ::1] occ_v = occ_c
    cdef double[::1] ang = np.ascontiguousarray(angles, dtype=np.float64)
    ped_xy_c = np.ascontiguousarray(np.asarray(ped_xy, dtype=np.float64).reshape(-1, 2))
    ped_r_c = np.ascontiguousarray(np.asarray(ped_r, dtype=np.float64).reshape(-1))
    cdef double[:, ::1] pxy = ped_xy_c
    cdef double[::1] pr = ped_r_c
    out_arr = np.empty(ang.shape[0], dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, p
    cdef double dx, dy, best
    with nogil:
        for i in range(ang.shape[0]):
            dx = cos(ang[i])
            dy = sin(ang[i])
            best = _grid_march(occ_v, resolution, x0, y0, dx, dy, ray_max)
            for p in range(pxy.shape[0]):
                best = _disc_hit(x0, y0, dx, dy, pxy[p, 0], pxy[p, 1], pr[p], best)
            out[i] = best if best < ray_max else ray_max
    return out_arr
