"""Pure-Python ray casting over an occupancy grid plus pedestrian discs.

Reference implementation; the compiled extension in _ray_cy.pyx follows the
exact same traversal so both backends return identical distances.
"""

from __future__ import annotations

import math

import numpy as np

BACKEND = "python"


def _grid_march(occ, resolution, x0, y0, dx, dy, ray_max):
    h, w = occ.shape
    ix = int(math.floor(x0 / resolution))
    iy = int(math.floor(y0 / resolution))
    if ix < 0 or ix >= w or iy < 0 or iy >= h or occ[iy, ix]:
        return 0.0
    step_x = 1 if dx > 0 else -1
    step_y = 1 if dy > 0 else -1
    if dx != 0.0:
        nx = (ix + (1 if dx > 0 else 0)) * resolution
        t_max_x = (nx - x0) / dx
        t_delta_x = resolution / abs(dx)
    else:
        t_max_x = math.inf
        t_delta_x = math.inf
    if dy != 0.0:
        ny = (iy + (1 if dy > 0 else 0)) * resolution
        t_max_y = (ny - y0) / dy
        t_delta_y = resolution / abs(dy)
    else:
        t_max_y = math.inf
        t_delta_y = math.inf
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


def _disc_hit(x0, y0, dx, dy, cx, cy, r, best):
    ox = cx - x0
    oy = cy - y0
    if ox * ox + oy * oy <= r * r:
        return 0.0
    b = dx * ox + dy * oy
    if b <= 0.0:
        return best
    disc = b * b - (ox * ox + oy * oy) + r * r
    if disc <= 0.0:
        return best
    t = b - math.sqrt(disc)
    if 0.0 <= t < best:
        return t
    return best


def cast_rays(occ, resolution, x0, y0, angles, ray_max, ped_xy, ped_r):
    """Distance along each ray to the first occupied cell or pedestrian disc,
    capped at ray_max."""
    occ = np.ascontiguousarray(occ, dtype=np.uint8)
    angles = np.asarray(angles, dtype=np.float64)
    ped_xy = np.asarray(ped_xy, dtype=np.float64).reshape(-1, 2)
    ped_r = np.asarray(ped_r, dtype=np.float64).reshape(-1)
    out = np.empty(angles.shape[0], dtype=np.float64)
    for i in range(angles.shape[0]):
        dx = math.cos(angles[i])
        dy = math.sin(angles[i])
        best = _grid_march(occ, resolution, x0, y0, dx, dy, ray_max)
        for p in range(ped_xy.shape[0]):
            best = _disc_hit(x0, y0, dx, dy, ped_xy[p, 0], ped_xy[p, 1], ped_r[p], best)
        out[i] = best if best < ray_max else ray_max
    return out
