"""Compiled ray-marching kernels for horizon and shadow searches.

Arrays are indexed ``[row, col]`` with row 0 at the north edge; heights and
distances are in cell units. Rays are sampled where they cross the row and
column lines through cell centres, so block edges are hit exactly by the
bilinear surface instead of being straddled by fixed-length steps. Between
two crossings the surface height is quadratic in distance, so the interior
extremum of each segment is found in closed form. A ray stops at the last
cell-centre line inside the grid.
"""

import numpy as np
from numba import njit, prange


@njit(cache=True, inline="always")
def _bilinear(z, row, col):
    h, w = z.shape
    r0 = min(int(np.floor(row)), h - 2) if h > 1 else 0
    c0 = min(int(np.floor(col)), w - 2) if w > 1 else 0
    r1 = min(r0 + 1, h - 1)
    c1 = min(c0 + 1, w - 1)
    fr = row - r0
    fc = col - c0
    return (
        z[r0, c0] * (1.0 - fr) * (1.0 - fc)
        + z[r0, c1] * (1.0 - fr) * fc
        + z[r1, c0] * fr * (1.0 - fc)
        + z[r1, c1] * fr * fc
    )


@njit(cache=True, inline="always")
def _segment_quadratic(z, r, c, dr, dc, dmid):
    # z along the ray inside the cell holding distance dmid: q0 + q1 d + q2 d^2
    h, w = z.shape
    r0 = min(max(int(np.floor(r + dmid * dr)), 0), h - 2)
    c0 = min(max(int(np.floor(c + dmid * dc)), 0), w - 2)
    ar = r - r0
    ac = c - c0
    z00 = z[r0, c0]
    b = z[r0 + 1, c0] - z00
    cc = z[r0, c0 + 1] - z00
    dd = z00 - z[r0, c0 + 1] - z[r0 + 1, c0] + z[r0 + 1, c0 + 1]
    q0 = z00 + b * ar + cc * ac + dd * ar * ac
    q1 = b * dr + cc * dc + dd * (ar * dc + ac * dr)
    q2 = dd * dr * dc
    return q0, q1, q2


@njit(cache=True, inline="always")
def _segment_max_slope(z, r, c, dr, dc, d0, d1, z0):
    # largest (z(d) - z0) / d strictly inside (d0, d1); -inf when the maximum is at an end
    q0, q1, q2 = _segment_quadratic(z, r, c, dr, dc, 0.5 * (d0 + d1))
    a = q0 - z0
    if q2 >= 0.0 or a >= 0.0:
        return -np.inf
    ds = np.sqrt(a / q2)
    if ds <= d0 or ds >= d1:
        return -np.inf
    return a / ds + q1 + q2 * ds


@njit(cache=True, inline="always")
def _segment_max_excess(z, r, c, dr, dc, d0, d1, z0, tan_alt):
    # largest z(d) - (z0 + d tan_alt) strictly inside (d0, d1); -inf when the maximum is at an end
    q0, q1, q2 = _segment_quadratic(z, r, c, dr, dc, 0.5 * (d0 + d1))
    if q2 >= 0.0:
        return -np.inf
    ds = -(q1 - tan_alt) / (2.0 * q2)
    if ds <= d0 or ds >= d1:
        return -np.inf
    return q0 - z0 + (q1 - tan_alt) * ds + q2 * ds * ds


@njit(cache=True, inline="always")
def _first_crossing(pos, step):
    # distance along the ray to the first integer line after ``pos`` and the spacing between lines
    if step > 1e-12:
        return (np.floor(pos) + 1.0 - pos) / step, 1.0 / step
    if step < -1e-12:
        return (pos - (np.ceil(pos) - 1.0)) / -step, -1.0 / step
    return np.inf, np.inf


@njit(cache=True, parallel=True, nogil=True)
def horizon_svf(build, veg, use_veg, dir_sin, dir_cos, max_dist, observer_height, out_b, out_bv):
    """Sky view factor from building-only and building+vegetation horizons.

    Each azimuth contributes cos^2 of its horizon elevation, the exact
    cosine-weighted sky fraction of that sector.
    """
    h, w = build.shape
    grid2d = h > 1 and w > 1
    ndir = dir_sin.size
    zmax_b = build.max()
    zmax_v = veg.max() if use_veg else -np.inf
    for r in prange(h):
        for c in range(w):
            z0 = build[r, c] + observer_height
            acc_b = 0.0
            acc_bv = 0.0
            for k in range(ndir):
                dc = dir_sin[k]
                dr = -dir_cos[k]
                tb = 0.0
                tv = 0.0
                tx, sx = _first_crossing(c * 1.0, dc)
                ty, sy = _first_crossing(r * 1.0, dr)
                dprev = 0.0
                while True:
                    d = tx if tx < ty else ty
                    if d > max_dist:
                        break
                    if tx <= ty + 1e-12:
                        tx += sx
                    if ty <= d + 1e-12:
                        ty += sy
                    col = c + d * dc
                    row = r + d * dr
                    if col < -1e-9 or row < -1e-9 or col > w - 1 + 1e-9 or row > h - 1 + 1e-9:
                        break
                    col = min(max(col, 0.0), w - 1.0)
                    row = min(max(row, 0.0), h - 1.0)
                    # nothing in this segment or further out can raise either horizon
                    if dprev > 0.0 and (zmax_b - z0) / dprev <= tb and (zmax_v - z0) / dprev <= tv:
                        break
                    t = (_bilinear(build, row, col) - z0) / d
                    if grid2d:
                        t = max(t, _segment_max_slope(build, r, c, dr, dc, dprev, d, z0))
                    if t > tb:
                        tb = t
                    if use_veg:
                        t = (_bilinear(veg, row, col) - z0) / d
                        if grid2d:
                            t = max(t, _segment_max_slope(veg, r, c, dr, dc, dprev, d, z0))
                        if t > tv:
                            tv = t
                    dprev = d
                acc_b += 1.0 / (1.0 + tb * tb)
                tbv = tb if tb > tv else tv
                acc_bv += 1.0 / (1.0 + tbv * tbv)
            out_b[r, c] = acc_b / ndir
            out_bv[r, c] = acc_bv / ndir


@njit(cache=True, parallel=True, nogil=True)
def sun_transmission(build, veg, use_veg, canopy_here, sun_sin, sun_cos, tan_alt, max_dist, tau, out):
    """Beam transmission towards the sun: 0 behind buildings, ``tau`` behind canopy only."""
    h, w = build.shape
    grid2d = h > 1 and w > 1
    zmax_b = build.max()
    zmax_v = veg.max() if use_veg else -np.inf
    dc = sun_sin
    dr = -sun_cos
    for r in prange(h):
        for c in range(w):
            z0 = build[r, c]
            blocked_b = False
            blocked_v = use_veg and canopy_here[r, c]
            tx, sx = _first_crossing(c * 1.0, dc)
            ty, sy = _first_crossing(r * 1.0, dr)
            dprev = 0.0
            while True:
                d = tx if tx < ty else ty
                if d > max_dist:
                    break
                if tx <= ty + 1e-12:
                    tx += sx
                if ty <= d + 1e-12:
                    ty += sy
                col = c + d * dc
                row = r + d * dr
                if col < -1e-9 or row < -1e-9 or col > w - 1 + 1e-9 or row > h - 1 + 1e-9:
                    break
                col = min(max(col, 0.0), w - 1.0)
                row = min(max(row, 0.0), h - 1.0)
                start = z0 + dprev * tan_alt
                if start >= zmax_b and (blocked_v or start >= zmax_v):
                    break
                ray = z0 + d * tan_alt
                if _bilinear(build, row, col) > ray or (
                        grid2d and _segment_max_excess(build, r, c, dr, dc, dprev, d, z0, tan_alt) > 0.0):
                    blocked_b = True
                    break
                if use_veg and not blocked_v and (_bilinear(veg, row, col) > ray or (
                        grid2d and _segment_max_excess(veg, r, c, dr, dc, dprev, d, z0, tan_alt) > 0.0)):
                    blocked_v = True
                dprev = d
            if blocked_b:
                out[r, c] = 0.0
            elif blocked_v:
                out[r, c] = tau
            else:
                out[r, c] = 1.0
