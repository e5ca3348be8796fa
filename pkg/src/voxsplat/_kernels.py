"""Hot numeric kernels: grid ray traversal, TSDF blending, splat rasterization.

Each kernel exists twice: a numba @njit loop version (default) and a plain
numpy version. Set VOXSPLAT_NO_NUMBA=1 to force the numpy path, e.g. for
debugging with the interpreter or on machines without a working numba.
``benchmarks/bench_kernels.py`` times the two paths against each other.
"""

from __future__ import annotations

import math
import os

import numpy as np

NUMBA_ENABLED = os.environ.get("VOXSPLAT_NO_NUMBA", "").lower() not in ("1", "true", "yes")

if NUMBA_ENABLED:
    try:
        from numba import njit, prange, set_num_threads
    except ImportError:  # pragma: no cover
        NUMBA_ENABLED = False

if not NUMBA_ENABLED:  # interpreter fallbacks so the decorated defs still import
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def wrap(f):
            return f

        return wrap

    prange = range

    def set_num_threads(n):
        pass


_INF = 1.0e300
TILE = 16


def set_worker_threads(n: int) -> None:
    """Cap numba's thread pool; no-op on the numpy path."""
    if NUMBA_ENABLED and n >= 1:
        import numba
        set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


# ---------------------------------------------------------------------------
# Grid ray traversal (incremental DDA, one step per crossed voxel)
# ---------------------------------------------------------------------------

@njit(cache=True)
def _dda_batch_loop(origins, dirs, tmins, tmaxs, voxel_size):
    n = origins.shape[0]

    # Upper bound on emitted voxels per ray: one per axis crossing plus slack.
    bound = np.empty(n, np.int64)
    for r in range(n):
        span = tmaxs[r] - tmins[r]
        b = 4
        for a in range(3):
            b += int(abs(dirs[r, a]) * span / voxel_size) + 1
        bound[r] = b
    boff = np.zeros(n + 1, np.int64)
    for r in range(n):
        boff[r + 1] = boff[r] + bound[r]

    scratch = np.empty((boff[n], 3), np.int64)
    counts = np.zeros(n, np.int64)

    for r in range(n):
        t0 = tmins[r]
        t1 = tmaxs[r]
        base = boff[r]

        px = origins[r, 0] + t0 * dirs[r, 0]
        py = origins[r, 1] + t0 * dirs[r, 1]
        pz = origins[r, 2] + t0 * dirs[r, 2]
        cx = int(math.floor(px / voxel_size))
        cy = int(math.floor(py / voxel_size))
        cz = int(math.floor(pz / voxel_size))

        scratch[base, 0] = cx
        scratch[base, 1] = cy
        scratch[base, 2] = cz
        m = 1
        if t1 <= t0:
            counts[r] = m
            continue

        sx = 1 if dirs[r, 0] > 0.0 else -1
        sy = 1 if dirs[r, 1] > 0.0 else -1
        sz = 1 if dirs[r, 2] > 0.0 else -1
        fx = 1 if sx > 0 else 0
        fy = 1 if sy > 0 else 0
        fz = 1 if sz > 0 else 0

        while True:
            # Boundary-crossing times recomputed from the current cell each
            # step: accumulating t-deltas drifts enough to disagree with a
            # position-based sampling oracle at segment endpoints.
            if dirs[r, 0] != 0.0:
                tmx = t0 + ((cx + fx) * voxel_size - px) / dirs[r, 0]
            else:
                tmx = _INF
            if dirs[r, 1] != 0.0:
                tmy = t0 + ((cy + fy) * voxel_size - py) / dirs[r, 1]
            else:
                tmy = _INF
            if dirs[r, 2] != 0.0:
                tmz = t0 + ((cz + fz) * voxel_size - pz) / dirs[r, 2]
            else:
                tmz = _INF
            tm = tmx
            if tmy < tm:
                tm = tmy
            if tmz < tm:
                tm = tmz
            if tm > t1:
                break
            # exact ties step every tied axis at once: a ray through a cell
            # corner moves diagonally, as a position-based sampler sees it
            if tmx == tm:
                cx += sx
            if tmy == tm:
                cy += sy
            if tmz == tm:
                cz += sz
            scratch[base + m, 0] = cx
            scratch[base + m, 1] = cy
            scratch[base + m, 2] = cz
            m += 1
        counts[r] = m

    offsets = np.zeros(n + 1, np.int64)
    for r in range(n):
        offsets[r + 1] = offsets[r] + counts[r]
    out = np.empty((offsets[n], 3), np.int64)
    for r in range(n):
        o0 = offsets[r]
        b0 = boff[r]
        for c in range(counts[r]):
            out[o0 + c, 0] = scratch[b0 + c, 0]
            out[o0 + c, 1] = scratch[b0 + c, 1]
            out[o0 + c, 2] = scratch[b0 + c, 2]
    return out, offsets


def _dda_batch_numpy(origins, dirs, tmins, tmaxs, voxel_size):
    # Lockstep variant: all rays advance together, one boundary crossing per
    # iteration, masked out once they pass their t_max. Crossing times are
    # recomputed from the current cells to match the loop kernel bit-for-bit.
    n = origins.shape[0]
    start = origins + tmins[:, None] * dirs
    cell = np.floor(start / voxel_size).astype(np.int64)
    step = np.where(dirs > 0.0, 1, -1).astype(np.int64)
    front = (step > 0).astype(np.int64)

    ray_seq = [np.arange(n)]
    cell_seq = [cell.copy()]
    zero_len = tmaxs <= tmins
    while True:
        with np.errstate(divide="ignore", invalid="ignore"):
            tmax = tmins[:, None] + ((cell + front) * voxel_size - start) / dirs
        tmax[dirs == 0.0] = _INF
        axis_t = tmax.min(axis=1)
        active = (axis_t <= tmaxs) & ~zero_len
        if not active.any():
            break
        rows = np.flatnonzero(active)
        tied = tmax[rows] == axis_t[rows, None]  # exact ties step jointly
        cell[rows] += step[rows] * tied
        ray_seq.append(rows)
        cell_seq.append(cell[rows].copy())

    rays = np.concatenate(ray_seq)
    cells = np.concatenate(cell_seq, axis=0)
    order = np.argsort(rays, kind="stable")
    out = cells[order]
    counts = np.bincount(rays, minlength=n)
    offsets = np.zeros(n + 1, np.int64)
    np.cumsum(counts, out=offsets[1:])
    return out, offsets


def dda_batch(origins, dirs, tmins, tmaxs, voxel_size):
    """Voxel keys crossed by each ray segment, in increasing-t order.

    Returns (keys (M,3) int64, offsets (N+1,)): ray r owns keys[offsets[r]:offsets[r+1]].
    """
    origins = np.ascontiguousarray(origins, np.float64)
    dirs = np.ascontiguousarray(dirs, np.float64)
    tmins = np.ascontiguousarray(tmins, np.float64)
    tmaxs = np.ascontiguousarray(tmaxs, np.float64)
    if NUMBA_ENABLED:
        return _dda_batch_loop(origins, dirs, tmins, tmaxs, float(voxel_size))
    return _dda_batch_numpy(origins, dirs, tmins, tmaxs, float(voxel_size))


# ---------------------------------------------------------------------------
# TSDF blending: sequential per-event weighted update of (weight, tsdf) rows
# ---------------------------------------------------------------------------

@njit(cache=True)
def _blend_events_loop(rows, phis, weight, tsdf, omega_max, balanced):
    for e in range(rows.shape[0]):
        r = rows[e]
        phi = phis[e]
        w0 = weight[r]
        w1 = w0 + 1.0
        if w1 > omega_max:
            w1 = omega_max
        if balanced:
            tsdf[r] = (tsdf[r] * w0 + phi * w1) / (w0 + w1)
        else:
            tsdf[r] = (tsdf[r] * w0 + phi) / (w0 + 1.0)
        weight[r] = w1


def _blend_events_numpy(rows, phis, weight, tsdf, omega_max, balanced):
    # The recurrence is order-dependent per voxel, so the fallback stays a
    # plain event loop; no vectorization that would reorder updates.
    for e in range(rows.shape[0]):
        r = rows[e]
        phi = phis[e]
        w0 = weight[r]
        w1 = min(w0 + 1.0, omega_max)
        if balanced:
            tsdf[r] = (tsdf[r] * w0 + phi * w1) / (w0 + w1)
        else:
            tsdf[r] = (tsdf[r] * w0 + phi) / (w0 + 1.0)
        weight[r] = w1


def blend_events(rows, phis, weight, tsdf, omega_max, balanced):
    """Apply TSDF updates event-by-event, in the given order, in place."""
    rows = np.ascontiguousarray(rows, np.int64)
    phis = np.ascontiguousarray(phis, np.float64)
    if NUMBA_ENABLED:
        _blend_events_loop(rows, phis, weight, tsdf, float(omega_max), bool(balanced))
    else:
        _blend_events_numpy(rows, phis, weight, tsdf, float(omega_max), bool(balanced))


# ---------------------------------------------------------------------------
# Splat rasterization: alpha-blended color/depth/alpha over depth-sorted
# projected Gaussians. Footprint is the 3-sigma ellipse of the 2D covariance.
# ---------------------------------------------------------------------------

@njit(cache=True, parallel=True)
def _rasterize_tiles_loop(means2d, conics, depths, opacities, colors,
                          height, width, bg, tile_start, tile_gauss,
                          tiles_x, front_to_back):
    color = np.zeros((height, width, 3))
    depth = np.zeros((height, width))
    alpha = np.zeros((height, width))
    n_tiles = tile_start.shape[0] - 1
    for t in prange(n_tiles):
        ty = t // tiles_x
        tx = t % tiles_x
        y0 = ty * TILE
        y1 = min(y0 + TILE, height)
        x0 = tx * TILE
        x1 = min(x0 + TILE, width)
        g0 = tile_start[t]
        g1 = tile_start[t + 1]
        for y in range(y0, y1):
            for x in range(x0, x1):
                if front_to_back:
                    trans = 1.0
                    cr = 0.0
                    cg = 0.0
                    cb = 0.0
                    dd = 0.0
                    for k in range(g0, g1):
                        g = tile_gauss[k]
                        dx = x - means2d[g, 0]
                        dy = y - means2d[g, 1]
                        m = (conics[g, 0] * dx * dx
                             + 2.0 * conics[g, 1] * dx * dy
                             + conics[g, 2] * dy * dy)
                        if m > 9.0:
                            continue
                        a = opacities[g] * math.exp(-0.5 * m)
                        if a > 0.99:
                            a = 0.99
                        w = a * trans
                        cr += colors[g, 0] * w
                        cg += colors[g, 1] * w
                        cb += colors[g, 2] * w
                        dd += depths[g] * w
                        trans *= 1.0 - a
                    color[y, x, 0] = cr + trans * bg[0]
                    color[y, x, 1] = cg + trans * bg[1]
                    color[y, x, 2] = cb + trans * bg[2]
                    depth[y, x] = dd
                    alpha[y, x] = 1.0 - trans
                else:
                    cr = bg[0]
                    cg = bg[1]
                    cb = bg[2]
                    dd = 0.0
                    aa = 0.0
                    for k in range(g1 - 1, g0 - 1, -1):
                        g = tile_gauss[k]
                        dx = x - means2d[g, 0]
                        dy = y - means2d[g, 1]
                        m = (conics[g, 0] * dx * dx
                             + 2.0 * conics[g, 1] * dx * dy
                             + conics[g, 2] * dy * dy)
                        if m > 9.0:
                            continue
                        a = opacities[g] * math.exp(-0.5 * m)
                        if a > 0.99:
                            a = 0.99
                        cr = colors[g, 0] * a + (1.0 - a) * cr
                        cg = colors[g, 1] * a + (1.0 - a) * cg
                        cb = colors[g, 2] * a + (1.0 - a) * cb
                        dd = depths[g] * a + (1.0 - a) * dd
                        aa = a + (1.0 - a) * aa
                    color[y, x, 0] = cr
                    color[y, x, 1] = cg
                    color[y, x, 2] = cb
                    depth[y, x] = dd
                    alpha[y, x] = aa
    return color, depth, alpha


def _rasterize_numpy(means2d, conics, depths, opacities, colors,
                     height, width, bg, bboxes, front_to_back):
    n = means2d.shape[0]
    depth = np.zeros((height, width))
    if front_to_back:
        color = np.zeros((height, width, 3))
        trans = np.ones((height, width))
        order = range(n)
    else:
        color = np.tile(np.asarray(bg, np.float64), (height, width, 1))
        acc_alpha = np.zeros((height, width))
        order = range(n - 1, -1, -1)

    for g in order:
        x0, x1, y0, y1 = bboxes[g]
        if x1 <= x0 or y1 <= y0:
            continue
        dx = np.arange(x0, x1)[None, :] - means2d[g, 0]
        dy = np.arange(y0, y1)[:, None] - means2d[g, 1]
        m = conics[g, 0] * dx * dx + 2.0 * conics[g, 1] * dx * dy + conics[g, 2] * dy * dy
        a = np.where(m <= 9.0, np.minimum(0.99, opacities[g] * np.exp(-0.5 * m)), 0.0)
        if front_to_back:
            w = a * trans[y0:y1, x0:x1]
            color[y0:y1, x0:x1] += w[:, :, None] * colors[g]
            depth[y0:y1, x0:x1] += w * depths[g]
            trans[y0:y1, x0:x1] *= 1.0 - a
        else:
            color[y0:y1, x0:x1] = (a[:, :, None] * colors[g]
                                   + (1.0 - a)[:, :, None] * color[y0:y1, x0:x1])
            depth[y0:y1, x0:x1] = a * depths[g] + (1.0 - a) * depth[y0:y1, x0:x1]
            acc_alpha[y0:y1, x0:x1] = a + (1.0 - a) * acc_alpha[y0:y1, x0:x1]

    if front_to_back:
        color += trans[:, :, None] * np.asarray(bg, np.float64)
        alpha = 1.0 - trans
    else:
        alpha = acc_alpha
    return color, depth, alpha


def _tile_bin(bboxes, n_gauss, height, width):
    tiles_x = (width + TILE - 1) // TILE
    tiles_y = (height + TILE - 1) // TILE
    pairs_tile = []
    pairs_g = []
    for g in range(n_gauss):
        x0, x1, y0, y1 = bboxes[g]
        if x1 <= x0 or y1 <= y0:
            continue
        tx0 = x0 // TILE
        tx1 = (x1 - 1) // TILE
        ty0 = y0 // TILE
        ty1 = (y1 - 1) // TILE
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                pairs_tile.append(ty * tiles_x + tx)
                pairs_g.append(g)
    n_tiles = tiles_x * tiles_y
    if not pairs_tile:
        return np.zeros(n_tiles + 1, np.int64), np.zeros(0, np.int64), tiles_x
    pt = np.asarray(pairs_tile, np.int64)
    pg = np.asarray(pairs_g, np.int64)
    order = np.argsort(pt, kind="stable")  # stable keeps per-tile depth order
    pt = pt[order]
    pg = pg[order]
    tile_start = np.zeros(n_tiles + 1, np.int64)
    np.cumsum(np.bincount(pt, minlength=n_tiles), out=tile_start[1:])
    return tile_start, pg, tiles_x


def rasterize(means2d, conics, depths, opacities, colors, height, width,
              background, bboxes, front_to_back=True):
    """Composite depth-sorted projected Gaussians into color/depth/alpha images.

    Inputs must already be sorted front-to-back; ``bboxes`` holds per-Gaussian
    clipped pixel rectangles (x0, x1, y0, y1) covering the 3-sigma footprint.
    """
    means2d = np.ascontiguousarray(means2d, np.float64)
    conics = np.ascontiguousarray(conics, np.float64)
    depths = np.ascontiguousarray(depths, np.float64)
    opacities = np.ascontiguousarray(opacities, np.float64)
    colors = np.ascontiguousarray(colors, np.float64)
    bg = np.ascontiguousarray(background, np.float64)
    if NUMBA_ENABLED:
        tile_start, tile_gauss, tiles_x = _tile_bin(bboxes, means2d.shape[0], height, width)
        return _rasterize_tiles_loop(means2d, conics, depths, opacities, colors,
                                     height, width, bg, tile_start, tile_gauss,
                                     tiles_x, bool(front_to_back))
    return _rasterize_numpy(means2d, conics, depths, opacities, colors,
                            height, width, bg, bboxes, bool(front_to_back))
