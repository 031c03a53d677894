"""numba kernels for disk splatting, its adjoint, and first-hit selection.

All kernels walk 16x16 tiles; each tile carries the list of disks whose
screen footprint may touch it, ordered by ``zmin``, a lower bound on the
camera depth of any of the disk's contributions. ``rect`` (inclusive pixel
bounds) and ``zmin`` are stored per tile-list entry. Before compositing, a
tile's list is split over 4x4 pixel blocks by ``rect``, which keeps the order
but spares each pixel most of the candidates that cannot reach it. Per pixel, contributions go
into a small buffer kept sorted by (ray parameter, disk index); an entry is
composited once it lies in front of the next candidate's ``zmin``, so the
order is exactly that of a full sort and pixels stop as soon as they are
opaque, without visiting the surfaces behind.
"""

import math

import numpy as np

from numba import prange

from .._accel import njit
from .common import ALPHA_CUTOFF, MIN_DENOM, NEAR_T, T_MIN

# side of the pixel blocks that tile lists are split into before compositing
SUB = 4


@njit(inline="always")
def _ray(px, py, right, down, fwd, fx, fy, cx, cy):
    x = (px + 0.5 - cx) / fx
    y = (py + 0.5 - cy) / fy
    d0 = fwd[0] + x * right[0] + y * down[0]
    d1 = fwd[1] + x * right[1] + y * down[1]
    d2 = fwd[2] + x * right[2] + y * down[2]
    inv = 1.0 / math.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
    return d0 * inv, d1 * inv, d2 * inv


@njit(inline="always")
def _intersect(j, o, d0, d1, d2, centers, rots, inv_s):
    """Ray parameter, local coords and density of disk j; t < 0 on failure."""
    n0 = rots[j, 0, 2]
    n1 = rots[j, 1, 2]
    n2 = rots[j, 2, 2]
    nd = n0 * d0 + n1 * d1 + n2 * d2
    if abs(nd) < MIN_DENOM:
        return -1.0, 0.0, 0.0, 0.0
    e0 = centers[j, 0] - o[0]
    e1 = centers[j, 1] - o[1]
    e2 = centers[j, 2] - o[2]
    t = (n0 * e0 + n1 * e1 + n2 * e2) / nd
    if t <= NEAR_T:
        return -1.0, 0.0, 0.0, 0.0
    v0 = t * d0 - e0
    v1 = t * d1 - e1
    v2 = t * d2 - e2
    u1 = rots[j, 0, 0] * v0 + rots[j, 1, 0] * v1 + rots[j, 2, 0] * v2
    u2 = rots[j, 0, 1] * v0 + rots[j, 1, 1] * v1 + rots[j, 2, 1] * v2
    a = u1 * inv_s[j, 0]
    b = u2 * inv_s[j, 1]
    g = math.exp(-0.5 * (a * a + b * b))
    return t, u1, u2, g


@njit(inline="always")
def _insert(bt, bj, head, tail, t, j):
    """Insert (t, j) into the ascending slice [head, tail); returns its slot."""
    k = tail
    while k > head and (bt[k - 1] > t or (bt[k - 1] == t and bj[k - 1] > j)):
        k -= 1
    return k


@njit(inline="always")
def _gather(px, py, e, j, rect, o, d0, d1, d2, centers, rots, inv_s, opac):
    if px < rect[e, 0] or px > rect[e, 1] or py < rect[e, 2] or py > rect[e, 3]:
        return -1.0, 0.0, 0.0, 0.0, 0.0
    t, u1, u2, g = _intersect(j, o, d0, d1, d2, centers, rots, inv_s)
    if t < 0.0:
        return -1.0, 0.0, 0.0, 0.0, 0.0
    a = opac[j] * g
    if a < ALPHA_CUTOFF:
        return -1.0, 0.0, 0.0, 0.0, 0.0
    return t, a, u1, u2, g


@njit(inline="always")
def _composite_order(px, py, elist, tile_ids, rect, zmin, o, d0, d1, d2, dfw,
                     centers, rots, inv_s, opac, bt, bj, ba, bu, bg_, out_j, out_t, out_a,
                     out_u, out_g, out_T):
    """Front-to-back contributions of one pixel, written to the ``out_*`` arrays.

    ``elist`` holds the tile-list entries that may cover the pixel, in tile order.
    Returns the number of contributions and the final transmittance.
    """
    cnt = len(elist)
    head = 0
    tail = 0
    n = 0
    T = 1.0
    c = 0
    while True:
        limit = np.inf
        if c < cnt:
            limit = zmin[elist[c]]
        # everything pending in front of the next candidate's depth bound is final
        while head < tail and (c >= cnt or bt[head] * dfw < limit):
            out_j[n] = bj[head]
            out_t[n] = bt[head]
            out_a[n] = ba[head]
            out_u[n, 0] = bu[head, 0]
            out_u[n, 1] = bu[head, 1]
            out_g[n] = bg_[head]
            out_T[n] = T
            T *= 1.0 - ba[head]
            n += 1
            head += 1
            if T < T_MIN:
                return n, T
        if c >= cnt:
            return n, T
        e = elist[c]
        j = tile_ids[e]
        c += 1
        t, a, u1, u2, g = _gather(px, py, e, j, rect, o, d0, d1, d2, centers, rots, inv_s, opac)
        if t < 0.0:
            continue
        k = _insert(bt, bj, head, tail, t, j)
        for m in range(tail, k, -1):
            bt[m] = bt[m - 1]
            bj[m] = bj[m - 1]
            ba[m] = ba[m - 1]
            bu[m, 0] = bu[m - 1, 0]
            bu[m, 1] = bu[m - 1, 1]
            bg_[m] = bg_[m - 1]
        bt[k] = t
        bj[k] = j
        ba[k] = a
        bu[k, 0] = u1
        bu[k, 1] = u2
        bg_[k] = g
        tail += 1


@njit
def _block_lists(start, cnt, rect, x0, y0, x1, y1):
    """Split one tile's entries over SUB x SUB pixel blocks, keeping their order.

    Returns (nbx, offsets, entries); block b = by * nbx + bx owns
    ``entries[offsets[b]:offsets[b + 1]]``.
    """
    nbx = (x1 - x0) // SUB + 1
    nby = (y1 - y0) // SUB + 1
    off = np.zeros(nbx * nby + 1, dtype=np.int64)
    span = np.empty((cnt, 4), dtype=np.int64)
    for c in range(cnt):
        e = start + c
        bx0 = (max(rect[e, 0], x0) - x0) // SUB
        bx1 = (min(rect[e, 1], x1) - x0) // SUB
        by0 = (max(rect[e, 2], y0) - y0) // SUB
        by1 = (min(rect[e, 3], y1) - y0) // SUB
        span[c, 0] = bx0
        span[c, 1] = bx1
        span[c, 2] = by0
        span[c, 3] = by1
        for by in range(by0, by1 + 1):
            for bx in range(bx0, bx1 + 1):
                off[by * nbx + bx + 1] += 1
    for b in range(nbx * nby):
        off[b + 1] += off[b]
    fill = off[:-1].copy()
    ents = np.empty(off[-1], dtype=np.int64)
    for c in range(cnt):
        for by in range(span[c, 2], span[c, 3] + 1):
            for bx in range(span[c, 0], span[c, 1] + 1):
                b = by * nbx + bx
                ents[fill[b]] = start + c
                fill[b] += 1
    return nbx, off, ents


@njit(inline="always")
def _replay(n, js, o, d0, d1, d2, centers, rots, inv_s, opac, out_j, out_t, out_a, out_u, out_g, out_T):
    """Rebuild the ``out_*`` arrays of ``_composite_order`` from a recorded order."""
    T = 1.0
    for m in range(n):
        j = js[m]
        t, u1, u2, g = _intersect(j, o, d0, d1, d2, centers, rots, inv_s)
        out_j[m] = j
        out_t[m] = t
        out_a[m] = opac[j] * g
        out_u[m, 0] = u1
        out_u[m, 1] = u2
        out_g[m] = g
        out_T[m] = T
        T *= 1.0 - out_a[m]
    return n


@njit(parallel=True)
def forward(o, right, down, fwd, fx, fy, cx, cy, width, height, tile, tiles_x,
            tile_off, tile_ids, rect, zmin, centers, rots, inv_s, opac, tile_mask, colors, bg,
            out_color, out_depth, out_alpha, rec_n, rec_j):
    """Tiles with ``tile_mask == 0`` are skipped and keep whatever the outputs held.

    If ``rec_n`` is not empty, each composited pixel stores its front-to-back
    disk indices in ``rec_j[py, px, :n]`` and the count in ``rec_n``, or -1 when
    they do not fit; ``backward`` replays these instead of re-sorting.
    """
    record = rec_n.shape[0] > 0
    cap = rec_j.shape[2]
    n_tiles = len(tile_off) - 1
    for ti in prange(n_tiles):
        if tile_mask[ti] == 0:
            continue
        ty = ti // tiles_x
        tx = ti - ty * tiles_x
        start = tile_off[ti]
        cnt = tile_off[ti + 1] - start
        bt = np.empty(cnt)
        bj = np.empty(cnt, dtype=np.int64)
        ba = np.empty(cnt)
        bu = np.empty((cnt, 2))
        bgg = np.empty(cnt)
        oj = np.empty(cnt, dtype=np.int64)
        ot = np.empty(cnt)
        oa = np.empty(cnt)
        ou = np.empty((cnt, 2))
        og = np.empty(cnt)
        oT = np.empty(cnt)
        x0 = tx * tile
        y0 = ty * tile
        x1 = min(x0 + tile, width) - 1
        y1 = min(y0 + tile, height) - 1
        nbx, boff, bent = _block_lists(start, cnt, rect, x0, y0, x1, y1)
        for py in range(y0, y1 + 1):
            for px in range(x0, x1 + 1):
                d0, d1, d2 = _ray(px, py, right, down, fwd, fx, fy, cx, cy)
                dfw = d0 * fwd[0] + d1 * fwd[1] + d2 * fwd[2]
                b = ((py - y0) // SUB) * nbx + (px - x0) // SUB
                n, T = _composite_order(px, py, bent[boff[b]:boff[b + 1]], tile_ids, rect, zmin,
                                        o, d0, d1, d2, dfw, centers, rots, inv_s, opac, bt, bj, ba, bu, bgg,
                                        oj, ot, oa, ou, og, oT)
                if record:
                    if n <= cap:
                        rec_n[py, px] = n
                        for m in range(n):
                            rec_j[py, px, m] = oj[m]
                    else:
                        rec_n[py, px] = -1
                r = 0.0
                gch = 0.0
                b = 0.0
                dep = 0.0
                wsum = 0.0
                for m in range(n):
                    j = oj[m]
                    w = oa[m] * oT[m]
                    r += w * colors[j, 0]
                    gch += w * colors[j, 1]
                    b += w * colors[j, 2]
                    dep += w * ot[m]
                    wsum += w
                out_color[py, px, 0] = r + T * bg[0]
                out_color[py, px, 1] = gch + T * bg[1]
                out_color[py, px, 2] = b + T * bg[2]
                out_alpha[py, px] = wsum
                out_depth[py, px] = dep / max(wsum, 1e-12)


@njit(parallel=True)
def backward(o, right, down, fwd, fx, fy, cx, cy, width, height, tile, tiles_x, tiles_y,
             tile_off, tile_ids, rect, zmin, centers, rots, inv_s, opac, tile_mask, colors, bg, dl_dcolor,
             slot, n_slots, rec_n, rec_j):
    """Per-disk gradients, shape (n_slots, 18).

    Columns: d center (3), d tangent_u (3), d tangent_v (3), d normal (3),
    d scale (2), d opacity (1), d color (3). Rows of tiles accumulate into
    private buffers that are summed in row order, so the result does not
    depend on thread scheduling. Tiles with ``tile_mask == 0`` are skipped.
    Pixels recorded by ``forward`` (``rec_n >= 0``) reuse its disk order.
    """
    record = rec_n.shape[0] > 0
    buf = np.zeros((tiles_y, n_slots, 18))
    for ty in prange(tiles_y):
        acc = buf[ty]
        for tx in range(tiles_x):
            ti = ty * tiles_x + tx
            start = tile_off[ti]
            cnt = tile_off[ti + 1] - start
            if cnt == 0 or tile_mask[ti] == 0:
                continue
            bt = np.empty(cnt)
            bj = np.empty(cnt, dtype=np.int64)
            ba = np.empty(cnt)
            bu = np.empty((cnt, 2))
            bgg = np.empty(cnt)
            oj = np.empty(cnt, dtype=np.int64)
            ot = np.empty(cnt)
            oa = np.empty(cnt)
            ou = np.empty((cnt, 2))
            og = np.empty(cnt)
            oT = np.empty(cnt)
            x0 = tx * tile
            y0 = ty * tile
            x1 = min(x0 + tile, width) - 1
            y1 = min(y0 + tile, height) - 1
            replay_all = record
            if record:
                for py in range(y0, y1 + 1):
                    for px in range(x0, x1 + 1):
                        if rec_n[py, px] < 0:
                            replay_all = False
            if replay_all:
                nbx = 1
                boff = np.zeros(2, dtype=np.int64)
                bent = np.zeros(0, dtype=np.int64)
            else:
                nbx, boff, bent = _block_lists(start, cnt, rect, x0, y0, x1, y1)
            for py in range(y0, y1 + 1):
                for px in range(x0, x1 + 1):
                    g0 = dl_dcolor[py, px, 0]
                    g1 = dl_dcolor[py, px, 1]
                    g2 = dl_dcolor[py, px, 2]
                    if g0 == 0.0 and g1 == 0.0 and g2 == 0.0:
                        continue
                    d0, d1, d2 = _ray(px, py, right, down, fwd, fx, fy, cx, cy)
                    dfw = d0 * fwd[0] + d1 * fwd[1] + d2 * fwd[2]
                    if record and rec_n[py, px] >= 0:
                        n = _replay(rec_n[py, px], rec_j[py, px], o, d0, d1, d2, centers, rots, inv_s,
                                    opac, oj, ot, oa, ou, og, oT)
                    else:
                        b = ((py - y0) // SUB) * nbx + (px - x0) // SUB
                        n, T = _composite_order(px, py, bent[boff[b]:boff[b + 1]], tile_ids, rect, zmin,
                                                o, d0, d1, d2, dfw, centers, rots, inv_s, opac,
                                                bt, bj, ba, bu, bgg,
                                                oj, ot, oa, ou, og, oT)
                    B0 = bg[0]
                    B1 = bg[1]
                    B2 = bg[2]
                    for m in range(n - 1, -1, -1):
                        j = oj[m]
                        a = oa[m]
                        Tm = oT[m]
                        c0 = colors[j, 0]
                        c1 = colors[j, 1]
                        c2 = colors[j, 2]
                        dlda = Tm * ((c0 - B0) * g0 + (c1 - B1) * g1 + (c2 - B2) * g2)
                        B0 = a * c0 + (1.0 - a) * B0
                        B1 = a * c1 + (1.0 - a) * B1
                        B2 = a * c2 + (1.0 - a) * B2
                        s = slot[j]
                        if s < 0:
                            continue
                        w = a * Tm
                        acc[s, 15] += w * g0
                        acc[s, 16] += w * g1
                        acc[s, 17] += w * g2
                        acc[s, 14] += dlda * og[m]
                        # a = o * exp(-q/2), q = (u1/s1)^2 + (u2/s2)^2
                        dldq = -0.5 * a * dlda
                        is1 = inv_s[j, 0]
                        is2 = inv_s[j, 1]
                        u1 = ou[m, 0]
                        u2 = ou[m, 1]
                        du1 = dldq * 2.0 * u1 * is1 * is1
                        du2 = dldq * 2.0 * u2 * is2 * is2
                        acc[s, 12] += -dldq * 2.0 * u1 * u1 * is1 * is1 * is1
                        acc[s, 13] += -dldq * 2.0 * u2 * u2 * is2 * is2 * is2
                        t = ot[m]
                        v0 = o[0] + t * d0 - centers[j, 0]
                        v1 = o[1] + t * d1 - centers[j, 1]
                        v2 = o[2] + t * d2 - centers[j, 2]
                        nd = rots[j, 0, 2] * d0 + rots[j, 1, 2] * d1 + rots[j, 2, 2] * d2
                        a1d = rots[j, 0, 0] * d0 + rots[j, 1, 0] * d1 + rots[j, 2, 0] * d2
                        a2d = rots[j, 0, 1] * d0 + rots[j, 1, 1] * d1 + rots[j, 2, 1] * d2
                        kn = (du1 * a1d + du2 * a2d) / nd
                        for ax in range(3):
                            acc[s, ax] += kn * rots[j, ax, 2] - du1 * rots[j, ax, 0] - du2 * rots[j, ax, 1]
                        acc[s, 3] += du1 * v0
                        acc[s, 4] += du1 * v1
                        acc[s, 5] += du1 * v2
                        acc[s, 6] += du2 * v0
                        acc[s, 7] += du2 * v1
                        acc[s, 8] += du2 * v2
                        acc[s, 9] -= kn * v0
                        acc[s, 10] -= kn * v1
                        acc[s, 11] -= kn * v2
    out = np.zeros((n_slots, 18))
    for ty in range(tiles_y):
        out += buf[ty]
    return out


@njit(parallel=True)
def select(o, right, down, fwd, fx, fy, cx, cy, width, height, tile, tiles_x,
           tile_off, tile_ids, rect, zmin, centers, rots, inv_s, opac, mask, hit_density, opacity_floor,
           out_idx):
    n_tiles = len(tile_off) - 1
    for ti in prange(n_tiles):
        ty = ti // tiles_x
        tx = ti - ty * tiles_x
        start = tile_off[ti]
        cnt = tile_off[ti + 1] - start
        for py in range(ty * tile, min((ty + 1) * tile, height)):
            for px in range(tx * tile, min((tx + 1) * tile, width)):
                if not mask[py, px]:
                    continue
                d0, d1, d2 = _ray(px, py, right, down, fwd, fx, fy, cx, cy)
                dfw = d0 * fwd[0] + d1 * fwd[1] + d2 * fwd[2]
                best_t = np.inf
                best_j = -1
                for c in range(cnt):
                    e = start + c
                    if best_t * dfw < zmin[e]:
                        break
                    if px < rect[e, 0] or px > rect[e, 1] or py < rect[e, 2] or py > rect[e, 3]:
                        continue
                    j = tile_ids[e]
                    if opac[j] < opacity_floor:
                        continue
                    t, u1, u2, g = _intersect(j, o, d0, d1, d2, centers, rots, inv_s)
                    if t < 0.0 or g < hit_density:
                        continue
                    if t < best_t or (t == best_t and j < best_j):
                        best_t = t
                        best_j = j
                out_idx[py, px] = best_j

