"""Vectorized numpy versions of the tile kernels.

Same signatures and semantics as ``_numba``: each tile is evaluated as a
(pixels x candidates) block instead of a per-pixel loop.
"""

import numpy as np

from .common import ALPHA_CUTOFF, MIN_DENOM, NEAR_T, T_MIN


def _tile_pixels(tx, ty, tile, width, height):
    xs = np.arange(tx * tile, min((tx + 1) * tile, width))
    ys = np.arange(ty * tile, min((ty + 1) * tile, height))
    py, px = np.meshgrid(ys, xs, indexing="ij")
    return py.ravel(), px.ravel()


def _rays(px, py, right, down, fwd, fx, fy, cx, cy):
    x = (px + 0.5 - cx) / fx
    y = (py + 0.5 - cy) / fy
    d = fwd[None, :] + x[:, None] * right[None, :] + y[:, None] * down[None, :]
    return d / np.sqrt(np.sum(d * d, axis=1, keepdims=True))


def _intersect(o, d, ids, centers, rots, inv_s):
    """(P, K) arrays: ray parameter (nan where invalid), local coords, density."""
    R = rots[ids]
    n = R[:, :, 2]
    nd = d @ n.T
    e = centers[ids] - o
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.sum(n * e, axis=1)[None, :] / nd
    ok = (np.abs(nd) >= MIN_DENOM) & (t > NEAR_T)
    t = np.where(ok, t, np.nan)
    v = t[:, :, None] * d[:, None, :] - e[None, :, :]
    u1 = np.einsum("pkc,kc->pk", v, R[:, :, 0])
    u2 = np.einsum("pkc,kc->pk", v, R[:, :, 1])
    s = inv_s[ids]
    with np.errstate(invalid="ignore"):
        g = np.exp(-0.5 * ((u1 * s[:, 0]) ** 2 + (u2 * s[:, 1]) ** 2))
    return t, u1, u2, g, v, nd, R, ok


def _sorted_contributions(o, d, ids, centers, rots, inv_s, opac):
    t, u1, u2, g, v, nd, R, ok = _intersect(o, d, ids, centers, rots, inv_s)
    a = opac[ids][None, :] * np.where(ok, g, 0.0)
    valid = ok & (a >= ALPHA_CUTOFF)
    key = np.where(valid, t, np.inf)
    # ties in ray parameter resolve to the lower disk index
    order = np.lexsort((np.broadcast_to(ids, key.shape), key), axis=1)
    take = lambda arr: np.take_along_axis(arr, order, axis=1)
    a_s = np.where(take(valid), take(a), 0.0)
    one_minus = 1.0 - a_s
    T_before = np.ones_like(a_s)
    if a_s.shape[1] > 1:
        T_before[:, 1:] = np.cumprod(one_minus, axis=1)[:, :-1]
    used = take(valid) & (T_before >= T_MIN)
    a_s = np.where(used, a_s, 0.0)
    return order, a_s, T_before, used, take, (t, u1, u2, g, v, nd, R)


def forward(o, right, down, fwd, fx, fy, cx, cy, width, height, tile, tiles_x,
            tile_off, tile_ids, rect, zmin, centers, rots, inv_s, opac, tile_mask, colors, bg,
            out_color, out_depth, out_alpha, rec_n=None, rec_j=None):
    # the order records are a numba-side cache; this backend re-sorts instead
    for ti in range(len(tile_off) - 1):
        if not tile_mask[ti]:
            continue
        ty, tx = divmod(ti, tiles_x)
        py, px = _tile_pixels(tx, ty, tile, width, height)
        ids = tile_ids[tile_off[ti]:tile_off[ti + 1]]
        if len(ids) == 0:
            out_color[py, px] = bg
            out_depth[py, px] = 0.0
            out_alpha[py, px] = 0.0
            continue
        d = _rays(px, py, right, down, fwd, fx, fy, cx, cy)
        order, a_s, T_before, used, take, (t, *_rest) = _sorted_contributions(
            o, d, ids, centers, rots, inv_s, opac)
        w = a_s * T_before
        T_final = np.prod(np.where(used, 1.0 - a_s, 1.0), axis=1)
        cols = colors[ids][order]
        t_s = np.where(used, take(np.nan_to_num(t)), 0.0)
        wsum = w.sum(axis=1)
        out_color[py, px] = np.einsum("pk,pkc->pc", w, cols) + T_final[:, None] * bg[None, :]
        out_alpha[py, px] = wsum
        out_depth[py, px] = (w * t_s).sum(axis=1) / np.maximum(wsum, 1e-12)


def backward(o, right, down, fwd, fx, fy, cx, cy, width, height, tile, tiles_x, tiles_y,
             tile_off, tile_ids, rect, zmin, centers, rots, inv_s, opac, tile_mask, colors, bg, dl_dcolor,
             slot, n_slots, rec_n=None, rec_j=None):
    out = np.zeros((n_slots, 18))
    for ti in range(len(tile_off) - 1):
        ty, tx = divmod(ti, tiles_x)
        ids = tile_ids[tile_off[ti]:tile_off[ti + 1]]
        if len(ids) == 0 or not tile_mask[ti]:
            continue
        py, px = _tile_pixels(tx, ty, tile, width, height)
        gcol = dl_dcolor[py, px]
        d = _rays(px, py, right, down, fwd, fx, fy, cx, cy)
        order, a_s, T_before, used, take, (t, u1, u2, g, v, nd, R) = _sorted_contributions(
            o, d, ids, centers, rots, inv_s, opac)
        K = a_s.shape[1]
        cols = colors[ids][order]
        B = np.broadcast_to(bg, (len(py), 3)).copy()
        dlda = np.zeros_like(a_s)
        for m in range(K - 1, -1, -1):
            um = used[:, m]
            if not um.any():
                continue
            am = a_s[:, m:m + 1]
            cm = cols[:, m]
            dlda[:, m] = np.where(um, T_before[:, m] * np.sum((cm - B) * gcol, axis=1), 0.0)
            B = np.where(um[:, None], am * cm + (1.0 - am) * B, B)
        # back to candidate order
        inv = np.empty_like(order)
        np.put_along_axis(inv, order, np.arange(K)[None, :].repeat(len(py), 0), axis=1)
        back = lambda arr: np.take_along_axis(arr, inv, axis=1)
        dlda = back(dlda)
        a = back(a_s)
        w = a * back(T_before)
        usedc = back(used)
        dldq = -0.5 * a * dlda
        s = inv_s[ids]
        du1 = np.where(usedc, dldq * 2.0 * np.nan_to_num(u1) * s[:, 0] ** 2, 0.0)
        du2 = np.where(usedc, dldq * 2.0 * np.nan_to_num(u2) * s[:, 1] ** 2, 0.0)
        vv = np.nan_to_num(v)
        tu, tv, n = R[:, :, 0], R[:, :, 1], R[:, :, 2]
        a1d = d @ tu.T
        a2d = d @ tv.T
        with np.errstate(divide="ignore", invalid="ignore"):
            kn = np.where(usedc, (du1 * a1d + du2 * a2d) / nd, 0.0)
        g_ = np.zeros((len(ids), 18))
        g_[:, 0:3] = kn.sum(0)[:, None] * n - du1.sum(0)[:, None] * tu - du2.sum(0)[:, None] * tv
        g_[:, 3:6] = np.einsum("pk,pkc->kc", du1, vv)
        g_[:, 6:9] = np.einsum("pk,pkc->kc", du2, vv)
        g_[:, 9:12] = -np.einsum("pk,pkc->kc", kn, vv)
        g_[:, 12] = np.sum(-dldq * 2.0 * np.nan_to_num(u1) ** 2 * usedc, axis=0) * s[:, 0] ** 3
        g_[:, 13] = np.sum(-dldq * 2.0 * np.nan_to_num(u2) ** 2 * usedc, axis=0) * s[:, 1] ** 3
        g_[:, 14] = np.sum(np.where(usedc, dlda * np.nan_to_num(g), 0.0), axis=0)
        g_[:, 15:18] = np.einsum("pk,pc->kc", w, gcol)
        sl = slot[ids]
        keep = sl >= 0
        np.add.at(out, sl[keep], g_[keep])
    return out


def select(o, right, down, fwd, fx, fy, cx, cy, width, height, tile, tiles_x,
           tile_off, tile_ids, rect, zmin, centers, rots, inv_s, opac, mask, hit_density, opacity_floor,
           out_idx):
    for ti in range(len(tile_off) - 1):
        ty, tx = divmod(ti, tiles_x)
        py, px = _tile_pixels(tx, ty, tile, width, height)
        sel = mask[py, px]
        if not sel.any():
            continue
        py, px = py[sel], px[sel]
        ids = tile_ids[tile_off[ti]:tile_off[ti + 1]]
        if len(ids) == 0:
            out_idx[py, px] = -1
            continue
        d = _rays(px, py, right, down, fwd, fx, fy, cx, cy)
        t, u1, u2, g, v, nd, R, ok = _intersect(o, d, ids, centers, rots, inv_s)
        qual = ok & (g >= hit_density) & (opac[ids] >= opacity_floor)[None, :]
        key = np.where(qual, t, np.inf)
        best = np.lexsort((np.broadcast_to(ids, key.shape), key), axis=1)[:, 0]
        found = np.isfinite(key[np.arange(len(py)), best])
        out_idx[py, px] = np.where(found, ids[best], -1)
