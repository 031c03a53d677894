"""Diffusion of appearance from optimized disks to the ones no view selected.

Unseen disks keep their initialized position and normal. Their color is a
weighted blend of nearby seen disks (inverse distance x normal agreement x
relative opacity, with neighbors more than 60 degrees off ignored), their
radius follows the local spacing, and their opacity drops where disks are
dense. All values are computed from a frozen snapshot and written at the end.
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

NORMAL_GATE = 0.5
MIN_RADIUS = 1e-4


class InpaintError(ValueError):
    pass


@dataclass
class InpaintConfig:
    L: int = 8
    normal_gate: float = NORMAL_GATE
    o0: float = 0.9
    P0: float = 8.0
    rho: float = None  # None: twice the mean 3-NN spacing

    def validate(self):
        if int(self.L) != self.L or self.L < 1:
            raise ValueError(f"L must be a positive integer, got {self.L}")
        if self.normal_gate != NORMAL_GATE:
            raise ValueError(f"normal_gate is fixed at {NORMAL_GATE}")
        if not 0.0 < self.o0 <= 1.0:
            raise ValueError(f"o0 must lie in (0, 1], got {self.o0}")
        if not self.P0 >= 1:
            raise ValueError(f"P0 must be at least 1, got {self.P0}")
        if self.rho is not None and not self.rho > 0:
            raise ValueError(f"rho must be positive, got {self.rho}")
        return self


@dataclass
class InpaintReport:
    n_unseen: int
    n_fallback: int


def find_unseen(gset):
    return np.flatnonzero(~gset.seen)


def _neighbors_excluding_self(tree, points, query_idx, k):
    """k nearest other points for each query index: (distances, indices)."""
    kk = min(k + 1, len(points))
    d, nb = tree.query(points[query_idx], k=kk)
    d = d.reshape(len(query_idx), kk)
    nb = nb.reshape(len(query_idx), kk)
    # drop the query itself (not just the first column, which a duplicate could occupy)
    keep = nb != np.asarray(query_idx)[:, None]
    out_d = np.empty((len(query_idx), kk - 1))
    out_i = np.empty((len(query_idx), kk - 1), dtype=np.int64)
    for r in range(len(query_idx)):
        row = np.flatnonzero(keep[r])[: kk - 1]
        out_d[r] = d[r, row]
        out_i[r] = nb[r, row]
    return out_d, out_i


def color_diffuse(gset, unseen, cfg, return_fallback=False):
    """New colors for ``unseen`` from their L nearest seen disks."""
    unseen = np.asarray(unseen, dtype=np.int64)
    seen_idx = np.flatnonzero(gset.seen)
    if len(seen_idx) == 0:
        raise InpaintError("nothing to diffuse from")
    if len(unseen) == 0:
        out = np.zeros((0, 3))
        return (out, np.zeros(0, dtype=bool)) if return_fallback else out
    k = min(int(cfg.L), len(seen_idx))
    d, nb = cKDTree(gset.centers[seen_idx]).query(gset.centers[unseen], k=k)
    d = d.reshape(len(unseen), k)
    nb = seen_idx[nb.reshape(len(unseen), k)]
    normals = gset.normals()
    dots = np.einsum("nkc,nc->nk", normals[nb], normals[unseen])
    opac = gset.opacities[nb]
    inv = 1.0 / np.maximum(d, 1e-12)
    omax = opac.max(axis=1, keepdims=True)
    ratio = np.divide(opac, omax, out=np.zeros_like(opac), where=omax > 0)
    lam = (inv / inv.sum(axis=1, keepdims=True)) * dots * ratio
    lam = np.where(dots > cfg.normal_gate, lam, 0.0)
    total = lam.sum(axis=1)
    fallback = ~(total > 0)
    colors = np.einsum("nk,nkc->nc", lam, gset.colors[nb]) / np.where(fallback, 1.0, total)[:, None]
    # nothing passes the gate: copy the nearest seen neighbor
    colors[fallback] = gset.colors[nb[fallback, 0]]
    return (colors, fallback) if return_fallback else colors


def size_scale_raw(gset, unseen, cfg):
    """Natural log of the mean distance to the L nearest other disks (seen or not)."""
    unseen = np.asarray(unseen, dtype=np.int64)
    if len(unseen) == 0:
        return np.zeros(0)
    if len(gset) < 2:
        raise InpaintError("size scaling needs at least two disks")
    d, _ = _neighbors_excluding_self(cKDTree(gset.centers), gset.centers, unseen, int(cfg.L))
    return np.log(d.mean(axis=1))


def size_scale(gset, unseen, cfg, tau):
    """Radii for ``unseen``: exp of the raw log value, clamped to [1e-4, tau], both axes equal."""
    raw = size_scale_raw(gset, unseen, cfg)
    r = np.clip(np.exp(raw), MIN_RADIUS, tau)
    return np.repeat(r[:, None], 2, axis=1)


def density_counts(gset, unseen, rho):
    """Number of other disks within ``rho`` of each unseen center."""
    unseen = np.asarray(unseen, dtype=np.int64)
    if len(unseen) == 0:
        return np.zeros(0, dtype=np.int64)
    n = cKDTree(gset.centers).query_ball_point(gset.centers[unseen], r=rho, return_length=True)
    return np.asarray(n, dtype=np.int64) - 1


def opacity_control(gset, unseen, cfg, rho):
    P = density_counts(gset, unseen, rho)
    return cfg.o0 / np.maximum(1.0, P / cfg.P0)


def gaussian_inpaint(gset, cfg, tau, rho=None):
    """Return a copy of ``gset`` with color, radius and opacity filled in for unseen disks.

    ``rho`` defaults to ``cfg.rho``; one of them must be set.
    """
    cfg.validate()
    rho = cfg.rho if rho is None else rho
    if rho is None:
        raise ValueError("gaussian_inpaint needs a density radius rho")
    unseen = find_unseen(gset)
    out = gset.copy()
    if len(unseen) == 0:
        return out, InpaintReport(0, 0)
    # every value is computed from the untouched input before anything is written
    colors, fallback = color_diffuse(gset, unseen, cfg, return_fallback=True)
    scales = size_scale(gset, unseen, cfg, tau)
    opac = opacity_control(gset, unseen, cfg, rho)
    out.colors[unseen] = colors
    out.scales[unseen] = scales
    out.opacities[unseen] = opac
    return out, InpaintReport(int(len(unseen)), int(fallback.sum()))
