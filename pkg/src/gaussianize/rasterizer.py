"""Tile-based splatting of 2D Gaussian disks, its adjoint, and first-hit selection.

Each disk is evaluated at the exact intersection of the pixel ray with the
disk plane. Per pixel, disks are composited front to back in order of ray
parameter with weight ``o * G * T``; contributions below 1/255 are skipped
and a pixel stops once its transmittance falls below 1e-4.
"""

from dataclasses import dataclass

import numpy as np

from .geometry import normalize, quat_to_matrix
from .kernels import impl
from .kernels.common import ALPHA_CUTOFF, TILE

# Mahalanobis radius beyond which o * G < 1/255 for any o <= 1
RENDER_RADIUS = float(np.sqrt(2.0 * np.log(1.0 / ALPHA_CUTOFF))) + 0.05
HIT_DENSITY = 0.1
# per-pixel contributions kept from the forward pass for the backward pass
RECORD_CAP = 32
OPACITY_FLOOR = 0.05


@dataclass
class RenderBuffers:
    color: np.ndarray
    depth: np.ndarray
    alpha: np.ndarray
    background: np.ndarray


@dataclass
class VisibleSet:
    gaussian_indices: np.ndarray
    view_cos: np.ndarray

    def __len__(self):
        return len(self.gaussian_indices)

    @classmethod
    def empty(cls):
        return cls(np.zeros(0, dtype=np.int64), np.zeros(0))

    def subset(self, keep):
        keep = np.asarray(keep, dtype=bool)
        return VisibleSet(self.gaussian_indices[keep], self.view_cos[keep])

    def union(self, other):
        idx = np.concatenate([self.gaussian_indices, other.gaussian_indices])
        cos = np.concatenate([self.view_cos, other.view_cos])
        uniq, inv = np.unique(idx, return_inverse=True)
        best = np.full(len(uniq), -np.inf)
        np.maximum.at(best, inv, cos)
        return VisibleSet(uniq, best)


class _Frame:
    """Camera constants, disk arrays and tile lists for one (set, camera) pair.

    ``radius`` is the Mahalanobis extent beyond which a disk is ignored.
    """

    def __init__(self, gset, cam, radius, tile=TILE):
        self.cam = cam
        self.tile = tile
        right, down, fwd, (fx, fy, cx, cy) = cam.basis()
        self.cam_args = (cam.position.copy(), right.copy(), down.copy(), fwd.copy(),
                         float(fx), float(fy), float(cx), float(cy), int(cam.width), int(cam.height))
        self.tiles_x = -(-cam.width // tile)
        self.tiles_y = -(-cam.height // tile)
        m = len(gset)
        self.centers = np.ascontiguousarray(gset.centers, dtype=np.float64)
        self.rots = np.ascontiguousarray(quat_to_matrix(gset.quats)) if m else np.zeros((0, 3, 3))
        self.inv_s = np.ascontiguousarray(1.0 / gset.scales) if m else np.zeros((0, 2))
        self.opac = np.ascontiguousarray(gset.opacities, dtype=np.float64)
        self.colors = np.ascontiguousarray(gset.colors, dtype=np.float64)
        self.tile_off, self.tile_ids, self.rect = self._bin(gset.scales, radius)
        self.tile_mask = np.ones(self.tiles_x * self.tiles_y, dtype=np.uint8)
        self.rec_n = np.zeros((0, 0), dtype=np.int32)
        self.rec_j = np.zeros((0, 0, 1), dtype=np.int32)

    def _bin(self, scales, radius):
        cam = self.cam
        n_tiles = self.tiles_x * self.tiles_y
        m = len(self.centers)
        self.zmin = np.zeros(0)
        if m == 0:
            return np.zeros(n_tiles + 1, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros((0, 4), dtype=np.int32)
        # conservative footprint: the in-plane rectangle around the cutoff
        # ellipse is convex, so its projection lies inside the hull of its
        # four projected corners
        R = self.rots
        au = (radius * scales[:, 0:1]) * R[:, :, 0]
        av = (radius * scales[:, 1:2]) * R[:, :, 1]
        corners = self.centers[:, None, :] + np.stack([au + av, au - av, -au + av, -au - av], axis=1)
        u, v, z = cam.project(corners)
        behind = z <= 1e-9
        all_behind = behind.all(axis=1)
        straddle = behind.any(axis=1) & ~all_behind
        with np.errstate(invalid="ignore"):
            umin = np.where(straddle, -np.inf, np.nanmin(np.where(behind, np.inf, u), axis=1))
            umax = np.where(straddle, np.inf, np.nanmax(np.where(behind, -np.inf, u), axis=1))
            vmin = np.where(straddle, -np.inf, np.nanmin(np.where(behind, np.inf, v), axis=1))
            vmax = np.where(straddle, np.inf, np.nanmax(np.where(behind, -np.inf, v), axis=1))
        # pixel centers lie at integer + 0.5
        px0 = np.clip(np.ceil(np.clip(umin, -1e9, 1e9) - 0.5), 0, cam.width - 1)
        px1 = np.clip(np.floor(np.clip(umax, -1e9, 1e9) - 0.5), -1, cam.width - 1)
        py0 = np.clip(np.ceil(np.clip(vmin, -1e9, 1e9) - 0.5), 0, cam.height - 1)
        py1 = np.clip(np.floor(np.clip(vmax, -1e9, 1e9) - 0.5), -1, cam.height - 1)
        keep = ~all_behind & (px1 >= px0) & (py1 >= py0) & (umax >= -0.5) & (vmax >= -0.5)
        keep &= (umin <= cam.width + 0.5) & (vmin <= cam.height + 0.5)
        ids = np.flatnonzero(keep)
        tx0 = (px0[ids] // self.tile).astype(np.int64)
        tx1 = (px1[ids] // self.tile).astype(np.int64)
        ty0 = (py0[ids] // self.tile).astype(np.int64)
        ty1 = (py1[ids] // self.tile).astype(np.int64)
        nx = tx1 - tx0 + 1
        ny = ty1 - ty0 + 1
        counts = nx * ny
        total = int(counts.sum())
        owner = np.repeat(np.arange(len(ids)), counts)
        local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
        tx = tx0[owner] + local % nx[owner]
        ty = ty0[owner] + local // nx[owner]
        tile_of = ty * self.tiles_x + tx
        # within a tile, disks are ordered by the nearest camera depth any of
        # their contributions can have; kernels use this to finish pixels early
        zc = (self.centers - cam.position[None, :]) @ self.cam_args[3]
        reach = radius * scales.max(axis=1)
        self.zmin = zc - reach - 1e-9 * (1.0 + np.abs(zc))
        ent = ids[owner]
        order = np.lexsort((ent, self.zmin[ent], tile_of))
        tile_ids = ent[order].astype(np.int64)
        tile_off = np.zeros(n_tiles + 1, dtype=np.int64)
        np.cumsum(np.bincount(tile_of, minlength=n_tiles), out=tile_off[1:])
        # per-entry copies keep the kernels' candidate scan sequential in memory
        rect = np.stack([px0, px1, py0, py1], axis=1).astype(np.int32)[tile_ids]
        self.zmin = np.ascontiguousarray(self.zmin[tile_ids])
        return tile_off, tile_ids, np.ascontiguousarray(rect)

    def active_tiles(self, active):
        """uint8 flag per tile: its list contains one of the ``active`` disks."""
        flag = np.zeros(len(self.centers), dtype=bool)
        flag[np.asarray(active, dtype=np.int64)] = True
        tile_of = np.repeat(np.arange(len(self.tile_off) - 1), np.diff(self.tile_off))
        mask = np.zeros(len(self.tile_off) - 1, dtype=np.uint8)
        mask[tile_of[flag[self.tile_ids]]] = 1
        return mask

    def kernel_args(self):
        return self.cam_args + (self.tile, self.tiles_x)

    def disk_args(self):
        return (self.tile_off, self.tile_ids, self.rect, self.zmin, self.centers, self.rots, self.inv_s, self.opac)


def render(gset, cam, background=(0.0, 0.0, 0.0)):
    """Composite ``gset`` into color, expected depth and alpha buffers."""
    return render_with_frame(gset, cam, background)[0]


def render_with_frame(gset, cam, background=(0.0, 0.0, 0.0), active=None, base=None):
    """``render`` plus the binned frame, which ``render_backward`` can reuse.

    ``base`` is a (RenderBuffers, frame) pair from an earlier call on a set
    that differs from ``gset`` only in the ``active`` disks. Tiles that hold
    an active disk in neither frame cannot have changed and are copied from
    it instead of being composited again.
    """
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    frame = _Frame(gset, cam, RENDER_RADIUS)
    if active is not None and base is not None:
        prev_buf, prev_frame = base
        frame.tile_mask = frame.active_tiles(active) | prev_frame.active_tiles(active)
        color, depth, alpha = prev_buf.color.copy(), prev_buf.depth.copy(), prev_buf.alpha.copy()
    else:
        H, W = cam.height, cam.width
        color, depth, alpha = np.empty((H, W, 3)), np.empty((H, W)), np.empty((H, W))
    H, W = cam.height, cam.width
    # -1 marks pixels the backward pass has to re-sort (tiles skipped here)
    frame.rec_n = np.full((H, W), -1, dtype=np.int32)
    frame.rec_j = np.empty((H, W, RECORD_CAP), dtype=np.int32)
    impl.forward(*frame.kernel_args(), *frame.disk_args(), frame.tile_mask, frame.colors, bg,
                 color, depth, alpha, frame.rec_n, frame.rec_j)
    return RenderBuffers(color, depth, alpha, bg), frame


def _quat_grad(quats, dR):
    """Chain d loss / d rotation matrix through q -> q/|q| -> R."""
    norm = np.linalg.norm(quats, axis=1, keepdims=True)
    q = quats / norm
    w, x, y, z = q.T
    zero = np.zeros_like(w)
    dw = np.stack([[zero, -z, y], [z, zero, -x], [-y, x, zero]])
    dx = np.stack([[zero, y, z], [y, -2 * x, -w], [z, w, -2 * x]])
    dy = np.stack([[-2 * y, x, w], [x, zero, z], [-w, z, -2 * y]])
    dz = np.stack([[-2 * z, -w, x], [w, -2 * z, y], [x, y, zero]])
    gq = np.stack([2 * np.einsum("abm,mab->m", dq, dR) for dq in (dw, dx, dy, dz)], axis=1)
    gq -= q * np.sum(q * gq, axis=1, keepdims=True)
    return gq / norm


def render_backward(gset, cam, dl_dcolor, background=(0.0, 0.0, 0.0), active=None, frame=None):
    """Gradients of ``sum(dl_dcolor * render(gset).color)`` per disk attribute.

    ``active`` restricts accumulation to a subset of disk indices; the
    returned arrays then have one row per active index (in the given order).
    ``frame`` is the one returned by ``render_with_frame`` for the same set
    and camera, if available.
    """
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    dl = np.ascontiguousarray(dl_dcolor, dtype=np.float64).reshape(cam.height, cam.width, 3)
    m = len(gset)
    if active is None:
        active = np.arange(m)
    active = np.asarray(active, dtype=np.int64)
    slot = np.full(m, -1, dtype=np.int64)
    slot[active] = np.arange(len(active))
    if frame is None:
        frame = _Frame(gset, cam, RENDER_RADIUS)
    # tiles without an active disk cannot contribute to active gradients
    raw = impl.backward(*frame.cam_args, frame.tile, frame.tiles_x, frame.tiles_y,
                        *frame.disk_args(), frame.active_tiles(active), frame.colors, bg, dl, slot, len(active),
                        frame.rec_n, frame.rec_j)
    dR = np.stack([raw[:, 3:6], raw[:, 6:9], raw[:, 9:12]], axis=2)
    return {
        "centers": raw[:, 0:3],
        "quats": _quat_grad(gset.quats[active], dR) if len(active) else np.zeros((0, 4)),
        "scales": raw[:, 12:14],
        "opacities": raw[:, 14],
        "colors": raw[:, 15:18],
    }


def rendered_weight(gset, cam, idx):
    """Total compositing weight ``o * G * T`` each disk in ``idx`` puts into the image.

    Zero means the disk does not show up in any pixel of this view.
    """
    idx = np.asarray(idx, dtype=np.int64)
    if len(idx) == 0:
        return np.zeros(0)
    # d color / d disk color is the weight sum when every pixel has unit upstream
    ones = np.ones((cam.height, cam.width, 3))
    return render_backward(gset, cam, ones, active=idx)["colors"][:, 0]


def first_hit_map(gset, cam, pixel_mask, hit_density=HIT_DENSITY, opacity_floor=OPACITY_FLOOR):
    """Per-pixel index of the nearest qualifying disk (-1 where none or unmasked)."""
    mask = np.ascontiguousarray(pixel_mask, dtype=np.bool_)
    if mask.shape != (cam.height, cam.width):
        raise ValueError(f"mask shape {mask.shape} does not match camera {(cam.height, cam.width)}")
    out = np.full(mask.shape, -1, dtype=np.int64)
    if len(gset) == 0 or not mask.any():
        return out
    radius = float(np.sqrt(2.0 * np.log(1.0 / hit_density))) + 0.05
    frame = _Frame(gset, cam, radius)
    impl.select(*frame.kernel_args(), *frame.disk_args(), mask, float(hit_density),
                float(opacity_floor), out)
    return out


def view_cosines(gset, idx, cam):
    """|cos| between disk normals and the direction from disk center to camera."""
    idx = np.asarray(idx, dtype=np.int64)
    n = quat_to_matrix(gset.quats[idx])[:, :, 2]
    to_cam = normalize(cam.position[None, :] - gset.centers[idx])
    return np.clip(np.abs(np.sum(n * to_cam, axis=1)), 0.0, 1.0)


def select_first_hit(gset, cam, pixel_mask, hit_density=HIT_DENSITY, opacity_floor=OPACITY_FLOOR):
    hits = first_hit_map(gset, cam, pixel_mask, hit_density, opacity_floor)
    idx = np.unique(hits[hits >= 0])
    return VisibleSet(idx, view_cosines(gset, idx, cam))


def save_png(buffers, path):
    """8-bit RGB dump of a render."""
    from PIL import Image

    img = np.clip(np.round(buffers.color * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img, mode="RGB").save(path)
