"""View schedule, tri-state mask classification and final-image compositing.

For each pixel that hits the surface, the disk responsible for it is
compared against the best viewing cosine recorded so far. Disks never
observed are generated, disks seen at a strictly better angle now are
updated, everything else is kept.
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .camera import Camera
from .field import FAR_BOUND
from .rasterizer import VisibleSet, first_hit_map, view_cosines

OFF_SURFACE = 0
KEEP = 1
UPDATE = 2
GENERATE = 3

LABEL_NAMES = {OFF_SURFACE: "off_surface", KEEP: "keep", UPDATE: "update", GENERATE: "generate"}

DEFAULT_RADIUS = 2.5
DEFAULT_FOV = np.radians(50.0)
DEFAULT_ELEVATION = np.radians(20.0)
DEFAULT_VIEWS = 16


class ScheduleError(ValueError):
    pass


@dataclass
class ViewSchedule:
    cameras: list
    radius: float
    pattern: list  # (azimuth, elevation) per camera, radians

    def __len__(self):
        return len(self.cameras)

    def __iter__(self):
        return iter(self.cameras)


@dataclass
class TriMask:
    """Per-pixel labels plus the disk each hit pixel was attributed to.

    ``assignment`` is -1 off the surface; ``sim`` is the viewing cosine of
    the assigned disk (0 off the surface).
    """

    labels: np.ndarray
    assignment: np.ndarray
    sim: np.ndarray

    @property
    def shape(self):
        return self.labels.shape

    def count(self, label):
        return int(np.count_nonzero(self.labels == label))

    def counts(self):
        return {name: self.count(lab) for lab, name in LABEL_NAMES.items()}

    def writable(self):
        """Pixels the appearance provider may change."""
        return (self.labels == GENERATE) | (self.labels == UPDATE)


def _camera_on_sphere(azimuth, elevation, radius, fov_y, width, height):
    ce = np.cos(elevation)
    pos = radius * np.array([ce * np.cos(azimuth), ce * np.sin(azimuth), np.sin(elevation)])
    # exact zeros keep polar cameras exactly on the axis
    pos[np.abs(pos) < 1e-12] = 0.0
    return Camera.look_at(pos, (0.0, 0.0, 0.0), fov_y=fov_y, width=width, height=height)


def _build(pattern, radius, fov_y, width, height):
    if radius <= 1.0:
        raise ScheduleError(f"schedule radius must exceed 1 (outside the unit cube), got {radius}")
    if len(pattern) < 2:
        raise ScheduleError("schedule requires ≥ 2 cameras")
    cams = [_camera_on_sphere(az, el, radius, fov_y, width, height) for az, el in pattern]
    return ViewSchedule(cams, float(radius), [(float(a), float(e)) for a, e in pattern])


def make_schedule(n_azimuth, elevations, radius, fov_y=DEFAULT_FOV, width=256, height=256):
    """Cameras on rings of constant elevation, ring by ring, each aimed at the origin."""
    if n_azimuth < 2:
        raise ScheduleError(f"n_azimuth must be at least 2, got {n_azimuth}")
    az = 2.0 * np.pi * np.arange(n_azimuth) / n_azimuth
    pattern = [(a, float(e)) for e in elevations for a in az]
    return _build(pattern, radius, fov_y, width, height)


def schedule_for_count(n_views=DEFAULT_VIEWS, radius=DEFAULT_RADIUS, fov_y=DEFAULT_FOV, width=256,
                       height=256, elevation=DEFAULT_ELEVATION):
    """``n_views`` cameras: two polar views plus rings at -/+ ``elevation``.

    With fewer than 6 views the polar pair is dropped; an odd remainder puts
    the extra camera on the upper ring. 16 views gives 7 + 7 + 2.
    """
    n_views = int(n_views)
    if n_views < 2:
        raise ScheduleError("schedule requires ≥ 2 cameras")
    n_polar = 2 if n_views >= 6 else 0
    rest = n_views - n_polar
    rings = [(-elevation, rest // 2), (elevation, rest - rest // 2)] if rest >= 4 else [(elevation, rest)]
    pattern = []
    for el, n in rings:
        # stagger the second ring by half a step so the rings interleave
        shift = np.pi / n if len(pattern) else 0.0
        pattern += [(shift + 2.0 * np.pi * k / n, el) for k in range(n)]
    if n_polar:
        pattern += [(0.0, np.pi / 2), (0.0, -np.pi / 2)]
    return _build(pattern, radius, fov_y, width, height)


def default_schedule(width=256, height=256):
    return schedule_for_count(DEFAULT_VIEWS, width=width, height=height)


def surface_points(depth, cam):
    """World points for hit pixels, shape (n_hit, 3), in row-major pixel order."""
    dirs = cam.ray_directions()[depth.hit_mask]
    return cam.position[None, :] + depth.depth[depth.hit_mask][:, None] * dirs


def classify_masks(depth, cam, gset, field=None):
    """Label every pixel GENERATE / UPDATE / KEEP / OFF_SURFACE.

    A hit pixel is attributed to its first-hit disk, or to the disk whose
    center is nearest its surface point when no disk qualifies. The pixel's
    similarity is that disk's viewing cosine (normal flipped toward the
    camera, direction from the disk center), the same quantity the record
    stores, so re-classifying an already recorded view is a fixed point.
    ``field`` is accepted for interface symmetry; the surface point comes
    from ``depth``.
    """
    H, W = depth.height, depth.width
    if (H, W) != (cam.height, cam.width):
        raise ValueError(f"depth map {(H, W)} does not match camera {(cam.height, cam.width)}")
    hit = np.asarray(depth.hit_mask, dtype=bool)
    labels = np.full((H, W), OFF_SURFACE, dtype=np.uint8)
    assign = np.full((H, W), -1, dtype=np.int64)
    sim = np.zeros((H, W))
    if not hit.any() or len(gset) == 0:
        return TriMask(labels, assign, sim)
    first = first_hit_map(gset, cam, hit)
    missing = hit & (first < 0)
    if missing.any():
        pts = surface_points(type(depth)(depth.depth, missing), cam)
        _, nearest = cKDTree(gset.centers).query(pts)
        first[missing] = nearest
    assign[hit] = first[hit]
    idx, inv = np.unique(assign[hit], return_inverse=True)
    cos = view_cosines(gset, idx, cam)
    sim[hit] = cos[inv]
    g = assign[hit]
    lab = np.where(~gset.seen[g], GENERATE, np.where(sim[hit] > gset.best_view_cos[g], UPDATE, KEEP))
    labels[hit] = lab
    return TriMask(labels, assign, sim)


def assigned_visible(trimask, cam, gset):
    """VisibleSet of the disks attributed to writable (GENERATE/UPDATE) pixels."""
    idx = np.unique(trimask.assignment[trimask.writable()])
    idx = idx[idx >= 0]
    return VisibleSet(idx, view_cosines(gset, idx, cam))


def surface_layer(gset, cam, depth, pixel_mask, tol):
    """Disks whose center projects into ``pixel_mask`` and lies on the traced surface.

    A center counts when its camera depth is within ``tol`` of the surface
    depth at its pixel, i.e. it belongs to the nearest layer seen from
    ``cam``. Used to widen first-hit selection; see the pipeline.
    """
    if len(gset) == 0:
        return VisibleSet.empty()
    mask = np.asarray(pixel_mask, dtype=bool) & depth.hit_mask
    u, v, z = cam.project(gset.centers)
    with np.errstate(invalid="ignore"):
        inside = (z > 0) & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    cand = np.flatnonzero(inside)
    px = np.floor(u[cand]).astype(np.int64)
    py = np.floor(v[cand]).astype(np.int64)
    ok = mask[py, px]
    cand, px, py = cand[ok], px[ok], py[ok]
    # surface camera depth along the pixel ray
    fwd = cam.basis()[2]
    zs = depth.depth[py, px] * (cam.ray_directions()[py, px] @ fwd)
    cand = cand[np.abs(z[cand] - zs) <= tol]
    return VisibleSet(cand, view_cosines(gset, cand, cam))


def update_similarity_record(gset, visible):
    idx = np.asarray(visible.gaussian_indices, dtype=np.int64)
    gset.seen[idx] = True
    gset.best_view_cos[idx] = np.maximum(gset.best_view_cos[idx], visible.view_cos)


def composite_final(rendered, inpainted, mask):
    """KEEP and OFF_SURFACE pixels from ``rendered``, the rest from ``inpainted``."""
    rendered = np.asarray(rendered)
    inpainted = np.asarray(inpainted)
    labels = getattr(mask, "labels", mask)
    if rendered.shape != inpainted.shape or rendered.shape[:2] != labels.shape:
        raise ValueError(f"dimension mismatch: rendered {rendered.shape}, inpainted {inpainted.shape}, "
                         f"mask {labels.shape}")
    take = (labels == GENERATE) | (labels == UPDATE)
    if rendered.ndim == 3:
        take = take[:, :, None]
    return np.where(take, inpainted, rendered)


def quantize_depth(depth, far_bound=FAR_BOUND):
    """16-bit millimeter depth over [0, far_bound]; misses map to 0."""
    d = np.where(depth.hit_mask, depth.depth, 0.0)
    mm = np.round(np.clip(d, 0.0, far_bound) * 1000.0)
    return np.clip(mm, 0, 65535).astype(np.uint16)


def mask_image(trimask):
    """8-bit mask with 0 / 85 / 170 / 255 for off-surface / keep / update / generate."""
    return (trimask.labels.astype(np.uint16) * 85).astype(np.uint8)


def save_depth_png(depth, path, far_bound=FAR_BOUND):
    from PIL import Image

    Image.fromarray(quantize_depth(depth, far_bound)).save(path)


def save_mask_png(trimask, path):
    from PIL import Image

    Image.fromarray(mask_image(trimask), mode="L").save(path)
