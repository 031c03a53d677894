"""Point-cloud ingestion and a deterministic unsigned distance field.

The distance field is a kd-tree nearest-neighbour distance over the input
samples. Off-surface normals are central finite differences of that
distance; on-surface normals come from k-NN PCA oriented along a minimum
spanning tree.
"""

import logging
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import breadth_first_order, connected_components, minimum_spanning_tree
from scipy.spatial import cKDTree

from .ply import PlyError, read_ply

logger = logging.getLogger(__name__)

MIN_POINTS = 16
MISS_DEPTH = np.inf
FD_STEP = 1e-3
SURFACE_EPS = 2e-3
FAR_BOUND = 10.0
EPS_PER_SPACING = 2.5


class PointCloudError(ValueError):
    """Unreadable or degenerate point-cloud input."""


class SingularGradientError(ValueError):
    pass


@dataclass
class PointCloud:
    """Normalized points plus the transform that undoes the normalization.

    ``original = points / scale + offset``.
    """

    points: np.ndarray
    normals: Optional[np.ndarray] = None
    scale: float = 1.0
    offset: np.ndarray = dc_field(default_factory=lambda: np.zeros(3))

    def __len__(self):
        return len(self.points)

    @classmethod
    def from_array(cls, points, normals=None, normalize=True):
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(points)):
            raise PointCloudError("point coordinates must be finite")
        if normals is not None:
            normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
            if len(normals) != len(points):
                raise PointCloudError("normals and points differ in length")
            norm = np.linalg.norm(normals, axis=1, keepdims=True)
            if np.any(norm < 1e-12) or not np.all(np.isfinite(norm)):
                raise PointCloudError("normals must be finite and non-zero")
            normals = normals / norm
        if not normalize:
            return cls(points, normals)
        offset = points.mean(axis=0)
        extent = float((points.max(axis=0) - points.min(axis=0)).max())
        if extent <= 0:
            raise PointCloudError("point cloud has zero extent")
        scale = 1.0 / extent
        return cls((points - offset) * scale, normals, scale, offset)

    def denormalize(self, p):
        return np.asarray(p) / self.scale + self.offset


def load_point_cloud(path, target_count=None, seed=0):
    """Read a PLY or XYZ file into a normalized :class:`PointCloud`.

    Clouds larger than ``target_count`` are subsampled without replacement
    using a generator seeded with ``seed``.
    """
    path = Path(path)
    if not path.is_file():
        raise PointCloudError(f"cannot read point cloud: {path} does not exist")
    try:
        with open(path, "rb") as f:
            magic = f.read(3)
    except OSError as exc:
        raise PointCloudError(f"cannot read point cloud {path}: {exc}") from None

    normals = None
    if magic == b"ply":
        try:
            cols = read_ply(path)
        except PlyError as exc:
            raise PointCloudError(f"{path}: {exc}") from None
        if not all(k in cols for k in "xyz"):
            raise PointCloudError(f"{path}: vertex element lacks x, y, z properties")
        points = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
        if all(k in cols for k in ("nx", "ny", "nz")):
            normals = np.stack([cols["nx"], cols["ny"], cols["nz"]], axis=1)
    else:
        try:
            data = np.loadtxt(path, ndmin=2)
        except ValueError as exc:
            raise PointCloudError(f"{path}: malformed XYZ data ({exc})") from None
        if data.shape[1] < 3:
            raise PointCloudError(f"{path}: expected at least 3 columns, found {data.shape[1]}")
        points = data[:, :3]
        if data.shape[1] == 6:
            normals = data[:, 3:6]

    if len(points) < MIN_POINTS:
        raise PointCloudError(f"{path}: {len(points)} points is too few (need at least {MIN_POINTS})")
    if target_count is not None:
        if target_count <= 0:
            raise PointCloudError("target_count must be positive")
        if len(points) > target_count:
            rng = np.random.default_rng(seed)
            keep = np.sort(rng.choice(len(points), size=target_count, replace=False))
            points = points[keep]
            normals = None if normals is None else normals[keep]
    return PointCloud.from_array(points, normals)


def estimate_normals(points, k_neighbors=16, return_degenerate=False):
    """PCA normals with minimum-spanning-tree sign propagation.

    Each connected component of the k-NN graph is seeded at its highest-z
    point, whose normal is turned to point up. Points with collinear
    neighbourhoods are flagged and get the centroid-to-point direction.
    """
    if isinstance(points, PointCloud):
        points = points.points
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if k_neighbors < 4:
        raise ValueError("k_neighbors must be at least 4")
    if n < k_neighbors:
        raise ValueError(f"need at least {k_neighbors} points, got {n}")

    k = min(k_neighbors + 1, n)
    _, idx = cKDTree(points).query(points, k=k)
    nbr = points[idx]
    centered = nbr - nbr.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0].copy()

    scale = np.maximum(evals[:, 2], 1e-300)
    degenerate = evals[:, 1] <= 1e-10 * scale
    if np.any(degenerate):
        radial = points[degenerate] - points.mean(axis=0)
        norm = np.linalg.norm(radial, axis=1, keepdims=True)
        radial = np.where(norm > 1e-12, radial / np.maximum(norm, 1e-300), np.array([0.0, 0.0, 1.0]))
        normals[degenerate] = radial
        logger.debug("%d points have degenerate neighbourhoods", int(degenerate.sum()))

    rows = np.repeat(np.arange(n), k - 1)
    cols = idx[:, 1:].ravel()
    w = 1.0 - np.abs(np.einsum("ij,ij->i", normals[rows], normals[cols])) + 1e-9
    graph = coo_matrix((w, (rows, cols)), shape=(n, n)).tocsr()
    graph = graph.maximum(graph.T)
    mst = minimum_spanning_tree(graph)
    ncomp, labels = connected_components(mst, directed=False)
    for c in range(ncomp):
        members = np.flatnonzero(labels == c)
        seed = members[np.argmax(points[members, 2])]
        if normals[seed, 2] < 0 and not degenerate[seed]:
            normals[seed] *= -1
        order, pred = breadth_first_order(mst, seed, directed=False, return_predecessors=True)
        for i in order[1:]:
            if not degenerate[i] and normals[i] @ normals[pred[i]] < 0:
                normals[i] *= -1

    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    if return_degenerate:
        return normals, degenerate
    return normals


class DistanceField:
    """Unsigned distance to the nearest input sample (mean of k with smoothing).

    Immutable after construction; all queries are vectorized over the
    leading axes of ``q``.
    """

    def __init__(self, points, smoothing_k=1, normals=None, normal_k=16, fd_step=FD_STEP,
                 surface_eps=None, far_bound=FAR_BOUND):
        if isinstance(points, PointCloud):
            if normals is None:
                normals = points.normals
            points = points.points
        self.points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(self.points) == 0:
            raise PointCloudError("distance field needs at least one point")
        if smoothing_k < 1:
            raise ValueError("smoothing_k must be >= 1")
        self.smoothing_k = int(min(smoothing_k, len(self.points)))
        self.tree = cKDTree(self.points)
        self.normal_k = normal_k
        self.fd_step = fd_step
        self.far_bound = far_bound
        self._normals = None if normals is None else np.asarray(normals, dtype=np.float64)
        if len(self.points) > 1:
            k = min(4, len(self.points))
            d, _ = self.tree.query(self.points, k=k)
            self.spacing = float(d[:, 1:].mean())
        else:
            self.spacing = 0.0
        # random sampling leaves holes wider than the mean spacing; rays would
        # slip through them with a smaller threshold
        self.surface_eps = max(SURFACE_EPS, EPS_PER_SPACING * self.spacing) if surface_eps is None else surface_eps
        self.center = self.points.mean(axis=0)
        self.radius = float(np.linalg.norm(self.points - self.center, axis=1).max())

    @property
    def normals(self):
        if self._normals is None:
            self._normals = estimate_normals(self.points, min(self.normal_k, len(self.points)))
        return self._normals

    def query(self, q):
        q = np.asarray(q, dtype=np.float64)
        flat = q.reshape(-1, 3)
        if self.smoothing_k == 1:
            d, _ = self.tree.query(flat, k=1)
        else:
            d, _ = self.tree.query(flat, k=self.smoothing_k)
            d = d.mean(axis=1)
        return d.reshape(q.shape[:-1])

    def gradient(self, q):
        """Central finite-difference gradient, shape like ``q``."""
        q = np.asarray(q, dtype=np.float64)
        flat = q.reshape(-1, 1, 3)
        h = self.fd_step
        offsets = np.concatenate([np.eye(3), -np.eye(3)]) * h
        vals = self.query(flat + offsets[None])
        g = (vals[:, :3] - vals[:, 3:]) / (2 * h)
        return g.reshape(q.shape)

    def normal_at(self, q, on_singular="raise"):
        """Unit field normal; the PCA normal at input points.

        ``on_singular`` is ``"raise"`` or ``"zero"`` (return a zero vector
        where the gradient vanishes away from the surface).
        """
        q = np.asarray(q, dtype=np.float64)
        flat = q.reshape(-1, 3)
        d, idx = self.tree.query(flat, k=1)
        out = np.zeros_like(flat)
        on_surface = d < 1e-12
        if np.any(on_surface):
            out[on_surface] = self.normals[idx[on_surface]]
        off = ~on_surface
        if np.any(off):
            g = self.gradient(flat[off])
            norm = np.linalg.norm(g, axis=1)
            bad = norm < 1e-9
            if np.any(bad) and on_singular == "raise":
                raise SingularGradientError("singular gradient")
            g[~bad] /= norm[~bad, None]
            g[bad] = 0.0
            out[off] = g
        return out.reshape(q.shape)


def udf_query(field, q):
    return field.query(q)


def field_normal(field, q):
    return field.normal_at(q)


@dataclass
class DepthMap:
    depth: np.ndarray
    hit_mask: np.ndarray

    @property
    def width(self):
        return self.depth.shape[1]

    @property
    def height(self):
        return self.depth.shape[0]


def sphere_trace_depth(field, cam, max_steps=1024):
    """March every pixel ray through the distance field.

    Far from the samples the step is the distance value itself. Inside a
    band of ``2 * surface_eps`` the ray switches to half steps and tracks the
    smallest distance seen; once the distance starts growing again the ray
    reports a hit at that minimum if it lies below ``surface_eps``, and
    otherwise resumes coarse stepping. Misses keep ``MISS_DEPTH``.
    """
    dirs = cam.ray_directions().reshape(-1, 3)
    origin = cam.position
    n = len(dirs)
    depth = np.full(n, MISS_DEPTH)
    hit = np.zeros(n, dtype=bool)
    eps = field.surface_eps
    band = 2.0 * eps
    min_step = 1e-3 * eps

    # skip empty space outside the bounding sphere of the samples
    oc = origin - field.center
    b = dirs @ oc
    c = oc @ oc - (field.radius + band) ** 2
    disc = b * b - c
    root = np.sqrt(np.maximum(disc, 0.0))
    t_enter = np.maximum(-b - root, 0.0)
    t_exit = np.minimum(-b + root, field.far_bound)

    active = np.flatnonzero((disc > 0) & (t_exit > t_enter))
    t = t_enter[active].copy()
    exit_t = t_exit[active]
    fine = np.zeros(len(active), dtype=bool)
    min_d = np.full(len(active), np.inf)
    min_t = np.zeros(len(active))
    for _ in range(max_steps):
        if active.size == 0:
            break
        d = field.query(origin + t[:, None] * dirs[active])

        enter = ~fine & (d < band)
        fine |= enter
        min_d[enter] = np.inf
        improved = fine & (d < min_d)
        min_d[improved] = d[improved]
        min_t[improved] = t[improved]
        passed = fine & ~improved
        done = passed & (min_d < eps)
        resume = passed & ~done
        fine[resume] = False

        if np.any(done):
            depth[active[done]] = min_t[done]
            hit[active[done]] = True
        step = np.where(fine, np.maximum(0.5 * d, min_step), d)
        t = t + step
        keep = ~done & (t <= exit_t)
        active, t, exit_t = active[keep], t[keep], exit_t[keep]
        fine, min_d, min_t = fine[keep], min_d[keep], min_t[keep]

    if active.size:
        # rays still inside the band when the budget ran out
        ok = fine & (min_d < eps)
        depth[active[ok]] = min_t[ok]
        hit[active[ok]] = True

    idx = np.flatnonzero(hit)
    if idx.size:
        depth[idx] = _snap_to_local_plane(field, origin, dirs[idx], depth[idx])

    H, W = cam.height, cam.width
    return DepthMap(depth.reshape(H, W), hit.reshape(H, W))


def _snap_to_local_plane(field, origin, dirs, t, k=8):
    """Move hits onto the PCA plane of the nearby samples when that is safe.

    The closest approach to a single sample sits off the surface for
    oblique rays; the plane of the local neighbourhood is a better estimate.
    A snapped hit must stay within ``2 * surface_eps`` of the original
    parameter and keep the distance value below ``surface_eps``.
    """
    k = min(k, len(field.points))
    if k < 3:
        return t
    x = origin + t[:, None] * dirs
    _, nbr = field.tree.query(x, k=k)
    pts = field.points[nbr]
    centroid = pts.mean(axis=1)
    centered = pts - centroid[:, None, :]
    cov = np.einsum("nki,nkj->nij", centered, centered)
    _, evecs = np.linalg.eigh(cov)
    normal = evecs[:, :, 0]
    denom = np.einsum("ij,ij->i", dirs, normal)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_plane = np.einsum("ij,ij->i", centroid - origin, normal) / denom
    ok = (np.abs(denom) > 0.1) & np.isfinite(t_plane) & (np.abs(t_plane - t) < 2 * field.surface_eps)
    ok &= t_plane > 0
    out = t.copy()
    if np.any(ok):
        d = field.query(origin + t_plane[ok, None] * dirs[ok])
        sel = np.flatnonzero(ok)[d <= field.surface_eps]
        out[sel] = t_plane[sel]
    return out
