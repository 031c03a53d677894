"""2D Gaussian disks: storage, initialization from points, closed-form geometry."""

from dataclasses import dataclass, fields

import numpy as np
from scipy.spatial import cKDTree

from .geometry import matrix_to_quat, normalize, quat_to_matrix, tangent_frame

INIT_OPACITY = 0.9
INIT_COLOR = 0.5
MIN_SCALE = 1e-5


@dataclass
class GaussianDisk:
    center: np.ndarray
    rotation: np.ndarray
    scale: np.ndarray
    opacity: float
    color: np.ndarray

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.scale = np.asarray(self.scale, dtype=np.float64)
        self.color = np.asarray(self.color, dtype=np.float64)


@dataclass
class GaussianSet:
    """Structure-of-arrays store for M disks plus per-disk view bookkeeping."""

    centers: np.ndarray
    quats: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    best_view_cos: np.ndarray = None
    seen: np.ndarray = None

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64).reshape(-1, 3)
        m = len(self.centers)
        self.quats = np.asarray(self.quats, dtype=np.float64).reshape(m, 4)
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(m, 2)
        self.opacities = np.asarray(self.opacities, dtype=np.float64).reshape(m)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(m, 3)
        if self.best_view_cos is None:
            self.best_view_cos = np.full(m, -1.0)
        if self.seen is None:
            self.seen = np.zeros(m, dtype=bool)
        self.best_view_cos = np.asarray(self.best_view_cos, dtype=np.float64).reshape(m)
        self.seen = np.asarray(self.seen, dtype=bool).reshape(m)

    def __len__(self):
        return len(self.centers)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 2)), np.zeros(0), np.zeros((0, 3)))

    def copy(self):
        return GaussianSet(**{f.name: getattr(self, f.name).copy() for f in fields(self)})

    def subset(self, idx):
        return GaussianSet(**{f.name: getattr(self, f.name)[idx].copy() for f in fields(self)})

    def concat(self, other):
        return GaussianSet(**{f.name: np.concatenate([getattr(self, f.name), getattr(other, f.name)])
                              for f in fields(self)})

    def disk(self, i):
        return GaussianDisk(self.centers[i], self.quats[i], self.scales[i], float(self.opacities[i]),
                            self.colors[i])

    def rotations(self):
        return quat_to_matrix(self.quats)

    def normals(self):
        return self.rotations()[:, :, 2]

    def validate(self):
        """Raise ValueError when an attribute invariant is violated."""
        m = len(self)
        for f in fields(self):
            if len(getattr(self, f.name)) != m:
                raise ValueError(f"attribute {f.name} has length {len(getattr(self, f.name))}, expected {m}")
        if not np.allclose(np.linalg.norm(self.quats, axis=1), 1.0, atol=1e-6):
            raise ValueError("quaternions must be unit length")
        if not (np.all(np.isfinite(self.scales)) and np.all(self.scales > 0)):
            raise ValueError("scales must be positive and finite")
        if np.any(self.opacities < 0) or np.any(self.opacities > 1):
            raise ValueError("opacities must lie in [0, 1]")
        if np.any(self.colors < 0) or np.any(self.colors > 1):
            raise ValueError("colors must lie in [0, 1]")


def mean_neighbor_distance(points, k=3):
    """Mean distance from each point to its k nearest other points.

    With fewer than k other points, all of them are used.
    """
    points = np.asarray(points, dtype=np.float64)
    if len(points) < 2:
        return np.ones(len(points))
    kk = min(k, len(points) - 1)
    d, _ = cKDTree(points).query(points, k=kk + 1)
    return d[:, 1:].mean(axis=1)


def init_gaussians(cloud, normals):
    """One disk per point, oriented by ``normals``.

    Both radii are the mean 3-NN distance; opacity 0.9; mid-gray color.
    """
    points = getattr(cloud, "points", cloud)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    if len(normals) != len(points):
        raise ValueError(f"got {len(normals)} normals for {len(points)} points")
    m = len(points)
    if m == 0:
        return GaussianSet.empty()
    quats = matrix_to_quat(tangent_frame(normals))
    s = np.maximum(mean_neighbor_distance(points, 3), MIN_SCALE)
    return GaussianSet(
        centers=points.copy(),
        quats=quats,
        scales=np.repeat(s[:, None], 2, axis=1),
        opacities=np.full(m, INIT_OPACITY),
        colors=np.full((m, 3), INIT_COLOR),
    )


def covariance_of(g):
    R = quat_to_matrix(g.rotation)
    D = np.diag([g.scale[0] ** 2, g.scale[1] ** 2, 0.0])
    return R @ D @ R.T


def evaluate_density(g, u):
    u = np.asarray(u, dtype=np.float64)
    s = g.scale
    return np.exp(-0.5 * ((u[..., 0] / s[0]) ** 2 + (u[..., 1] / s[1]) ** 2))


def disk_normal(g):
    return normalize(quat_to_matrix(g.rotation)[:, 2])
