"""Pinhole camera: pose, intrinsics and per-pixel rays.

Camera-local axes follow the OpenCV convention (x right, y down, z forward);
``orientation`` rotates camera-local vectors into the world frame.
"""

from dataclasses import dataclass

import numpy as np

from .geometry import matrix_to_quat, normalize, quat_to_matrix


@dataclass(frozen=True)
class Camera:
    position: np.ndarray
    orientation: np.ndarray
    fov_y: float
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64).reshape(3))
        q = np.asarray(self.orientation, dtype=np.float64).reshape(4)
        object.__setattr__(self, "orientation", q / np.linalg.norm(q))
        if not 0.0 < self.fov_y < np.pi:
            raise ValueError(f"fov_y must lie in (0, pi), got {self.fov_y}")
        if self.width < 16 or self.height < 16:
            raise ValueError(f"camera resolution must be at least 16x16, got {self.width}x{self.height}")

    @classmethod
    def look_at(cls, position, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0), fov_y=np.radians(50.0),
                width=256, height=256):
        position = np.asarray(position, dtype=np.float64)
        forward = normalize(np.asarray(target, dtype=np.float64) - position)
        up = np.asarray(up, dtype=np.float64)
        if abs(np.dot(normalize(up), forward)) > 0.999:
            up = np.array([0.0, 1.0, 0.0]) if abs(forward[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
        right = normalize(np.cross(forward, up))
        down = np.cross(forward, right)
        R = np.stack([right, down, forward], axis=1)
        return cls(position, matrix_to_quat(R), float(fov_y), int(width), int(height))

    @property
    def rotation(self):
        return quat_to_matrix(self.orientation)

    @property
    def focal(self):
        return 0.5 * self.height / np.tan(0.5 * self.fov_y)

    def basis(self):
        """(right, down, forward) world vectors and (fx, fy, cx, cy)."""
        R = self.rotation
        f = self.focal
        return R[:, 0], R[:, 1], R[:, 2], (f, f, 0.5 * self.width, 0.5 * self.height)

    def ray_directions(self):
        """Unit world-space ray directions through pixel centers, shape (H, W, 3)."""
        right, down, forward, (fx, fy, cx, cy) = self.basis()
        xs = (np.arange(self.width) + 0.5 - cx) / fx
        ys = (np.arange(self.height) + 0.5 - cy) / fy
        d = forward[None, None, :] + xs[None, :, None] * right + ys[:, None, None] * down
        return normalize(d)

    def project(self, points):
        """Pixel coordinates (u, v) and camera-space depth z for world points."""
        local = (np.asarray(points, dtype=np.float64) - self.position) @ self.rotation
        _, _, _, (fx, fy, cx, cy) = self.basis()
        z = local[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = fx * local[..., 0] / z + cx
            v = fy * local[..., 1] / z + cy
        return u, v, z
