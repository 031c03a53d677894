"""Quaternion and frame helpers shared across modules.

Quaternions are stored as (w, x, y, z) and act on column vectors.
"""

import numpy as np


def normalize(v, axis=-1, eps=1e-12):
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=axis, keepdims=True)
    return v / np.maximum(n, eps)


def quat_to_matrix(q):
    """Rotation matrices for a (..., 4) array of quaternions (normalized first)."""
    q = normalize(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def matrix_to_quat(R):
    """Unit quaternions (w >= 0) for a (..., 3, 3) array of rotation matrices."""
    R = np.asarray(R, dtype=np.float64)
    shape = R.shape[:-2]
    R = R.reshape(-1, 3, 3)
    q = np.empty((R.shape[0], 4))
    tr = R[:, 0, 0] + R[:, 1, 1] + R[:, 2, 2]
    diag = np.stack([R[:, 0, 0], R[:, 1, 1], R[:, 2, 2]], axis=1)
    # pick the numerically largest of the four candidate components
    case = np.where(tr > diag.max(axis=1), 3, diag.argmax(axis=1))
    for i in range(R.shape[0]):
        m = R[i]
        c = case[i]
        if c == 3:
            s = np.sqrt(1.0 + tr[i]) * 2
            q[i] = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif c == 0:
            s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
            q[i] = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif c == 1:
            s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
            q[i] = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
            q[i] = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    q[q[:, 0] < 0] *= -1
    q = normalize(q)
    return q.reshape(shape + (4,))


def quat_from_axis_angle(axis, angle):
    axis = normalize(axis)
    h = 0.5 * angle
    return np.concatenate([[np.cos(h)], np.sin(h) * axis])


def quat_multiply(a, b):
    """Hamilton product a * b (rotation b applied first)."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def tangent_frame(normals):
    """Deterministic (tangent_u, tangent_v, normal) frames as column matrices.

    The first tangent is the projection of the global x axis onto the plane,
    or of the y axis when the normal is within ~2.6 degrees of x.
    """
    n = normalize(np.atleast_2d(normals))
    ref = np.zeros_like(n)
    near_x = np.abs(n[:, 0]) > 0.999
    ref[~near_x, 0] = 1.0
    ref[near_x, 1] = 1.0
    tu = normalize(ref - np.sum(ref * n, axis=1, keepdims=True) * n)
    tv = np.cross(n, tu)
    return np.stack([tu, tv, n], axis=2)
