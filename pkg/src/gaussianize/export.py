"""Splat PLY interchange: the per-vertex layout common splat viewers read."""

from collections import OrderedDict

import numpy as np

from .gaussians import GaussianSet
from .geometry import quat_to_matrix
from .ply import PlyError, read_ply, write_ply

SH_C0 = 0.28209479177387814
FLAT_SCALE = 1e-6
_OPACITY_EPS = 1e-7

PROPERTIES = ("x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
              "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3")


def color_to_dc(c):
    return (np.asarray(c, dtype=np.float64) - 0.5) / SH_C0


def dc_to_color(f):
    return np.asarray(f, dtype=np.float64) * SH_C0 + 0.5


def opacity_to_logit(o):
    o = np.clip(np.asarray(o, dtype=np.float64), _OPACITY_EPS, 1.0 - _OPACITY_EPS)
    return np.log(o) - np.log1p(-o)


def logit_to_opacity(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def export_ply(gset, path, scale=1.0, offset=(0.0, 0.0, 0.0)):
    """Write ``gset`` in the input frame, ``original = normalized / scale + offset``."""
    offset = np.asarray(offset, dtype=np.float64).reshape(3)
    centers = gset.centers / scale + offset
    normals = quat_to_matrix(gset.quats)[:, :, 2] if len(gset) else np.zeros((0, 3))
    quats = gset.quats / np.linalg.norm(gset.quats, axis=1, keepdims=True) if len(gset) else gset.quats
    dc = color_to_dc(gset.colors)
    log_s = np.log(gset.scales / scale)
    cols = OrderedDict()
    for i, k in enumerate("xyz"):
        cols[k] = centers[:, i]
    for i, k in enumerate(("nx", "ny", "nz")):
        cols[k] = normals[:, i]
    for i in range(3):
        cols[f"f_dc_{i}"] = dc[:, i]
    cols["opacity"] = opacity_to_logit(gset.opacities)
    cols["scale_0"] = log_s[:, 0]
    cols["scale_1"] = log_s[:, 1]
    cols["scale_2"] = np.full(len(gset), np.log(FLAT_SCALE))
    for i in range(4):
        cols[f"rot_{i}"] = quats[:, i]
    write_ply(path, cols)


def import_ply(path, scale=1.0, offset=(0.0, 0.0, 0.0)):
    """Read a splat PLY back into a GaussianSet, mapping coordinates by ``(p - offset) * scale``."""
    cols = read_ply(path)
    missing = [k for k in PROPERTIES if k not in cols]
    if missing:
        raise PlyError(f"{path}: not a splat PLY, missing {', '.join(missing)}")
    offset = np.asarray(offset, dtype=np.float64).reshape(3)
    centers = (np.stack([cols["x"], cols["y"], cols["z"]], axis=1) - offset) * scale
    quats = np.stack([cols[f"rot_{i}"] for i in range(4)], axis=1)
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    scales = np.exp(np.stack([cols["scale_0"], cols["scale_1"]], axis=1)) * scale
    colors = np.clip(dc_to_color(np.stack([cols[f"f_dc_{i}"] for i in range(3)], axis=1)), 0.0, 1.0)
    return GaussianSet(centers, quats, scales, logit_to_opacity(cols["opacity"]), colors)
