"""Appearance providers: the boundary where view images get their new content.

``ProceduralProvider`` is a deterministic stand-in for a depth-aware
inpainting model: every writable pixel is back-projected through the depth
map and colored by a world-space solid texture, so two views agree exactly
wherever they see the same surface point. ``RemoteProvider`` forwards the
request to an HTTP service.
"""

import base64
import hashlib
import io
import logging
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .views import mask_image, quantize_depth, surface_points

log = logging.getLogger(__name__)

TOKEN_ENV = "GAP_PROVIDER_TOKEN"
STRENGTH_GENERATE = 1.0
STRENGTH_UPDATE = 0.5


class ProviderError(RuntimeError):
    """Backend failure; the pipeline skips the view."""


@dataclass
class InpaintRequest:
    image: np.ndarray
    depth: object
    trimask: object
    prompt: str
    strength_generate: float = STRENGTH_GENERATE
    strength_update: float = STRENGTH_UPDATE
    seed: int = 0
    camera: object = None  # needed by backends that back-project pixels

    def validate(self):
        H, W = self.trimask.shape
        if self.image.shape != (H, W, 3):
            raise ValueError(f"image shape {self.image.shape} does not match mask {(H, W)}")
        if (self.depth.height, self.depth.width) != (H, W):
            raise ValueError(f"depth shape {(self.depth.height, self.depth.width)} does not match mask {(H, W)}")
        for name in ("strength_generate", "strength_update"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")
        if self.strength_update > self.strength_generate:
            raise ValueError("strength_update must not exceed strength_generate")


@dataclass
class InpaintResponse:
    image: np.ndarray


class Provider:
    name = "base"

    def inpaint(self, req):
        raise NotImplementedError


# -- procedural texture --------------------------------------------------------

def prompt_seed(prompt):
    """64-bit seed from the prompt text."""
    return int.from_bytes(hashlib.blake2b(prompt.encode("utf-8"), digest_size=8).digest(), "little")


@dataclass(frozen=True)
class _Texture:
    palette: np.ndarray   # (K, 3)
    frequency: float
    offsets: np.ndarray   # (octaves, 3)
    perm: np.ndarray      # (512,) lattice hash
    values: np.ndarray    # (256,) lattice values


_OCTAVES = 3
_cache = {}


def _texture(prompt):
    tex = _cache.get(prompt)
    if tex is None:
        rng = np.random.default_rng(prompt_seed(prompt))
        k = int(rng.integers(3, 6))
        palette = rng.uniform(0.05, 0.95, size=(k, 3))
        freq = float(rng.uniform(1.5, 3.0))
        offsets = rng.uniform(0.0, 64.0, size=(_OCTAVES, 3))
        perm = rng.permutation(256)
        tex = _Texture(palette, freq, offsets, np.concatenate([perm, perm]), rng.uniform(0.0, 1.0, 256))
        _cache[prompt] = tex
    return tex


def _value_noise(p, tex):
    """Trilinear value noise in [0, 1] with smoothstep fade."""
    cell = np.floor(p)
    f = p - cell
    i = cell.astype(np.int64) & 255
    w = f * f * (3.0 - 2.0 * f)
    perm = tex.perm
    out = np.zeros(len(p))
    for dx in (0, 1):
        wx = w[:, 0] if dx else 1.0 - w[:, 0]
        for dy in (0, 1):
            wy = w[:, 1] if dy else 1.0 - w[:, 1]
            for dz in (0, 1):
                wz = w[:, 2] if dz else 1.0 - w[:, 2]
                h = perm[perm[perm[i[:, 0] + dx] + i[:, 1] + dy] + i[:, 2] + dz]
                out += wx * wy * wz * tex.values[h]
    return out


def _gradient_fixture(points, axis):
    # monotone grey ramp across the unit cube
    t = np.clip(points[:, "xyz".index(axis)] + 0.5, 0.0, 1.0)
    return np.repeat(t[:, None], 3, axis=1)


def procedural_texture(points, prompt):
    """Deterministic solid texture color(s) in [0, 1] for world point(s).

    The prompt ``"gradient:x"`` (or ``y``/``z``) is a fixture: a grey ramp
    increasing along that axis.
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 3)
    if prompt.startswith("gradient:") and prompt[9:] in ("x", "y", "z"):
        col = _gradient_fixture(pts, prompt[9:])
    else:
        tex = _texture(prompt)
        total = 0.0
        acc = np.zeros(len(pts))
        for o in range(_OCTAVES):
            amp = 0.5 ** o
            acc += amp * _value_noise(pts * tex.frequency * 2.0 ** o + tex.offsets[o], tex)
            total += amp
        # value noise concentrates around 0.5; stretch before indexing the palette
        t = np.clip((acc / total - 0.5) * 2.0 + 0.5, 0.0, 1.0)
        x = t * (len(tex.palette) - 1)
        lo = np.minimum(np.floor(x).astype(np.int64), len(tex.palette) - 2)
        frac = (x - lo)[:, None]
        col = (1.0 - frac) * tex.palette[lo] + frac * tex.palette[lo + 1]
    return col[0] if single else col


class ProceduralProvider(Provider):
    """Colors writable pixels with ``procedural_texture`` at their surface point.

    Strengths are ignored: the texture is the exact target for every view.
    """

    name = "procedural"

    def inpaint(self, req):
        req.validate()
        if req.camera is None:
            raise ProviderError("procedural provider needs the request camera to back-project pixels")
        out = np.array(req.image, dtype=np.float64, copy=True)
        write = req.trimask.writable() & req.depth.hit_mask
        if write.any():
            pts = surface_points(type(req.depth)(req.depth.depth, write), req.camera)
            out[write] = procedural_texture(pts, req.prompt)
        return InpaintResponse(out)


# -- remote --------------------------------------------------------------------

def encode_png(array):
    buf = io.BytesIO()
    Image.fromarray(array).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_png(text):
    return np.asarray(Image.open(io.BytesIO(base64.b64decode(text, validate=True))))


def to_rgb8(image):
    return np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


class RemoteProvider(Provider):
    """Client for ``POST {url}/v1/inpaint``."""

    name = "remote"

    def __init__(self, url, token=None, timeout=60.0, session=None):
        if not url:
            raise ValueError("remote provider needs a URL")
        self.url = url.rstrip("/") + "/v1/inpaint"
        self.token = token if token is not None else os.environ.get(TOKEN_ENV)
        self.timeout = timeout
        self.session = session

    def payload(self, req):
        return {
            "image": encode_png(to_rgb8(req.image)),
            "depth": encode_png(quantize_depth(req.depth)),
            "mask": encode_png(mask_image(req.trimask)),
            "prompt": req.prompt,
            "strength_generate": float(req.strength_generate),
            "strength_update": float(req.strength_update),
            "seed": int(req.seed),
        }

    def inpaint(self, req):
        import requests

        req.validate()
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        post = self.session.post if self.session is not None else requests.post
        try:
            resp = post(self.url, json=self.payload(req), headers=headers, timeout=self.timeout)
        except requests.RequestException as exc:
            raise ProviderError(f"request to {self.url} failed: {exc}") from exc
        if resp.status_code != 200:
            raise ProviderError(f"{self.url} answered HTTP {resp.status_code}")
        try:
            img = decode_png(resp.json()["image"])
        except Exception as exc:
            raise ProviderError(f"malformed response from {self.url}: {exc}") from exc
        H, W = req.trimask.shape
        if img.ndim != 3 or img.shape[:2] != (H, W) or img.shape[2] < 3:
            raise ProviderError(f"response image has shape {img.shape}, expected {(H, W, 3)}")
        return InpaintResponse(img[:, :, :3].astype(np.float64) / 255.0)


def make_provider(kind, url=None, token=None, timeout=60.0):
    if kind == "procedural":
        return ProceduralProvider()
    if kind == "remote":
        return RemoteProvider(url, token=token, timeout=timeout)
    raise ValueError(f"unknown provider {kind!r} (expected 'procedural' or 'remote')")
