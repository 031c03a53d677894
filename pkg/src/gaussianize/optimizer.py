"""Single-pass per-view optimization of the visible disks.

The objective is ``L_render + alpha * L_distance + beta * L_scale``:

- ``L_render``: 0.8 * L1 + 0.2 * (1 - SSIM) / 2 against the view's target;
- ``L_distance``: mean unsigned distance of visible centers to the input
  samples, which keeps disks anchored on the surface;
- ``L_scale``: mean squared excess of each visible disk's larger radius
  over the cap ``tau``.

Adam runs on an unconstrained parameterization (log radii, logit opacity);
disks outside the visible set are never written.
"""

import json
from dataclasses import asdict, dataclass, field as dc_field

import numpy as np
from scipy.ndimage import correlate1d

from . import rasterizer
from .gaussians import MIN_SCALE, GaussianSet

L1_WEIGHT = 0.8
SSIM_WEIGHT = 0.2
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

ADAM_B1 = 0.9
ADAM_B2 = 0.999
ADAM_EPS = 1e-15

_OPACITY_EPS = 1e-6


@dataclass
class OptimConfig:
    steps_per_view: int = 150
    lr_center: float = 1.6e-4
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-2
    alpha: float = 1.0
    beta: float = 10.0
    tau: float = None  # None: twice the mean 3-NN spacing of the field samples
    densify: bool = False
    densify_grad_threshold: float = 2e-4

    def validate(self):
        if int(self.steps_per_view) != self.steps_per_view or self.steps_per_view < 1:
            raise ValueError(f"steps_per_view must be a positive integer, got {self.steps_per_view}")
        for name in ("lr_center", "lr_rotation", "lr_scale", "lr_opacity", "lr_color"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        # alpha = 0 / beta = 0 switch a term off (ablations)
        for name in ("alpha", "beta", "densify_grad_threshold"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.tau is not None and not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        return self

    def resolve_tau(self, field):
        return float(self.tau) if self.tau is not None else 2.0 * float(field.spacing)


@dataclass
class ViewReport:
    view: int
    n_visible: int
    steps: int
    initial_loss: float
    final_loss: float
    initial_terms: dict = dc_field(default_factory=dict)
    final_terms: dict = dc_field(default_factory=dict)
    decreased: bool = True
    # mean per-step norm of the rendering gradient w.r.t. each visible center
    grad_accum: np.ndarray = None

    def to_json(self):
        d = asdict(self)
        d.pop("grad_accum")
        d["non_decrease"] = not self.decreased
        return json.dumps(d, sort_keys=True)


# -- losses ----------------------------------------------------------------

def _visible_idx(visible):
    return np.asarray(getattr(visible, "gaussian_indices", visible), dtype=np.int64)


def distance_loss(gset, visible, field):
    """Mean |f(center)| over visible disks and its gradient w.r.t. those centers."""
    idx = _visible_idx(visible)
    if len(idx) == 0:
        return 0.0, np.zeros((0, 3))
    c = gset.centers[idx]
    f = field.query(c)
    g = field.gradient(c)
    # the distance field is not differentiable on its zero set
    g[f == 0.0] = 0.0
    return float(f.mean()), g / len(idx)


def scale_loss(gset, visible, tau):
    """Mean of (min(max s, tau) - max s)^2 over visible disks, and d/d scales."""
    idx = _visible_idx(visible)
    if len(idx) == 0:
        return 0.0, np.zeros((0, 2))
    s = gset.scales[idx]
    smax = s.max(axis=1)
    excess = smax - np.minimum(smax, tau)
    loss = float(np.mean(excess ** 2))
    is_max = s == smax[:, None]
    share = is_max / is_max.sum(axis=1, keepdims=True)
    return loss, share * (2.0 * excess / len(idx))[:, None]


def _gaussian_window():
    r = SSIM_WINDOW // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    w = np.exp(-0.5 * (x / SSIM_SIGMA) ** 2)
    return w / w.sum()


_WINDOW = _gaussian_window()


def _blur(img):
    """Separable Gaussian window over the two image axes, zero padding."""
    out = correlate1d(img, _WINDOW, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, _WINDOW, axis=1, mode="constant", cval=0.0)


def ssim(x, y, return_grad=False):
    """Mean SSIM over pixels and channels; optionally d SSIM / d x."""
    mx = _blur(x)
    my = _blur(y)
    mxx = _blur(x * x)
    myy = _blur(y * y)
    mxy = _blur(x * y)
    A1 = 2.0 * mx * my + SSIM_C1
    A2 = 2.0 * (mxy - mx * my) + SSIM_C2
    B1 = mx * mx + my * my + SSIM_C1
    B2 = (mxx - mx * mx) + (myy - my * my) + SSIM_C2
    S = A1 * A2 / (B1 * B2)
    val = float(S.mean())
    if not return_grad:
        return val
    n = S.size
    # partials of S w.r.t. the windowed sums E[x], E[x^2], E[xy]
    d_mx = (2.0 * my * (A2 - A1)) / (B1 * B2) - 2.0 * mx * S * (1.0 / B1 - 1.0 / B2)
    d_mxx = -S / B2
    d_mxy = 2.0 * A1 / (B1 * B2)
    # the symmetric zero-padded window is its own adjoint
    grad = _blur(d_mx) + 2.0 * x * _blur(d_mxx) + y * _blur(d_mxy)
    return val, grad / n


def rendering_loss(rendered, target):
    """0.8 * L1 + 0.2 * D-SSIM and its gradient w.r.t. ``rendered``."""
    x = np.asarray(rendered, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: rendered {x.shape} vs target {y.shape}")
    diff = x - y
    l1 = float(np.abs(diff).mean())
    s, ds = ssim(x, y, return_grad=True)
    loss = L1_WEIGHT * l1 + SSIM_WEIGHT * (1.0 - s) / 2.0
    grad = L1_WEIGHT * np.sign(diff) / diff.size - 0.5 * SSIM_WEIGHT * ds
    return loss, grad


def combined_loss(gset, visible, target, cam, field, cfg, background=(0.0, 0.0, 0.0)):
    """Loss terms without gradients, as a dict plus the weighted total."""
    tau = cfg.resolve_tau(field)
    buf = rasterizer.render(gset, cam, background)
    lr, _ = rendering_loss(buf.color, target)
    ld, _ = distance_loss(gset, visible, field)
    ls, _ = scale_loss(gset, visible, tau)
    terms = {"render": lr, "distance": ld, "scale": ls}
    return lr + cfg.alpha * ld + cfg.beta * ls, terms


# -- optimization ------------------------------------------------------------

def _logit(o):
    o = np.clip(o, _OPACITY_EPS, 1.0 - _OPACITY_EPS)
    return np.log(o) - np.log1p(-o)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


class _Adam:
    def __init__(self, params, lrs):
        self.lrs = lrs
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - ADAM_B1 ** self.t
        c2 = 1.0 - ADAM_B2 ** self.t
        for k, g in grads.items():
            m = self.m[k]
            v = self.v[k]
            m *= ADAM_B1
            m += (1.0 - ADAM_B1) * g
            v *= ADAM_B2
            v += (1.0 - ADAM_B2) * g * g
            params[k] -= self.lrs[k] * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)


def _write(work, idx, params):
    work.centers[idx] = params["center"]
    work.quats[idx] = params["rotation"]
    work.scales[idx] = np.exp(params["log_scale"])
    work.opacities[idx] = _sigmoid(params["logit_opacity"])
    work.colors[idx] = np.clip(params["color"], 0.0, 1.0)


def optimize_view(gset, visible, target, cam, field, cfg, background=(0.0, 0.0, 0.0), view=0):
    """Run ``cfg.steps_per_view`` Adam steps on the visible disks of ``gset`` (in place).

    Returns a ViewReport; ``decreased`` is False when the final combined
    loss exceeds the initial one.
    """
    cfg.validate()
    idx = np.unique(_visible_idx(visible))
    tau = cfg.resolve_tau(field)
    if len(idx) == 0:
        return ViewReport(view, 0, 0, 0.0, 0.0, grad_accum=np.zeros(0))
    target = np.asarray(target, dtype=np.float64)
    if target.shape != (cam.height, cam.width, 3):
        raise ValueError(f"target shape {target.shape} does not match camera {(cam.height, cam.width)}")

    params = {
        "center": gset.centers[idx].copy(),
        "rotation": gset.quats[idx].copy(),
        "log_scale": np.log(np.maximum(gset.scales[idx], MIN_SCALE)),
        "logit_opacity": _logit(gset.opacities[idx]),
        "color": gset.colors[idx].copy(),
    }
    adam = _Adam(params, {"center": cfg.lr_center, "rotation": cfg.lr_rotation, "log_scale": cfg.lr_scale,
                          "logit_opacity": cfg.lr_opacity, "color": cfg.lr_color})
    work = GaussianSet(gset.centers.copy(), gset.quats.copy(), gset.scales.copy(), gset.opacities.copy(),
                       gset.colors.copy())
    grad_accum = np.zeros(len(idx))
    initial = None
    prev = None
    for step in range(int(cfg.steps_per_view)):
        if step:
            _write(work, idx, params)
        # only tiles touched by the visible disks change between steps
        buf, frame = rasterizer.render_with_frame(work, cam, background, active=idx, base=prev)
        prev = (buf, frame)
        lr, dimg = rendering_loss(buf.color, target)
        g = rasterizer.render_backward(work, cam, dimg, background, active=idx, frame=frame)
        ld, gd = distance_loss(work, idx, field)
        ls, gs = scale_loss(work, idx, tau)
        if initial is None:
            initial = (lr + cfg.alpha * ld + cfg.beta * ls, {"render": lr, "distance": ld, "scale": ls})
        grad_accum += np.linalg.norm(g["centers"], axis=1)
        scales = work.scales[idx]
        opac = work.opacities[idx]
        grads = {
            "center": g["centers"] + cfg.alpha * gd,
            "rotation": g["quats"],
            "log_scale": (g["scales"] + cfg.beta * gs) * scales,
            "logit_opacity": g["opacities"] * opac * (1.0 - opac),
            "color": g["colors"],
        }
        adam.step(params, grads)

    # commit: renormalize rotations and clamp ranges, visible rows only
    params["rotation"] /= np.linalg.norm(params["rotation"], axis=1, keepdims=True)
    _write(work, idx, params)
    gset.centers[idx] = work.centers[idx]
    gset.quats[idx] = work.quats[idx]
    gset.scales[idx] = np.maximum(work.scales[idx], MIN_SCALE)
    gset.opacities[idx] = np.clip(work.opacities[idx], 0.0, 1.0)
    gset.colors[idx] = work.colors[idx]

    final, final_terms = combined_loss(gset, idx, target, cam, field, cfg, background)
    return ViewReport(
        view=view,
        n_visible=int(len(idx)),
        steps=int(cfg.steps_per_view),
        initial_loss=float(initial[0]),
        final_loss=float(final),
        initial_terms=initial[1],
        final_terms=final_terms,
        decreased=bool(final <= initial[0]),
        grad_accum=grad_accum / cfg.steps_per_view,
    )


def densify(gset, grads, cfg, tau=None):
    """Clone small and split large disks whose accumulated center gradient exceeds the threshold.

    ``grads`` holds one value per disk of ``gset``. A clone is offset by one
    radius along the larger tangent axis; a split replaces the disk by two
    children at +/- half that radius with radii divided by 1.6 (the first
    child takes the parent's slot). New disks are unseen.
    """
    tau = cfg.tau if tau is None else tau
    if tau is None:
        raise ValueError("densify needs tau")
    grads = np.asarray(grads, dtype=np.float64)
    if len(grads) != len(gset):
        raise ValueError(f"got {len(grads)} gradient values for {len(gset)} disks")
    hot = np.flatnonzero(grads > cfg.densify_grad_threshold)
    if len(hot) == 0:
        return gset.copy()
    out = gset.copy()
    R = gset.rotations()[hot]
    s = gset.scales[hot]
    big_axis = np.argmax(s, axis=1)
    smax = s[np.arange(len(hot)), big_axis]
    axis = R[np.arange(len(hot)), :, big_axis]
    clone = smax < 0.5 * tau
    new = gset.subset(hot)
    new.seen[:] = False
    new.best_view_cos[:] = -1.0
    # clones: original stays, copy shifted by one radius
    new.centers[clone] = gset.centers[hot[clone]] + smax[clone, None] * axis[clone]
    # splits: two children at +/- half a radius, radii / 1.6
    sp = ~clone
    if sp.any():
        hs = hot[sp]
        out.centers[hs] = gset.centers[hs] - 0.5 * smax[sp, None] * axis[sp]
        out.scales[hs] = gset.scales[hs] / 1.6
        out.seen[hs] = False
        out.best_view_cos[hs] = -1.0
        new.centers[sp] = gset.centers[hs] + 0.5 * smax[sp, None] * axis[sp]
        new.scales[sp] = gset.scales[hs] / 1.6
    return out.concat(new)


class RunLog:
    """Append-only JSON-lines log."""

    def __init__(self, path):
        self.path = path

    def write(self, record):
        line = record if isinstance(record, str) else json.dumps(record, sort_keys=True)
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(line + "\n")
