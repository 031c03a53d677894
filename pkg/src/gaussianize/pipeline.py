"""End-to-end run: point cloud in, textured splat PLY out.

load -> distance field -> one disk per point -> for each view {trace depth,
render, classify, inpaint, composite, select, optimize, record, [densify]}
-> diffuse appearance into unseen disks -> export.
"""

import logging
import os
import time
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import rasterizer
from .config import ConfigError, check_schedule
from .export import export_ply
from .field import DistanceField, PointCloudError, estimate_normals, load_point_cloud, sphere_trace_depth
from .gaussians import init_gaussians
from .inpaint3d import find_unseen, gaussian_inpaint
from .optimizer import RunLog, densify, optimize_view
from .ply import PlyError
from .provider import InpaintRequest, ProviderError, make_provider
from .views import (assigned_visible, classify_masks, composite_final, save_depth_png, save_mask_png,
                    surface_layer, update_similarity_record)

log = logging.getLogger(__name__)

BACKGROUND = (0.0, 0.0, 0.0)
# centers within this many surface thresholds of the traced depth count as the visible layer
LAYER_TOL = 2.0


class PipelineError(RuntimeError):
    """A stage failed; ``stage`` names it and ``io`` marks file-system problems."""

    def __init__(self, stage, message, io=False):
        super().__init__(f"stage {stage} failed: {message}")
        self.stage = stage
        self.io = io


@dataclass
class RunSummary:
    n_input: int
    n_gaussians: int
    n_unseen: int
    n_fallback: int
    views: list = dc_field(default_factory=list)
    wall_time: float = 0.0
    output: str = None

    def as_dict(self):
        return {
            "n_input": self.n_input,
            "n_gaussians": self.n_gaussians,
            "n_unseen": self.n_unseen,
            "n_fallback": self.n_fallback,
            "views": self.views,
            "wall_time": self.wall_time,
            "output": self.output,
        }


class _Stage:
    def __init__(self, name):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is None or isinstance(exc, (PipelineError, ConfigError)):
            return False
        io = isinstance(exc, (OSError, PlyError)) or (
            isinstance(exc, PointCloudError) and "cannot read" in str(exc))
        raise PipelineError(self.name, str(exc), io=io) from exc


def _view_record(i, tm, report=None, skipped=None, n_visible=0):
    rec = {"view": i, "masks": tm.counts() if tm is not None else None, "n_visible": n_visible}
    if report is not None:
        rec.update(initial_loss=report.initial_loss, final_loss=report.final_loss,
                   non_decrease=not report.decreased, steps=report.steps)
    if skipped:
        rec["skipped"] = skipped
    return rec


def run_pipeline(cfg, provider=None, cloud=None, output=True, gaussians=None):
    """Run every stage for ``cfg``; returns (RunSummary, final GaussianSet, PointCloud).

    ``provider`` overrides the one named in the config; ``cloud`` skips
    loading; ``output=False`` skips writing the PLY. ``gaussians`` replaces
    the one-disk-per-point initialization (same normalized frame as
    ``cloud``); the distance field is still built from the cloud.
    """
    t0 = time.perf_counter()
    cfg.validate()
    schedule = check_schedule(cfg)
    if provider is None:
        provider = make_provider(cfg.provider, url=cfg.remote_url, timeout=cfg.remote_timeout)
    run_log = None
    if output:
        log_path = cfg.log or str(Path(cfg.out).with_suffix(".jsonl"))
        with _Stage("log"):
            Path(log_path).parent.mkdir(parents=True, exist_ok=True)
            open(log_path, "w").close()
        run_log = RunLog(log_path)
    if cfg.debug_dir:
        with _Stage("debug"):
            os.makedirs(cfg.debug_dir, exist_ok=True)

    with _Stage("load"):
        if cloud is None:
            cloud = load_point_cloud(cfg.input, target_count=cfg.target_count, seed=cfg.seed)
    with _Stage("field"):
        normals = cloud.normals if cloud.normals is not None else estimate_normals(cloud.points)
        field = DistanceField(cloud.points, normals=normals)
        tau = cfg.optim.resolve_tau(field)
        rho = cfg.inpaint.rho if cfg.inpaint.rho is not None else 2.0 * field.spacing
    with _Stage("init"):
        gset = init_gaussians(cloud, normals) if gaussians is None else gaussians.copy()

    view_records = []
    for i, cam in enumerate(schedule):
        stage = f"view {i}"
        with _Stage(stage + " depth"):
            depth = sphere_trace_depth(field, cam)
        with _Stage(stage + " render"):
            current = rasterizer.render(gset, cam, BACKGROUND)
        with _Stage(stage + " classify"):
            tm = classify_masks(depth, cam, gset, field)
        writable = tm.writable()
        if not writable.any():
            rec = _view_record(i, tm, skipped="nothing to generate or update")
            view_records.append(rec)
            if run_log is not None:
                run_log.write(rec)
            continue
        req = InpaintRequest(current.color, depth, tm, cfg.prompt, seed=int(cfg.seed) + i, camera=cam)
        with _Stage(stage + " inpaint"):
            try:
                resp = provider.inpaint(req)
            except ProviderError as exc:
                # a failed backend call costs the view, not the run
                log.warning("view %d skipped: %s", i, exc)
                resp, failure = None, str(exc)
        if resp is None:
            rec = _view_record(i, tm, skipped=failure)
            view_records.append(rec)
            if run_log is not None:
                run_log.write(rec)
            continue
        with _Stage(stage + " composite"):
            target = composite_final(current.color, resp.image, tm)
        with _Stage(stage + " select"):
            visible = rasterizer.select_first_hit(gset, cam, writable)
            visible = visible.union(assigned_visible(tm, cam, gset))
            visible = visible.union(surface_layer(gset, cam, depth, writable, LAYER_TOL * field.surface_eps))
        with _Stage(stage + " optimize"):
            report = optimize_view(gset, visible, target, cam, field, cfg.optim, BACKGROUND, view=i)
            # a disk seen edge-on can be selected yet cover no pixel; it got no
            # appearance from this view and stays a candidate for inpainting
            shown = rasterizer.rendered_weight(gset, cam, visible.gaussian_indices) > 0
            update_similarity_record(gset, visible.subset(shown))
        if cfg.optim.densify:
            with _Stage(stage + " densify"):
                grads = np.zeros(len(gset))
                grads[np.unique(visible.gaussian_indices)] = report.grad_accum
                gset = densify(gset, grads, cfg.optim, tau=tau)
        if cfg.debug_dir:
            with _Stage(stage + " debug"):
                base = os.path.join(cfg.debug_dir, f"view{i:02d}")
                save_depth_png(depth, base + "_depth.png")
                save_mask_png(tm, base + "_mask.png")
                rasterizer.save_png(rasterizer.RenderBuffers(target, None, None, None), base + "_target.png")
                rasterizer.save_png(rasterizer.render(gset, cam, BACKGROUND), base + "_optimized.png")
        rec = _view_record(i, tm, report, n_visible=len(visible))
        view_records.append(rec)
        if run_log is not None:
            run_log.write(rec)

    n_unseen = int(len(find_unseen(gset)))
    with _Stage("inpaint3d"):
        if gset.seen.any():
            gset, inp = gaussian_inpaint(gset, cfg.inpaint, tau, rho)
            n_fallback = inp.n_fallback
        else:
            raise PipelineError("inpaint3d", "no view produced any seen disk")
    summary = RunSummary(len(cloud), len(gset), n_unseen, n_fallback, view_records)
    if output:
        with _Stage("export"):
            Path(cfg.out).parent.mkdir(parents=True, exist_ok=True)
            export_ply(gset, cfg.out, cloud.scale, cloud.offset)
        summary.output = str(cfg.out)
    summary.wall_time = time.perf_counter() - t0
    if run_log is not None:
        run_log.write({"summary": {k: v for k, v in summary.as_dict().items() if k != "views"}})
    return summary, gset, cloud
