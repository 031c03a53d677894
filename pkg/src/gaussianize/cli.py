"""Command line: ``gaussianize run|render|inspect``.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 pipeline error.
"""

import argparse
import json
import logging
import sys

import numpy as np

from .config import ConfigError, build_config
from .field import PointCloudError
from .ply import PlyError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_PIPELINE = 4

log = logging.getLogger("gaussianize")


def _add_run(sub):
    p = sub.add_parser("run", help="gaussianize a point cloud")
    p.add_argument("--config", help="INI file; flags override its values")
    p.add_argument("--input", help="point cloud (.ply or whitespace-separated .xyz)")
    p.add_argument("--prompt", help="appearance prompt")
    p.add_argument("--provider", choices=("procedural", "remote"))
    p.add_argument("--out", help="output splat PLY")
    p.add_argument("--seed", type=int)
    p.add_argument("--views", type=int, help="total number of cameras")
    p.add_argument("--resolution", type=int, help="square view size in pixels")
    p.add_argument("--densify", action="store_true", default=None, help="clone/split high-gradient disks")
    p.add_argument("--debug-dir", dest="debug_dir", help="write per-view depth, mask and render PNGs here")
    p.add_argument("--log", help="JSON-lines run log (default: next to --out)")


def _add_render(sub):
    p = sub.add_parser("render", help="render a splat PLY to PNG")
    p.add_argument("--input", required=True, help="splat PLY")
    p.add_argument("--out", required=True, help="output PNG")
    p.add_argument("--azimuth", type=float, default=0.0, help="degrees")
    p.add_argument("--elevation", type=float, default=20.0, help="degrees")
    p.add_argument("--radius", type=float, default=2.5, help="camera distance, in normalized units")
    p.add_argument("--fov", type=float, default=50.0, help="vertical field of view, degrees")
    p.add_argument("--resolution", type=int, default=256)
    p.add_argument("--background", type=float, nargs=3, default=(0.0, 0.0, 0.0), metavar=("R", "G", "B"))


def _add_inspect(sub):
    p = sub.add_parser("inspect", help="print statistics of a splat PLY")
    p.add_argument("--input", required=True, help="splat PLY")
    p.add_argument("--json", action="store_true", help="machine-readable output")


def build_parser():
    parser = argparse.ArgumentParser(prog="gaussianize", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    _add_run(sub)
    _add_render(sub)
    _add_inspect(sub)
    return parser


def _normalization(points):
    # same centering and unit-extent scaling the pipeline applies to input clouds
    offset = points.mean(axis=0)
    extent = float(np.ptp(points, axis=0).max()) if len(points) else 0.0
    return offset, (1.0 / extent if extent > 0 else 1.0)


def cmd_run(args):
    from .pipeline import run_pipeline

    cfg = build_config(args.config, input=args.input, prompt=args.prompt, provider=args.provider,
                       out=args.out, seed=args.seed, views=args.views, resolution=args.resolution,
                       densify=args.densify, debug_dir=args.debug_dir, log=args.log)
    summary, _, _ = run_pipeline(cfg)
    print(json.dumps({k: v for k, v in summary.as_dict().items() if k != "views"}, sort_keys=True))
    return EXIT_OK


def cmd_render(args):
    from . import rasterizer
    from .camera import Camera
    from .export import import_ply
    from .ply import read_ply

    cols = read_ply(args.input)
    pts = np.stack([cols["x"], cols["y"], cols["z"]], axis=1).astype(np.float64)
    offset, scale = _normalization(pts)
    gset = import_ply(args.input, scale=scale, offset=offset)
    az, el = np.radians(args.azimuth), np.radians(args.elevation)
    pos = args.radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
    try:
        cam = Camera.look_at(pos, fov_y=np.radians(args.fov), width=args.resolution, height=args.resolution)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    rasterizer.save_png(rasterizer.render(gset, cam, tuple(args.background)), args.out)
    return EXIT_OK


def inspect_stats(gset):
    n = len(gset)
    radii = gset.scales.max(axis=1) if n else np.zeros(0)

    def summary(x):
        if len(x) == 0:
            return None
        return {"min": float(x.min()), "mean": float(x.mean()), "max": float(x.max())}

    lo = gset.centers.min(axis=0).tolist() if n else None
    hi = gset.centers.max(axis=0).tolist() if n else None
    return {
        "count": n,
        "bbox_min": lo,
        "bbox_max": hi,
        "radius": summary(radii),
        "opacity": summary(gset.opacities),
        "color_mean": gset.colors.mean(axis=0).tolist() if n else None,
    }


def cmd_inspect(args):
    from .export import import_ply

    stats = inspect_stats(import_ply(args.input))
    if args.json:
        print(json.dumps(stats, sort_keys=True))
        return EXIT_OK
    print(f"gaussians  {stats['count']}")
    if stats["count"]:
        print("bbox       " + " ".join(f"{v:.4g}" for v in stats["bbox_min"]) + "  ..  "
              + " ".join(f"{v:.4g}" for v in stats["bbox_max"]))
        for key in ("radius", "opacity"):
            s = stats[key]
            print(f"{key:<10} min {s['min']:.4g}  mean {s['mean']:.4g}  max {s['max']:.4g}")
        print("color mean " + " ".join(f"{v:.3f}" for v in stats["color_mean"]))
    return EXIT_OK


def main(argv=None):
    from .pipeline import PipelineError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    handler = {"run": cmd_run, "render": cmd_render, "inspect": cmd_inspect}[args.command]
    try:
        return handler(args)
    except ConfigError as exc:
        print(f"gaussianize: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PipelineError as exc:
        print(f"gaussianize: {exc}", file=sys.stderr)
        return EXIT_IO if exc.io else EXIT_PIPELINE
    except (OSError, PlyError) as exc:
        print(f"gaussianize: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (PointCloudError, ValueError) as exc:
        print(f"gaussianize: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
