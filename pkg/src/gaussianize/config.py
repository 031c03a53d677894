"""Run configuration: defaults, INI file, command-line overrides (in rising precedence).

File format (all keys optional)::

    [run]
    input = cloud.ply
    out = splats.ply
    prompt = weathered bronze
    seed = 0
    resolution = 256
    target_count = 20000
    log = run.jsonl
    debug_dir = debug/

    [provider]
    kind = procedural          ; or remote
    remote.url = http://host:8000
    remote.timeout = 60

    [views]
    count = 16
    radius = 2.5
    fov_deg = 50
    elevation_deg = 20

    [optim]
    steps_per_view = 150
    lr_center = 1.6e-4
    lr_rotation = 1e-3
    lr_scale = 5e-3
    lr_opacity = 5e-2
    lr_color = 2.5e-2
    alpha = 1.0
    beta = 10.0
    tau = 0.02                 ; default: twice the mean 3-NN spacing
    densify = false
    densify_grad_threshold = 2e-4

    [inpaint]
    L = 8
    o0 = 0.9
    P0 = 8
    rho = 0.02                 ; default: twice the mean 3-NN spacing
"""

import configparser
from dataclasses import dataclass, field, fields

import numpy as np

from .inpaint3d import InpaintConfig
from .optimizer import OptimConfig
from .views import DEFAULT_RADIUS, DEFAULT_VIEWS, ScheduleError, schedule_for_count


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    input: str = None
    out: str = "splats.ply"
    prompt: str = ""
    seed: int = 0
    resolution: int = 256
    target_count: int = None
    log: str = None  # default: next to the output, suffix .jsonl
    debug_dir: str = None
    provider: str = "procedural"
    remote_url: str = None
    remote_timeout: float = 60.0
    views: int = DEFAULT_VIEWS
    radius: float = DEFAULT_RADIUS
    fov_deg: float = 50.0
    elevation_deg: float = 20.0
    optim: OptimConfig = field(default_factory=OptimConfig)
    inpaint: InpaintConfig = field(default_factory=InpaintConfig)

    def validate(self):
        if not self.input:
            raise ConfigError("no input point cloud given")
        if self.provider not in ("procedural", "remote"):
            raise ConfigError(f"unknown provider {self.provider!r} (expected procedural or remote)")
        if self.provider == "remote" and not self.remote_url:
            raise ConfigError("remote provider needs provider.remote.url")
        if self.views < 2:
            raise ConfigError("schedule requires ≥ 2 cameras")
        if self.radius <= 1.0:
            raise ConfigError(f"view radius must exceed 1, got {self.radius}")
        if not 0.0 < self.fov_deg < 180.0:
            raise ConfigError(f"fov_deg must lie in (0, 180), got {self.fov_deg}")
        if self.resolution < 16:
            raise ConfigError(f"resolution must be at least 16, got {self.resolution}")
        if self.target_count is not None and self.target_count < 1:
            raise ConfigError(f"target_count must be positive, got {self.target_count}")
        try:
            self.optim.validate()
            self.inpaint.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional(conv):
    def parse(text):
        return None if str(text).strip().lower() in ("", "none", "auto") else conv(text)
    return parse


# (section, key) -> (target, attribute, parser); target None means RunConfig itself
_KEYS = {
    ("run", "input"): (None, "input", str),
    ("run", "out"): (None, "out", str),
    ("run", "prompt"): (None, "prompt", str),
    ("run", "seed"): (None, "seed", int),
    ("run", "resolution"): (None, "resolution", int),
    ("run", "target_count"): (None, "target_count", _optional(int)),
    ("run", "log"): (None, "log", _optional(str)),
    ("run", "debug_dir"): (None, "debug_dir", _optional(str)),
    ("provider", "kind"): (None, "provider", str),
    ("provider", "remote.url"): (None, "remote_url", _optional(str)),
    ("provider", "remote.timeout"): (None, "remote_timeout", float),
    ("views", "count"): (None, "views", int),
    ("views", "radius"): (None, "radius", float),
    ("views", "fov_deg"): (None, "fov_deg", float),
    ("views", "elevation_deg"): (None, "elevation_deg", float),
    ("inpaint", "l"): ("inpaint", "L", int),
    ("inpaint", "o0"): ("inpaint", "o0", float),
    ("inpaint", "p0"): ("inpaint", "P0", float),
    ("inpaint", "rho"): ("inpaint", "rho", _optional(float)),
}
for _f in fields(OptimConfig):
    _parse = {"steps_per_view": int, "densify": _bool, "tau": _optional(float)}.get(_f.name, float)
    _KEYS[("optim", _f.name)] = ("optim", _f.name, _parse)


def _assign(cfg, section, key, value, source):
    spec = _KEYS.get((section, key.lower()))
    if spec is None:
        raise ConfigError(f"{source}: unknown key [{section}] {key}")
    target, attr, parse = spec
    try:
        parsed = parse(value)
    except ValueError as exc:
        raise ConfigError(f"{source}: bad value for [{section}] {key}: {exc}") from None
    setattr(cfg if target is None else getattr(cfg, target), attr, parsed)


def load_config(path, cfg=None):
    """Apply an INI file on top of ``cfg`` (defaults when None)."""
    cfg = RunConfig() if cfg is None else cfg
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    try:
        with open(path, encoding="utf-8") as f:
            parser.read_file(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    for section in parser.sections():
        for key, value in parser.items(section):
            _assign(cfg, section, key, value, path)
    return cfg


def apply_overrides(cfg, **flags):
    """Set every flag that is not None; names follow RunConfig plus ``densify``."""
    for name, value in flags.items():
        if value is None:
            continue
        if name == "densify":
            cfg.optim.densify = bool(value)
        elif hasattr(cfg, name):
            setattr(cfg, name, value)
        else:
            raise ConfigError(f"unknown override {name}")
    return cfg


def build_config(path=None, **flags):
    cfg = RunConfig()
    if path is not None:
        load_config(path, cfg)
    apply_overrides(cfg, **flags)
    return cfg.validate()


def check_schedule(cfg):
    """Build the camera schedule, reporting problems as configuration errors."""
    try:
        return schedule_for_count(cfg.views, radius=cfg.radius, fov_y=np.radians(cfg.fov_deg),
                                  width=cfg.resolution, height=cfg.resolution,
                                  elevation=np.radians(cfg.elevation_deg))
    except (ScheduleError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
