"""Run configuration: every tunable default in one TOML-backed structure.

``config_template()`` renders the full commented file emitted by
``handgs config init``. Unknown sections or keys are rejected.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from .errors import ConfigError
from .render import RenderSettings


def _f(default, doc: str):
    if isinstance(default, (list, dict)):
        return field(default_factory=lambda: type(default)(default), metadata={"doc": doc})
    return field(default=default, metadata={"doc": doc})


@dataclass
class ModelConfig:
    z_max: float = _f(0.002, "normal offset ceiling in meters; offset = z_max * sigmoid(logit)")
    gaussians_per_face: int = _f(1, "Gaussians created per face at initialization")
    init_opacity: float = _f(0.1, "initial opacity")
    init_albedo: float = _f(0.5, "initial gray albedo")
    init_scale_factor: float = _f(0.7, "initial scale = factor * sqrt(face area)")
    palm_axis: list = _f([0.0, 0.0, 1.0], "rest-space axis marking palm faces when the rig has no labels")


@dataclass
class LightingConfig:
    sh_order: int = _f(2, "spherical-harmonics order (0..4)")
    hidden: list = _f([64, 64], "hidden layer widths of the pose -> lighting MLP")
    activation: str = _f("softplus", "hidden activation: softplus | silu | tanh | relu")
    include_translation: bool = _f(False, "feed the root translation to the MLP as well")
    base_irradiance: float = _f(1.0, "uniform irradiance the untrained network predicts")


@dataclass
class RenderConfig:
    alpha_max: float = _f(0.99, "per-splat alpha clamp")
    t_min: float = _f(1e-4, "stop compositing a pixel once transmittance drops below this")
    tile_size: int = _f(16, "rasterizer tile edge in pixels")
    cutoff_alpha: float = _f(1e-9, "tile binning drops a splat where its alpha falls below this")
    eps_cov: float = _f(0.3, "added to the screen covariance diagonal, pixels^2")
    near: float = _f(0.01, "near plane in meters")
    cull_sigma: float = _f(3.0, "cull splats whose center is this many sigma outside the image")
    background: list = _f([0.0, 0.0, 0.0], "linear RGB behind the avatar during fitting")
    compositor: str = _f("tiled", "differentiable compositor for fitting: tiled (fast) | dense (all pixel/splat pairs)")

    def settings(self) -> RenderSettings:
        return RenderSettings(self.alpha_max, self.t_min, self.tile_size, self.cutoff_alpha,
                              self.eps_cov, self.near, self.cull_sigma)


@dataclass
class LossConfig:
    lambda_dssim: float = _f(0.2, "loss = (1 - lambda) L1 + lambda (1 - SSIM)")
    vertex_reg: float = _f(1e-2, "L2 weight on canonical vertex offsets (in median-edge units)")
    pose_reg: float = _f(1e-3, "L2 weight on the current frame's pose refinement")


@dataclass
class OptimConfig:
    iterations: int = _f(2000, "training iterations")
    beta1: float = _f(0.9, "Adam first-moment decay")
    beta2: float = _f(0.999, "Adam second-moment decay")
    eps: float = _f(1e-15, "Adam denominator epsilon")
    lr_bary_logits: float = _f(0.02, "learning rate, barycentric logits")
    lr_log_scales: float = _f(0.01, "learning rate, log scales")
    lr_rotation: float = _f(0.02, "learning rate, in-plane rotation")
    lr_offset_logit: float = _f(0.02, "learning rate, normal offset logit")
    lr_albedo_logits: float = _f(0.03, "learning rate, albedo logits")
    lr_opacity_logit: float = _f(0.05, "learning rate, opacity logit")
    lr_vertex_offsets: float = _f(2e-5, "learning rate, canonical vertex offsets (meters)")
    lr_lighting: float = _f(2e-3, "learning rate, lighting MLP hidden layers")
    lr_lighting_out: float = _f(2e-2, "learning rate, lighting MLP output layer")
    lr_pose_rotations: float = _f(2e-3, "learning rate, per-frame rotation refinement (10x below Gaussians)")
    lr_pose_translations: float = _f(2e-5, "learning rate, per-frame root translation refinement")
    freeze: list = _f([], "parameter blocks (prefixes such as 'gauss.' or 'light.') held fixed")


@dataclass
class ControlConfig:
    interval: int = _f(200, "iterations between control cycles; 0 disables control")
    start: int = _f(400, "first iteration eligible for a control cycle")
    stop: int = _f(1500, "last iteration eligible for a control cycle")
    grad_threshold: float = _f(2e-4, "mean world-center gradient norm that triggers densification")
    split_scale_factor: float = _f(1.5, "split instead of clone above this many median edge lengths")
    prune_opacity: float = _f(0.01, "prune below this opacity")
    scale_cap_factor: float = _f(5.0, "prune above this many median edge lengths")
    max_gaussians: int = _f(50000, "population ceiling")
    min_gaussians: int = _f(16, "pruning never goes below this many Gaussians")
    split_factor: float = _f(1.6, "child scale = parent scale / split_factor")
    split_jitter: float = _f(0.3, "std-dev of the barycentric-logit jitter given to split children")


@dataclass
class FitConfig:
    seed: int = _f(0, "master seed for initialization and frame sampling")
    log_interval: int = _f(10, "iterations between loss-curve rows")
    checkpoint_interval: int = _f(500, "iterations between checkpoints; 0 disables")
    precision: str = _f("f64", "f64 or f32")
    threads: int = _f(1, "worker threads for torch and the rasterizer")


SECTIONS = {
    "model": ModelConfig,
    "lighting": LightingConfig,
    "render": RenderConfig,
    "loss": LossConfig,
    "optim": OptimConfig,
    "control": ControlConfig,
    "fit": FitConfig,
}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    lighting: LightingConfig = field(default_factory=LightingConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    control: ControlConfig = field(default_factory=ControlConfig)
    fit: FitConfig = field(default_factory=FitConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
        kwargs = {}
        for name, klass in SECTIONS.items():
            section = d.get(name, {})
            if not isinstance(section, dict):
                raise ConfigError(f"[{name}] must be a table")
            names = {f.name for f in dataclasses.fields(klass)}
            bad = set(section) - names
            if bad:
                raise ConfigError(f"unknown key(s) in [{name}]: {sorted(bad)}")
            try:
                kwargs[name] = klass(**section)
            except TypeError as e:
                raise ConfigError(str(e)) from e
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.model.z_max <= 0:
            raise ConfigError("model.z_max must be positive")
        if not 0 <= self.lighting.sh_order <= 4:
            raise ConfigError("lighting.sh_order must be in 0..4")
        if not 0 <= self.loss.lambda_dssim <= 1:
            raise ConfigError("loss.lambda_dssim must be in [0, 1]")
        if self.render.compositor not in ("tiled", "dense"):
            raise ConfigError("render.compositor must be tiled or dense")
        if self.optim.iterations < 1:
            raise ConfigError("optim.iterations must be at least 1")
        if self.model.gaussians_per_face < 1:
            raise ConfigError("model.gaussians_per_face must be at least 1")
        if not 0 < self.model.init_opacity < 1 or not 0 < self.model.init_albedo < 1:
            raise ConfigError("model.init_opacity and model.init_albedo must be in (0, 1)")
        if not 0 < self.render.alpha_max < 1:
            raise ConfigError("render.alpha_max must be in (0, 1)")
        if self.render.tile_size < 1:
            raise ConfigError("render.tile_size must be positive")
        if self.fit.threads < 1 or self.fit.log_interval < 1:
            raise ConfigError("fit.threads and fit.log_interval must be at least 1")
        if self.fit.precision not in ("f32", "f64"):
            raise ConfigError("fit.precision must be f32 or f64")
        c = self.control
        if not 0 < c.prune_opacity < 1:
            raise ConfigError("control.prune_opacity must be in (0, 1)")
        for key in ("grad_threshold", "split_scale_factor", "scale_cap_factor", "max_gaussians", "split_factor"):
            if getattr(c, key) <= 0:
                raise ConfigError(f"control.{key} must be positive")


def load_config(path) -> RunConfig:
    try:
        data = tomli.loads(Path(path).read_text())
    except (OSError, tomli.TOMLDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return RunConfig.from_dict(data)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return f'"{v}"'
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return repr(v)


def config_template(cfg: RunConfig | None = None) -> str:
    cfg = cfg or RunConfig()
    lines = ["# handgs run configuration. Every key is optional; shown values are the defaults.", ""]
    for name in SECTIONS:
        section = getattr(cfg, name)
        lines.append(f"[{name}]")
        for f in dataclasses.fields(section):
            lines.append(f"# {f.metadata['doc']}")
            lines.append(f"{f.name} = {_toml_value(getattr(section, f.name))}")
        lines.append("")
    return "\n".join(lines)
