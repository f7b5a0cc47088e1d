"""Pipeline configuration read from an INI file.

Every key lives in a section named after the stage that owns it; values are
checked on load and a bad value is reported as ``section.key``.
"""
from __future__ import annotations

import configparser
import dataclasses
import math
import os
from dataclasses import dataclass, field


class ConfigError(ValueError):
    pass


def _check(ok: bool, name: str, why: str):
    if not ok:
        raise ConfigError(f"{name}: {why}")


@dataclass(frozen=True)
class ScheduleConfig:
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    zero_snr: bool = True

    def validate(self, s: str):
        _check(self.timesteps >= 2, f"{s}.timesteps", "must be >= 2")
        _check(0.0 < self.beta_start < 1.0, f"{s}.beta_start", "must lie in (0, 1)")
        _check(self.beta_start <= self.beta_end < 1.0, f"{s}.beta_end", "must lie in [beta_start, 1)")


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    solver: str = "ddim"
    guidance_scale: float = 6.0
    guidance_power: float = 5.0
    guidance: bool = True

    def validate(self, s: str):
        _check(self.steps >= 1, f"{s}.steps", "must be >= 1")
        _check(self.solver in ("ddim", "dpmpp2m"), f"{s}.solver", "must be ddim or dpmpp2m")
        _check(self.guidance_scale >= 1.0, f"{s}.guidance_scale", "must be >= 1")
        _check(self.guidance_power > 0.0, f"{s}.guidance_power", "must be positive")


@dataclass(frozen=True)
class ViewsConfig:
    count: int = 12
    resolution: int = 32
    radius: float = 3.0
    elevation_deg: float = 20.0
    fov_deg: float = 50.0
    near: float = 0.1
    far: float = 10.0

    def validate(self, s: str):
        _check(self.count >= 1, f"{s}.count", "must be >= 1")
        _check(self.resolution >= 1, f"{s}.resolution", "must be >= 1")
        _check(self.radius > 0.0, f"{s}.radius", "must be positive")
        _check(-90.0 < self.elevation_deg < 90.0, f"{s}.elevation_deg", "must lie in (-90, 90)")
        _check(0.0 < self.fov_deg < 180.0, f"{s}.fov_deg", "must lie in (0, 180)")
        _check(self.near > 0.0, f"{s}.near", "must be positive")
        _check(self.far > self.near, f"{s}.far", "must exceed near")


@dataclass(frozen=True)
class UVConfig:
    resolution: int = 256
    latent_resolution: int = 64
    face_eps: float = 0.1
    depth_eps: float = 1e-3
    blend_power: int = 2

    def validate(self, s: str):
        _check(self.resolution >= 1, f"{s}.resolution", "must be >= 1")
        _check(self.latent_resolution >= 1, f"{s}.latent_resolution", "must be >= 1")
        _check(-1.0 <= self.face_eps < 1.0, f"{s}.face_eps", "must lie in [-1, 1)")
        _check(self.depth_eps > 0.0, f"{s}.depth_eps", "must be positive")
        _check(self.blend_power >= 0, f"{s}.blend_power", "must be >= 0")


@dataclass(frozen=True)
class LightsConfig:
    count_min: int = 3
    count_max: int = 10
    intensity_min: float = 1.0
    intensity_max: float = 10.0
    radius_min: float = 2.0
    radius_max: float = 4.0
    env_samples: int = 128

    def validate(self, s: str):
        _check(self.count_min >= 1, f"{s}.count_min", "must be >= 1")
        _check(self.count_max >= self.count_min, f"{s}.count_max", "must be >= count_min")
        _check(self.intensity_min > 0.0, f"{s}.intensity_min", "must be positive")
        _check(self.intensity_max >= self.intensity_min, f"{s}.intensity_max", "must be >= intensity_min")
        _check(self.radius_min > 0.0, f"{s}.radius_min", "must be positive")
        _check(self.radius_max >= self.radius_min, f"{s}.radius_max", "must be >= radius_min")
        _check(self.env_samples >= 1, f"{s}.env_samples", "must be >= 1")


@dataclass(frozen=True)
class ModelConfig:
    width: int = 64
    heads: int = 4
    branch_blocks: int = 1
    shared_blocks: int = 2
    patch: int = 2
    time_dim: int = 64
    mlp_ratio: int = 4
    positional: bool = True

    def validate(self, s: str):
        _check(self.width >= 1, f"{s}.width", "must be >= 1")
        _check(self.heads >= 1 and self.width % self.heads == 0, f"{s}.heads", "must divide width")
        _check(self.branch_blocks >= 0, f"{s}.branch_blocks", "must be >= 0")
        _check(self.shared_blocks >= 0, f"{s}.shared_blocks", "must be >= 0")
        _check(self.patch >= 1, f"{s}.patch", "must be >= 1")
        _check(self.time_dim >= 2 and self.time_dim % 2 == 0, f"{s}.time_dim", "must be an even number >= 2")
        _check(self.mlp_ratio >= 1, f"{s}.mlp_ratio", "must be >= 1")


@dataclass(frozen=True)
class TrainSection:
    steps: int = 2000
    lr: float = 1e-3
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    cond_dropout: float = 0.1
    v_norm: str = "l1"
    pbr_norm: str = "l1"
    pbr_weight: float = 1.0
    checkpoint_every: int = 0

    def validate(self, s: str):
        _check(self.steps >= 1, f"{s}.steps", "must be >= 1")
        _check(self.lr > 0.0, f"{s}.lr", "must be positive")
        _check(self.weight_decay >= 0.0, f"{s}.weight_decay", "must be >= 0")
        _check(self.grad_clip >= 0.0, f"{s}.grad_clip", "must be >= 0")
        _check(0.0 <= self.cond_dropout <= 1.0, f"{s}.cond_dropout", "must lie in [0, 1]")
        _check(self.v_norm in ("l1", "l2"), f"{s}.v_norm", "must be l1 or l2")
        _check(self.pbr_norm in ("l1", "l2"), f"{s}.pbr_norm", "must be l1 or l2")
        _check(self.pbr_weight >= 0.0, f"{s}.pbr_weight", "must be >= 0")
        _check(self.checkpoint_every >= 0, f"{s}.checkpoint_every", "must be >= 0")


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    views: ViewsConfig = field(default_factory=ViewsConfig)
    uv: UVConfig = field(default_factory=UVConfig)
    lights: LightsConfig = field(default_factory=LightsConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSection = field(default_factory=TrainSection)

    def validate(self) -> "PipelineConfig":
        for f in dataclasses.fields(self):
            if f.name == "seed":
                _check(self.seed >= 0, "seed", "must be >= 0")
            else:
                getattr(self, f.name).validate(f.name)
        _check(self.views.resolution % self.model.patch == 0, "views.resolution", "must be divisible by model.patch")
        _check(self.uv.latent_resolution % self.model.patch == 0, "uv.latent_resolution",
               "must be divisible by model.patch")
        return self

    def override(self, section: str, **values) -> "PipelineConfig":
        """Copy with some keys of one section replaced, then revalidate."""
        values = {k: v for k, v in values.items() if v is not None}
        if not values:
            return self
        return dataclasses.replace(self, **{section: dataclasses.replace(getattr(self, section), **values)}).validate()

    @property
    def elevation(self) -> float:
        return math.radians(self.views.elevation_deg)

    @property
    def fov(self) -> float:
        return math.radians(self.views.fov_deg)

    def to_ini(self) -> str:
        lines = [f"seed = {self.seed}", ""]
        for f in dataclasses.fields(self):
            if f.name == "seed":
                continue
            lines.append(f"[{f.name}]")
            for k, v in dataclasses.asdict(getattr(self, f.name)).items():
                lines.append(f"{k} = {str(v).lower() if isinstance(v, bool) else v}")
            lines.append("")
        return "\n".join(lines)


def _convert(raw: str, kind, name: str):
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw.strip())
    except ValueError:
        raise ConfigError(f"{name}: cannot read {raw!r} as {kind.__name__}") from None


def parse_config(text: str) -> PipelineConfig:
    parser = configparser.ConfigParser(default_section="__none__", interpolation=None)
    try:
        parser.read_string("[__top__]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    sections = {f.name: f for f in dataclasses.fields(PipelineConfig)}
    base = PipelineConfig()
    kwargs = {}
    for sec in parser.sections():
        if sec == "__top__":
            for key, raw in parser.items(sec):
                _check(key == "seed", key, "unknown top-level key")
                kwargs["seed"] = _convert(raw, int, "seed")
            continue
        _check(sec in sections and sec != "seed", sec, "unknown section")
        current = getattr(base, sec)
        types = {f.name: type(getattr(current, f.name)) for f in dataclasses.fields(current)}
        values = {}
        for key, raw in parser.items(sec):
            _check(key in types, f"{sec}.{key}", "unknown key")
            values[key] = _convert(raw, types[key], f"{sec}.{key}")
        kwargs[sec] = dataclasses.replace(current, **values)
    return PipelineConfig(**kwargs).validate()


def load_config(path: str | os.PathLike | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig().validate()
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
