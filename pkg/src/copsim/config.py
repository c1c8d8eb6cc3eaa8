"""Scenario configuration: defaults, JSON loading, validation.

A config file only needs the fields that differ from the defaults; sections
merge key-by-key. Validation errors always name the offending field.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

from .pillars import GridSpec
from .sampling import SamplingPolicy
from .scenegen import SceneParams


class ConfigError(ValueError):
    """Invalid or inconsistent scenario configuration."""


@dataclass(frozen=True)
class ChannelModel:
    pose_noise_m: float = 0.0
    pose_noise_rad: float = 0.0
    latency_frames: int = 0
    icp: bool = False
    icp_max_iters: int = 30
    icp_tol: float = 1e-10


@dataclass(frozen=True)
class LossWeights:
    beta: float = 0.25
    lam: float = 10.0
    gamma1: float = 1000.0
    gamma2: float = 10.0


@dataclass(frozen=True)
class AblationFlags:
    sef: bool = True
    pc: bool = True
    acf: bool = True
    scorer: str = "oracle"  # oracle | heuristic


@dataclass(frozen=True)
class CodebookParams:
    k: int = 128
    iters: int = 10
    train: bool = True
    train_scenes: int = 6
    train_rps_ratio: float = 0.1
    path: str | None = None


@dataclass(frozen=True)
class ScenarioConfig:
    scene: SceneParams = field(default_factory=SceneParams)
    density: float = 2.5
    grid: GridSpec = field(default_factory=lambda: GridSpec.centered(80.0))
    patch_edge: int = 4
    sampling: SamplingPolicy = field(default_factory=SamplingPolicy)
    codebook: CodebookParams = field(default_factory=CodebookParams)
    channel: ChannelModel = field(default_factory=ChannelModel)
    weights: LossWeights = field(default_factory=LossWeights)
    ablation: AblationFlags = field(default_factory=AblationFlags)
    fusion_tau_o: float = 0.5
    eval_scenes: int = 2
    seed: int = 0

    def validate(self) -> "ScenarioConfig":
        try:
            self.scene.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if self.density <= 0:
            raise ConfigError("density: must be > 0")
        if self.patch_edge < 1:
            raise ConfigError("patch.p: must be >= 1")
        if self.grid.h % self.patch_edge:
            raise ConfigError(f"grid.h: {self.grid.h} is not divisible by patch.p={self.patch_edge}")
        if self.grid.w % self.patch_edge:
            raise ConfigError(f"grid.w: {self.grid.w} is not divisible by patch.p={self.patch_edge}")
        if self.grid.c < 8:
            raise ConfigError("grid.c: must be >= 8 for pillar features")
        if not 0.0 <= self.fusion_tau_o <= 1.0:
            raise ConfigError("fusion.tau_o: must lie in [0, 1]")
        if self.channel.pose_noise_m < 0 or self.channel.pose_noise_rad < 0:
            raise ConfigError("channel.pose_noise_m/pose_noise_rad: must be >= 0")
        if self.channel.latency_frames < 0:
            raise ConfigError("channel.latency_frames: must be >= 0")
        if self.channel.latency_frames >= self.scene.frames:
            raise ConfigError(
                f"channel.latency_frames: {self.channel.latency_frames} leaves no frame to "
                f"evaluate; scene.frames={self.scene.frames}"
            )
        if self.codebook.k < 1:
            raise ConfigError("codebook.k: must be >= 1")
        if self.codebook.iters < 1:
            raise ConfigError("codebook.iters: must be >= 1")
        if self.codebook.train_scenes < 1:
            raise ConfigError("codebook.train_scenes: must be >= 1")
        if not 0.0 < self.codebook.train_rps_ratio <= 1.0:
            raise ConfigError("codebook.train_rps_ratio: must lie in (0, 1]")
        if self.ablation.scorer not in ("oracle", "heuristic"):
            raise ConfigError(f"ablation.scorer: unknown scorer {self.ablation.scorer!r}")
        if self.eval_scenes < 1:
            raise ConfigError("eval_scenes: must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed: must be >= 0")
        return self


_SECTIONS = ("scene", "grid", "sampling", "codebook", "channel", "weights", "ablation")

_WEIGHT_ALIASES = {"lambda": "lam"}


def _build_section(name: str, defaults, overrides: dict):
    fields = set(defaults.__dataclass_fields__)
    kwargs = {}
    for key, value in overrides.items():
        attr = _WEIGHT_ALIASES.get(key, key) if name == "weights" else key
        if attr not in fields:
            raise ConfigError(f"{name}.{key}: unknown field")
        kwargs[attr] = value
    try:
        return replace(defaults, **kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{name}: {e}") from None


def config_from_dict(d: dict) -> ScenarioConfig:
    base = ScenarioConfig()
    kwargs = {}
    for key, value in d.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"{key}: expected an object")
            kwargs[key] = _build_section(key, getattr(base, key), value)
        elif key == "patch":
            if not isinstance(value, dict) or set(value) - {"p"}:
                raise ConfigError("patch: expected an object with field 'p'")
            kwargs["patch_edge"] = value.get("p", base.patch_edge)
        elif key == "fusion":
            if not isinstance(value, dict) or set(value) - {"tau_o"}:
                raise ConfigError("fusion: expected an object with field 'tau_o'")
            kwargs["fusion_tau_o"] = value.get("tau_o", base.fusion_tau_o)
        elif key in ("density", "eval_scenes", "seed"):
            kwargs[key] = value
        else:
            raise ConfigError(f"{key}: unknown field")
    try:
        cfg = replace(base, **kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    return cfg.validate()


def config_to_dict(cfg: ScenarioConfig) -> dict:
    d = {
        "scene": asdict(cfg.scene),
        "density": cfg.density,
        "grid": asdict(cfg.grid),
        "patch": {"p": cfg.patch_edge},
        "sampling": asdict(cfg.sampling),
        "codebook": asdict(cfg.codebook),
        "channel": asdict(cfg.channel),
        "weights": {
            "beta": cfg.weights.beta,
            "lambda": cfg.weights.lam,
            "gamma1": cfg.weights.gamma1,
            "gamma2": cfg.weights.gamma2,
        },
        "ablation": asdict(cfg.ablation),
        "fusion": {"tau_o": cfg.fusion_tau_o},
        "eval_scenes": cfg.eval_scenes,
        "seed": cfg.seed,
    }
    return d


def load_config(path: str) -> ScenarioConfig:
    try:
        with open(path) as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top-level JSON value must be an object")
    return config_from_dict(raw)


def save_config(path: str, cfg: ScenarioConfig) -> None:
    with open(path, "w") as f:
        json.dump(config_to_dict(cfg), f, sort_keys=True, indent=1)
        f.write("\n")
