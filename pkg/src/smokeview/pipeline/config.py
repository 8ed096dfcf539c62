"""Pipeline configuration: TOML with one ``[section]`` per stage, validated strictly."""

from __future__ import annotations

import hashlib
import json
import sys
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ..dehaze import DehazeParams
from ..enhance import DEFAULT_MODEL, DEFAULT_PROMPT_TEXT, GateConfig
from ..ensemble import DESK_RUNS, PAPER_RUNS, EnsembleConfig
from ..splat.optim import DESK_ITERATIONS, PAPER_ITERATIONS, LearningRates, OptimConfig
from ..splat.render import RenderSettings

PRESETS = {
    "desk": {"iterations": DESK_ITERATIONS, "n_runs": DESK_RUNS},
    "paper": {"iterations": PAPER_ITERATIONS, "n_runs": PAPER_RUNS},
}


class ConfigError(ValueError):
    pass


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PathsSection(_Section):
    data: Path
    out: Path
    cache: Path | None = None


class RestoreSection(_Section):
    enabled: bool = True
    kind: Literal["identity", "gray_world_stretch", "external_command"] = "gray_world_stretch"
    command: list[str] = Field(default_factory=list)
    workers: int = Field(1, ge=1)


class DehazeSection(_Section):
    enabled: bool = True
    patch_radius: int = Field(7, ge=0)
    omega: float = Field(0.95, gt=0, le=1)
    airlight_fraction: float = Field(0.001, gt=0, le=1)
    t_floor: float = Field(0.1, gt=0, lt=1)
    guided_radius: int = Field(30, ge=0)
    guided_eps: float = Field(1e-3, gt=0)
    workers: int = Field(1, ge=1)

    def params(self) -> DehazeParams:
        return DehazeParams(self.patch_radius, self.omega, self.airlight_fraction, self.t_floor,
                            self.guided_radius, self.guided_eps)


class EnhanceSection(_Section):
    enabled: bool = True
    mock: bool = True
    gamma: float = Field(1.0, gt=0)
    gain: float = Field(1.0, gt=0)
    prompt: str = Field(DEFAULT_PROMPT_TEXT, min_length=1)
    model: str = DEFAULT_MODEL
    ssim_threshold: float = 0.6
    replay_dir: Path | None = None
    workers: int = Field(1, ge=1)

    def gate(self) -> GateConfig:
        return GateConfig(self.ssim_threshold)


class OptimizeSection(_Section):
    iterations: int | None = Field(None, ge=0)
    budget: int = Field(200, ge=1)
    lr_positions: float = 2e-3
    lr_positions_final: float = 2e-5
    lr_log_scales: float = 1e-2
    lr_quats: float = 5e-3
    lr_opacity: float = 5e-2
    lr_colors: float = 1e-2
    lr_background: float = 5e-3
    relocation_interval: int = Field(100, ge=1)
    relocation_until: float = Field(0.8, ge=0, le=1)
    dead_opacity: float = Field(0.005, ge=0, lt=1)
    opacity_reg: float = Field(0.01, ge=0)
    scale_reg: float = Field(0.01, ge=0)
    noise_scale: float = Field(0.5, ge=0)
    loss_lambda: float = Field(0.2, ge=0, le=1)
    alpha_max: float = Field(0.995, gt=0, le=1)
    alpha_min: float = Field(1 / 255, ge=0)
    sigma_cutoff: float = Field(3.0, gt=0)
    cov_floor: float = Field(0.3, ge=0)


class EnsembleSection(_Section):
    n_runs: int | None = Field(None, ge=1)
    base_seed: int = 0
    workers: int = Field(1, ge=1)


class EvalSection(_Section):
    enabled: bool = True
    method_name: str = "smokeview"


class PipelineConfig(_Section):
    preset: Literal["desk", "paper"] = "desk"
    paths: PathsSection
    restore: RestoreSection = Field(default_factory=RestoreSection)
    dehaze: DehazeSection = Field(default_factory=DehazeSection)
    enhance: EnhanceSection = Field(default_factory=EnhanceSection)
    optimize: OptimizeSection = Field(default_factory=OptimizeSection)
    ensemble: EnsembleSection = Field(default_factory=EnsembleSection)
    eval: EvalSection = Field(default_factory=EvalSection)

    @model_validator(mode="after")
    def _fill_preset(self):
        values = PRESETS[self.preset]
        if self.optimize.iterations is None:
            self.optimize.iterations = values["iterations"]
        if self.ensemble.n_runs is None:
            self.ensemble.n_runs = values["n_runs"]
        return self

    def with_preset(self, preset: str) -> PipelineConfig:
        """Swap the preset's iteration and run counts in, overriding the file."""
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}")
        data = self.model_dump()
        data["preset"] = preset
        data["optimize"]["iterations"] = PRESETS[preset]["iterations"]
        data["ensemble"]["n_runs"] = PRESETS[preset]["n_runs"]
        return PipelineConfig.model_validate(data)

    def optim_config(self) -> OptimConfig:
        o = self.optimize
        return OptimConfig(
            iterations=o.iterations,
            budget=o.budget,
            lr=LearningRates(o.lr_positions, o.lr_positions_final, o.lr_log_scales, o.lr_quats,
                             o.lr_opacity, o.lr_colors, o.lr_background),
            relocation_interval=o.relocation_interval,
            relocation_until=o.relocation_until,
            dead_opacity=o.dead_opacity,
            opacity_reg=o.opacity_reg,
            scale_reg=o.scale_reg,
            noise_scale=o.noise_scale,
            loss_lambda=o.loss_lambda,
            seed=self.ensemble.base_seed,
            render=RenderSettings(alpha_max=o.alpha_max, alpha_min=o.alpha_min,
                                  sigma_cutoff=o.sigma_cutoff, cov_floor=o.cov_floor),
        )

    def ensemble_config(self) -> EnsembleConfig:
        return EnsembleConfig(self.ensemble.n_runs, self.ensemble.base_seed, self.ensemble.workers)

    def cache_dir(self) -> Path:
        return self.paths.cache if self.paths.cache is not None else self.paths.out / "cache"

    def semantic_dict(self) -> dict:
        """Config content that affects results (no paths, no worker counts)."""
        data = self.model_dump(mode="json", exclude={"paths"})
        for section in ("restore", "dehaze", "enhance", "ensemble"):
            data[section].pop("workers", None)
        data["enhance"].pop("replay_dir", None)
        return data

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.semantic_dict(), sort_keys=True).encode()).hexdigest()


def _resolve(base: Path, p):
    p = Path(p)
    return p if p.is_absolute() else (base / p)


def parse_config(doc: dict, base_dir: Path | None = None) -> PipelineConfig:
    try:
        cfg = PipelineConfig.model_validate(doc)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc
    if base_dir is not None:
        cfg.paths.data = _resolve(base_dir, cfg.paths.data)
        cfg.paths.out = _resolve(base_dir, cfg.paths.out)
        if cfg.paths.cache is not None:
            cfg.paths.cache = _resolve(base_dir, cfg.paths.cache)
        if cfg.enhance.replay_dir is not None:
            cfg.enhance.replay_dir = _resolve(base_dir, cfg.enhance.replay_dir)
    return cfg


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        doc = tomllib.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"{path}: no such config file") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(doc, path.parent)
