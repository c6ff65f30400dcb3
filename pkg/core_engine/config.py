"""
Configuration models for rendering and fitting.

All numeric settings of a run live in one JSON or YAML file validated by the
pydantic models below. `FitConfig()` carries the literal loss weights and equals
the shipped `schemas/default_config.json`; `per_image_config()` is the
per-pixel-averaged profile shipped as `schemas/per_image_config.json`.
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Dict, List, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from core_engine.errors import ConfigError

logger = logging.getLogger(__name__)

SCHEMA_DIR = Path(__file__).resolve().parent.parent / "schemas"
DEFAULT_CONFIG_PATH = SCHEMA_DIR / "default_config.json"
PROFILE_PATHS = {
    "default": DEFAULT_CONFIG_PATH,
    "per_image": SCHEMA_DIR / "per_image_config.json",
}

STAGES = ("coarse", "medium", "fine")

COARSE_BLOCKS = ("alpha", "delta", "beta", "rot", "trans", "sh")
MEDIUM_BLOCKS = ("medium_diffuse_inc", "medium_specular_inc")
FINE_BLOCKS = ("fine_normal_inc", "fine_diffuse_inc")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class CameraConfig(_Strict):
    """Pinhole intrinsics and image size, in pixels."""

    focal: float = Field(280.0, gt=0)
    cx: float = 64.0
    cy: float = 64.0
    width: int = Field(128, ge=1)
    height: int = Field(128, ge=1)


class RenderConfig(_Strict):
    spp: int = Field(8, ge=1)
    seed: int = 0
    deterministic: bool = True
    shadows: bool = True
    roughness: float = Field(0.5, gt=0.0, le=1.0)
    shadow_epsilon: float = Field(1e-4, gt=0.0)


class LossWeights(_Strict):
    """
    Weights of the data term and the stage losses.

    Defaults follow the literal equations: photometric terms are sums and the
    prior weight is 1.
    """

    w_lm: float = Field(0.1, ge=0)
    w_dr: float = Field(0.5, ge=0)
    w_p: float = Field(1.0, ge=0)
    w_b: float = Field(1.0, ge=0)
    # medium
    w_s: float = Field(20.0, ge=0)
    w_c_diffuse: float = Field(0.2, ge=0)
    w_c_specular: float = Field(0.01, ge=0)
    w_m: float = Field(1e-4, ge=0)
    w_b_medium: float = Field(1.0, ge=0)
    # fine
    w_s_fine: float = Field(10.0, ge=0)
    w_c_fine: float = Field(1.0, ge=0)
    w_m_fine: float = Field(1e-4, ge=0)
    w_b_fine: float = Field(1.0, ge=0)
    # schedule
    halving_factor: float = Field(2.0, gt=0)
    round_length: int = Field(50, ge=1)
    photometric_reduction: Literal["sum", "mean"] = "sum"


class StagePlanConfig(_Strict):
    """One optimisation stage: what is trained, for how long, how fast."""

    stage: Literal["coarse", "medium", "fine"]
    iterations: int = Field(0, ge=0)
    lr: float = Field(0.05, gt=0)
    map_lr: float = Field(0.01, gt=0)
    lr_overrides: Dict[str, float] = Field(default_factory=dict)
    lr_decay: float = Field(1.0, gt=0, le=1.0)
    co_refine: bool = False
    co_refine_lr_scale: float = Field(0.1, gt=0)
    fine_specular_increment: bool = False

    @property
    def trainable(self) -> List[str]:
        if self.stage == "coarse":
            return list(COARSE_BLOCKS)
        if self.stage == "medium":
            return list(MEDIUM_BLOCKS) + (list(COARSE_BLOCKS) if self.co_refine else [])
        blocks = list(FINE_BLOCKS)
        if self.fine_specular_increment:
            blocks.append("fine_specular_inc")
        return blocks

    def learning_rate(self, block: str) -> float:
        if block in self.lr_overrides:
            return self.lr_overrides[block]
        if block in COARSE_BLOCKS:
            base = self.lr
            return base * self.co_refine_lr_scale if self.stage == "medium" else base
        return self.map_lr


class AdamConfig(_Strict):
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)


def _default_stages() -> List[StagePlanConfig]:
    return [
        StagePlanConfig(stage="coarse", iterations=250, lr=0.05, lr_decay=0.5,
                        lr_overrides={"trans": 0.5}),
        StagePlanConfig(stage="medium", iterations=150, co_refine=True),
        StagePlanConfig(stage="fine", iterations=150),
    ]


class FitConfig(_Strict):
    """Everything a fit, render, gradient check or ablation run needs."""

    camera: CameraConfig = Field(default_factory=CameraConfig)
    render: RenderConfig = Field(default_factory=RenderConfig)
    weights: LossWeights = Field(default_factory=LossWeights)
    adam: AdamConfig = Field(default_factory=AdamConfig)
    stages: List[StagePlanConfig] = Field(default_factory=_default_stages)
    quiet: bool = False

    @field_validator("stages")
    @classmethod
    def _stage_order(cls, stages: List[StagePlanConfig]) -> List[StagePlanConfig]:
        names = [plan.stage for plan in stages]
        if names != [s for s in STAGES if s in names] or len(set(names)) != len(names):
            raise ValueError(f"stages must be a subsequence of {STAGES} without repeats, got {names}")
        return stages

    @model_validator(mode="after")
    def _principal_point(self) -> "FitConfig":
        cam = self.camera
        if not (0 <= cam.cx <= cam.width and 0 <= cam.cy <= cam.height):
            logger.warning("principal point (%.1f, %.1f) lies outside the %dx%d image",
                           cam.cx, cam.cy, cam.width, cam.height)
        return self

    def plan(self, stage: str) -> Optional[StagePlanConfig]:
        for plan in self.stages:
            if plan.stage == stage:
                return plan
        return None


PER_IMAGE_PRIOR_WEIGHT = 1e-3
PER_IMAGE_NORMAL_SMOOTHNESS = 1.0
PER_IMAGE_NORMAL_LR = 0.004


def per_image_config() -> FitConfig:
    """
    Profile for fitting one image with per-pixel averaged photometric terms.

    Averaging shrinks the data terms by the pixel count, so the prior weight
    drops with them; the fine normal map gets a stronger smoothness weight and
    a smaller step so it follows shading rather than sampling noise.
    """
    stages = []
    for plan in _default_stages():
        if plan.stage == "fine":
            plan = plan.model_copy(update={"lr_overrides": {**plan.lr_overrides,
                                                            "fine_normal_inc": PER_IMAGE_NORMAL_LR}})
        stages.append(plan)
    weights = LossWeights(photometric_reduction="mean", w_p=PER_IMAGE_PRIOR_WEIGHT,
                          w_m_fine=PER_IMAGE_NORMAL_SMOOTHNESS)
    return FitConfig(weights=weights, stages=stages)


def load_profile(name: str) -> FitConfig:
    """Load a shipped profile by name ("default" or "per_image")."""
    if name not in PROFILE_PATHS:
        raise ConfigError(f"unknown config profile '{name}' (choose from {', '.join(PROFILE_PATHS)})")
    return load_config(PROFILE_PATHS[name])


def load_config(path: Union[str, Path, None] = None) -> FitConfig:
    """
    Load a FitConfig from JSON or YAML.

    Args:
        path: .json, .yaml or .yml file; the shipped default when omitted

    Returns:
        Validated FitConfig
    """
    path = Path(path) if path is not None else DEFAULT_CONFIG_PATH
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        if path.suffix.lower() in (".yaml", ".yml"):
            data = yaml.safe_load(text) or {}
        elif path.suffix.lower() == ".json":
            data = json.loads(text)
        else:
            raise ConfigError(f"unsupported config format '{path.suffix}' (use .json, .yaml or .yml)")
        return FitConfig.model_validate(data)
    except (ValidationError, json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"invalid config {path}: {exc}") from exc


def config_hash(config: BaseModel) -> str:
    """SHA-256 of the canonical JSON dump of a config model."""
    canonical = json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
