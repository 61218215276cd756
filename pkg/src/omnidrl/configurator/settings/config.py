# config.py
import logging
import os
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator

from omnidrl.configurator.settings.base import CHECKPOINT_EVERY
from omnidrl.domain.boxes import N_ACTIONS, ActionStepSizes, BoxBounds
from omnidrl.domain.camera import CameraIntrinsics, load_intrinsics
from omnidrl.utils.common import sha256_of

logger = logging.getLogger(__name__)


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


DEFAULT_CAMERA = CameraIntrinsics(xi=0.9, eta=1.0, f1=140.0, f2=140.0, skew=0.0, u0=511.5, v0=511.5, width=1024, height=1024)


class SceneConfig(_Section):
    rho_range: Tuple[float, float] = (1.5, 4.5)
    width_range: Tuple[float, float] = (0.4, 0.6)
    height_range: Tuple[float, float] = (1.55, 1.85)
    light_range: Tuple[float, float] = (0.7, 1.2)
    camera_height: float = Field(default=1.0, gt=0.0)
    room_radius: float = Field(default=6.0, gt=0.0)
    ceiling_height: float = Field(default=1.6, gt=0.0)
    noise_std: float = Field(default=2.0, ge=0.0)


class InitConfig(_Section):
    rho0: float = Field(default=1.2, gt=0.0)
    w0: float = Field(default=1.0, gt=0.0)
    h0: float = Field(default=2.4, gt=0.0)
    n_candidates: int = Field(default=6, ge=1)
    # share of training episodes started with the fixed-rho test protocol instead of a perturbed ground truth
    train_fixed_fraction: float = Field(default=0.25, ge=0.0, le=1.0)
    perturb_rho: float = Field(default=0.8, ge=0.0)
    perturb_beta: float = Field(default=0.3, ge=0.0)
    perturb_scale: float = Field(default=0.35, ge=0.0, lt=1.0)


class EnvConfig(_Section):
    kind: Literal["cylindrical", "image"] = "cylindrical"
    bounds: BoxBounds = BoxBounds()
    steps: ActionStepSizes = ActionStepSizes()
    tau: float = Field(default=0.6, gt=0.0, le=1.0)
    trigger_reward: float = Field(default=10.0, gt=0.0)
    max_steps: int = Field(default=100, gt=0)
    input_resolution: int = Field(default=64, gt=0)
    channels: Literal[1, 3] = 1
    draw_outline: bool = False
    label_coverage: float = Field(default=0.5, gt=0.0, le=1.0)
    image_step_fraction: float = Field(default=0.2, gt=0.0, lt=1.0)
    init: InitConfig = InitConfig()


class DatasetConfig(_Section):
    n_scenes: int = Field(default=1000, gt=0)
    train_fraction: float = Field(default=0.7, gt=0.0, lt=1.0)
    n_train: Optional[int] = Field(default=None, gt=0)
    n_test: Optional[int] = Field(default=None, gt=0)
    negative_fraction: float = Field(default=0.15, ge=0.0, lt=1.0)

    def split_counts(self) -> Tuple[int, int]:
        if self.n_train is not None and self.n_test is not None:
            return self.n_train, self.n_test
        n_train = int(round(self.n_scenes * self.train_fraction))
        return n_train, self.n_scenes - n_train


class ConvSpec(_Section):
    out_channels: int = Field(gt=0)
    kernel: int = Field(gt=0)
    stride: int = Field(default=1, gt=0)


class ArchitectureSpec(_Section):
    """Shared convolutional trunk, then per branch convolutions and fully-connected layers"""

    input_resolution: int = Field(default=64, gt=0)
    channels: int = Field(default=1, gt=0)
    # input given as a flat feature vector of this length (no convolutions allowed); used by tabular problems
    feature_size: Optional[int] = Field(default=None, gt=0)
    shared_conv: List[ConvSpec] = [ConvSpec(out_channels=16, kernel=5, stride=2), ConvSpec(out_channels=32, kernel=3, stride=2)]
    branch_conv: List[ConvSpec] = [ConvSpec(out_channels=32, kernel=3, stride=2)]
    fc_hidden: List[int] = [128]
    n_actions: int = Field(default=N_ACTIONS, gt=0)
    n_classes: int = Field(default=2, gt=1)
    multi_task: bool = True

    @model_validator(mode="after")
    def _features_are_flat(self) -> "ArchitectureSpec":
        if self.feature_size is not None and (self.shared_conv or self.branch_conv):
            raise ValueError("Flat feature inputs cannot feed convolution layers")
        return self


class TrainConfig(_Section):
    gamma: float = Field(default=0.9, ge=0.0, lt=1.0)
    learning_rate: float = Field(default=1e-4, gt=0.0)
    momentum: float = Field(default=0.0, ge=0.0, lt=1.0)
    batch_size: int = Field(default=32, gt=0)
    target_sync: int = Field(default=15000, gt=0)
    temperature_start: float = Field(default=1.0, gt=0.0)
    temperature_end: float = Field(default=0.05, gt=0.0)
    temperature_decay_fraction: float = Field(default=0.5, gt=0.0, le=1.0)
    max_steps: int = Field(default=200000, gt=0)
    replay_capacity: int = Field(default=50000, gt=0)
    drl_updates: int = Field(default=1, ge=0)
    cls_updates: int = Field(default=1, ge=0)
    checkpoint_every: int = Field(default=CHECKPOINT_EVERY, gt=0)


class EvalConfig(_Section):
    agent: Literal["greedy", "oracle"] = "greedy"
    tau: Optional[float] = Field(default=None, gt=0.0, le=1.0)


class RunConfig(_Section):
    seed: int = 0
    calibration_file: Optional[str] = None
    camera: CameraIntrinsics = DEFAULT_CAMERA
    scene: SceneConfig = SceneConfig()
    environment: EnvConfig = EnvConfig()
    dataset: DatasetConfig = DatasetConfig()
    network: ArchitectureSpec = ArchitectureSpec()
    training: TrainConfig = TrainConfig()
    evaluation: EvalConfig = EvalConfig()

    @model_validator(mode="after")
    def _network_matches_environment(self) -> "RunConfig":
        if self.network.feature_size is None and (
            self.network.input_resolution != self.environment.input_resolution or self.network.channels != self.environment.channels
        ):
            raise ValueError(
                f"network input {self.network.channels}x{self.network.input_resolution} does not match environment crop "
                f"{self.environment.channels}x{self.environment.input_resolution}"
            )
        return self

    @property
    def eval_tau(self) -> float:
        return self.evaluation.tau if self.evaluation.tau is not None else self.environment.tau


def parse_override(override: str) -> Tuple[List[str], Any]:
    """'training.learning_rate=0.001' -> (['training', 'learning_rate'], 0.001)"""
    if "=" not in override:
        raise ValueError(f"Override must look like section.key=value, got {override!r}")
    key, raw = override.split("=", 1)
    path = [part for part in key.strip().split(".") if part]
    if not path:
        raise ValueError(f"Override has an empty key: {override!r}")
    return path, yaml.safe_load(raw)


def apply_overrides(payload: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    merged = dict(payload)
    for override in overrides:
        path, value = parse_override(override)
        node = merged
        for part in path[:-1]:
            child = node.get(part)
            node[part] = dict(child) if isinstance(child, dict) else {}
            node = node[part]
        node[path[-1]] = value
        logger.info(f"Config override {'.'.join(path)}={value!r}")
    return merged


def load_config(path: Optional[str] = None, overrides: Sequence[str] = (), seed: Optional[int] = None) -> RunConfig:
    """Load a YAML run config, apply CLI overrides and validate"""
    payload: Dict[str, Any] = {}
    if path is not None:
        with open(path, "r") as f:
            payload = yaml.safe_load(f) or {}
    payload = apply_overrides(payload, overrides)
    if seed is not None:
        payload["seed"] = seed

    config = RunConfig(**payload)
    if config.calibration_file is not None:
        calibration_path = config.calibration_file
        if path is not None and not os.path.isabs(calibration_path):
            calibration_path = os.path.join(os.path.dirname(path), calibration_path)
        config = config.model_copy(update={"camera": load_intrinsics(calibration_path), "calibration_file": None})
    return config


def dump_config(config: RunConfig, path: str) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w") as f:
        yaml.safe_dump(config.model_dump(mode="json"), f, sort_keys=False)


def config_hash(config: RunConfig) -> str:
    return sha256_of(config.model_dump(mode="json"))
