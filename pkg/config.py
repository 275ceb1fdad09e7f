"""
Run configuration: one JSON file, environment overrides, desk-scale defaults.

Precedence is CLI flag > environment > config file > default. Recognised
environment variables: C2W_SEED, C2W_WORKERS, C2W_DATASET_ROOT, C2W_CROPS_ROOT
(C2W_LOG_LEVEL is read by the CLI driver).
"""
import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

from dotenv import load_dotenv

from augment import AugmentConfig
from errors import ConfigError, InvalidConfig, MissingInput
from network import ModelSpec
from phantom import PhantomConfig
from training import LossConfig, OptimizerConfig, ScheduleConfig, TrainConfig, UnfreezeSchedule
from volume_io import RoiSpec

load_dotenv()

ROI_SOURCES = ("oracle_mask", "coarse_model")

SECTIONS = (
    "dataset_root", "crops_root", "phantom", "model", "train", "loss", "optimizer", "augment",
    "cavity_schedule", "wall_schedule", "scratch_schedule", "unfreeze", "roi", "roi_source",
    "coarse_checkpoint", "fallback_to_center", "threshold", "tolerance_mm", "seed", "workers",
)


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "desk"
    n_stages: int = 4
    scale: float = 0.25
    cardinality: int = 2
    max_channels: int = 128
    # width multiplier of the localization network
    coarse_scale: float = 0.125

    def build(self, roi_size) -> ModelSpec:
        if self.kind == "full":
            return ModelSpec.full(roi_size, scale=self.scale, cardinality=self.cardinality)
        if self.kind == "desk":
            return ModelSpec.desk(roi_size, self.n_stages, self.scale, self.cardinality, self.max_channels)
        raise ConfigError(f"model kind must be 'desk' or 'full', got {self.kind!r}")

    def build_coarse(self, volume_dims) -> ModelSpec:
        return dataclasses.replace(self, kind="desk", scale=self.coarse_scale).build(volume_dims)


def _section(cls, values: Optional[dict], name: str, **defaults):
    values = dict(values or {})
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"section '{name}': unknown keys {unknown}")
    merged = {**defaults, **values}
    try:
        return cls(**merged)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"section '{name}': {e}") from e


def _plain(obj) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_plain(v) for v in obj]
    return obj


@dataclass
class RunConfig:
    dataset_root: str = "data/phantoms"
    crops_root: str = "data/crops"
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(max_epochs=30, early_stop_patience=10))
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    cavity_schedule: ScheduleConfig = field(default_factory=lambda: ScheduleConfig.stage1(30, 3))
    wall_schedule: ScheduleConfig = field(default_factory=lambda: ScheduleConfig.stage2((3, 6), 30, 1))
    scratch_schedule: ScheduleConfig = field(default_factory=lambda: ScheduleConfig.stage1(30, 3))
    unfreeze: UnfreezeSchedule = field(default_factory=lambda: UnfreezeSchedule(deep_stage_cutoff=2).scaled(30))
    roi: RoiSpec = field(default_factory=RoiSpec)
    roi_source: str = "oracle_mask"
    coarse_checkpoint: Optional[str] = None
    fallback_to_center: bool = True
    threshold: float = 0.5
    tolerance_mm: float = 1.0
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.roi_source not in ROI_SOURCES:
            raise ConfigError(f"roi_source must be one of {ROI_SOURCES}, got {self.roi_source!r}")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        if self.tolerance_mm <= 0:
            raise ConfigError("tolerance_mm must be positive")

    def model_spec(self) -> ModelSpec:
        return self.model.build(self.roi.size)

    def coarse_spec(self) -> ModelSpec:
        return self.model.build_coarse(self.phantom.dims)

    def train_config(self, seed: Optional[int] = None) -> TrainConfig:
        return dataclasses.replace(self.train, seed=self.seed if seed is None else seed,
                                   threshold=self.threshold)

    def to_dict(self) -> Dict[str, Any]:
        out = {name: _plain(getattr(self, name)) for name in SECTIONS if name != "augment"}
        # augmentation is its own section on disk
        out["augment"] = out["train"].pop("augment")
        return out

    def write(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")


def _env(name: str, cast):
    raw = os.getenv(name)
    if raw is None or raw == "":
        return None
    try:
        return cast(raw)
    except ValueError as e:
        raise ConfigError(f"environment variable {name}={raw!r} is not a valid {cast.__name__}") from e


def from_dict(data: Dict[str, Any], overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Build a RunConfig from parsed JSON, then apply environment and CLI overrides."""
    unknown = sorted(set(data) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")

    scalars = {k: data[k] for k in ("dataset_root", "crops_root", "roi_source", "coarse_checkpoint",
                                    "fallback_to_center", "threshold", "tolerance_mm", "seed", "workers")
               if k in data}
    for key, var, cast in (("seed", "C2W_SEED", int), ("workers", "C2W_WORKERS", int),
                           ("dataset_root", "C2W_DATASET_ROOT", str), ("crops_root", "C2W_CROPS_ROOT", str)):
        value = _env(var, cast)
        if value is not None:
            scalars[key] = value
    for key, value in (overrides or {}).items():
        if value is not None:
            scalars[key] = value
    seed = int(scalars.get("seed", 0))

    try:
        augment = _section(AugmentConfig, data.get("augment"), "augment")
        train_data = dict(data.get("train") or {})
        if "augment" in train_data:
            raise ConfigError("section 'train': augmentation belongs in the top-level 'augment' section")
        train = _section(TrainConfig, train_data, "train", max_epochs=30, early_stop_patience=10,
                         augment=augment)
        epochs = train.max_epochs
        unfreeze = _section(UnfreezeSchedule, data.get("unfreeze"), "unfreeze",
                            **dataclasses.asdict(UnfreezeSchedule(deep_stage_cutoff=2).scaled(epochs)))
        stage1 = dict(kind="warmup_cosine", horizon_epochs=epochs, warmup_epochs=epochs // 10)
        bounds = (0,) + unfreeze.restart_boundaries() + (epochs,)
        shortest = min(b - a for a, b in zip(bounds, bounds[1:]))
        cfg = RunConfig(
            phantom=_section(PhantomConfig, data.get("phantom"), "phantom", seed=seed),
            model=_section(ModelConfig, data.get("model"), "model"),
            train=train,
            loss=_section(LossConfig, data.get("loss"), "loss"),
            optimizer=_section(OptimizerConfig, data.get("optimizer"), "optimizer"),
            cavity_schedule=_section(ScheduleConfig, data.get("cavity_schedule"), "cavity_schedule", **stage1),
            # scheduler restarts line up with the unfreeze steps unless configured otherwise
            wall_schedule=_section(ScheduleConfig, data.get("wall_schedule"), "wall_schedule",
                                   kind="stagewise_cosine", horizon_epochs=epochs, warmup_epochs=1 if shortest > 1 else 0,
                                   restart_boundaries=unfreeze.restart_boundaries()),
            scratch_schedule=_section(ScheduleConfig, data.get("scratch_schedule"), "scratch_schedule", **stage1),
            unfreeze=unfreeze,
            roi=_section(RoiSpec, data.get("roi"), "roi"),
            **scalars,
        )
    except InvalidConfig as e:
        raise ConfigError(str(e)) from e
    return cfg


def load_config(path=None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Load a JSON run config; without a path every section takes its default."""
    data: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise MissingInput(f"config file not found: {path}")
        with open(path, "r") as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}: invalid JSON ({e})") from e
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
    return from_dict(data, overrides)
