"""Configuration models and the flat ``key=value`` config format."""

from __future__ import annotations

import json
import logging
import math
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from exceptions import ConfigurationError
from occupancy.grid import ClassTable

load_dotenv()

logger = logging.getLogger(__name__)

DEFAULT_CLASS_SPECS = [
    "free:static",
    "road:static",
    "building:static",
    "vegetation:static",
    "car:dynamic",
    "pedestrian:dynamic",
]
FLOW_MODES = ("decoupled", "plain", "none")


def data_root() -> Path:
    return Path(os.getenv("OW4D_DATA_DIR", "data"))


def parse_class_spec(spec: str) -> Tuple[str, bool]:
    name, sep, kind = spec.partition(":")
    if not sep or kind not in ("static", "dynamic") or not name:
        raise ValueError(f"class entry {spec!r} must look like 'name:static' or 'name:dynamic'")
    return name, kind == "dynamic"


def class_table_from_specs(specs: List[str]) -> ClassTable:
    return ClassTable.from_pairs(parse_class_spec(s) for s in specs)


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class LossWeights(StrictModel):
    occ: float = Field(1.0, ge=0.0)
    img: float = Field(0.1, ge=0.0)
    pose: float = Field(1.0, ge=0.0)
    rpc: float = Field(0.1, ge=0.0)


class WorldModelConfig(StrictModel):
    history: int = Field(4, ge=1)
    future: int = Field(6, ge=1)
    grid_dims: Tuple[int, int, int] = (32, 32, 8)
    patch_size: int = Field(4, ge=1)
    embed_dim: int = Field(4, ge=1)
    model_dim: int = Field(32, ge=1)
    heads: int = Field(4, ge=1)
    encoder_layers: int = Field(2, ge=1)
    decoder_layers: int = Field(2, ge=1)
    norm_groups: int = Field(4, ge=1)
    ffn_expansion: int = Field(2, ge=1)
    lift_dim: int = Field(8, ge=1)
    refine_hidden: int = Field(32, ge=1)
    share_refinement: bool = True
    flow_mode: str = "decoupled"
    masked_attention: bool = True
    image_attends_occupancy: bool = True
    use_images: bool = True
    use_rpc: bool = True
    warp_with_given_poses: bool = True
    num_ray_samples: int = Field(48, ge=2)
    near: float = Field(0.5, gt=0.0)
    far: Optional[float] = None
    density_hidden: int = Field(16, ge=1)
    min_opacity: float = Field(0.05, ge=0.0, le=1.0)
    photometric_alpha: float = Field(0.85, ge=0.0, le=1.0)
    fps: float = Field(2.0, gt=0.0)
    loss_weights: LossWeights = Field(default_factory=LossWeights)
    classes: List[str] = Field(default_factory=lambda: list(DEFAULT_CLASS_SPECS))
    seed: int = 0

    @field_validator("flow_mode")
    @classmethod
    def check_flow_mode(cls, value: str) -> str:
        if value not in FLOW_MODES:
            raise ValueError(f"flow_mode must be one of {FLOW_MODES}, got {value!r}")
        return value

    @field_validator("classes")
    @classmethod
    def check_classes(cls, value: List[str]) -> List[str]:
        class_table_from_specs(value)
        return value

    @model_validator(mode="after")
    def check_shapes(self) -> "WorldModelConfig":
        h0, w0, _ = self.grid_dims
        if h0 % self.patch_size or w0 % self.patch_size:
            raise ValueError(f"grid {h0}x{w0} is not divisible by patch size {self.patch_size}")
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} is not divisible by {self.heads} heads")
        for name in ("model_dim", "refine_hidden"):
            if getattr(self, name) % self.norm_groups:
                raise ValueError(f"{name} {getattr(self, name)} is not divisible by norm_groups {self.norm_groups}")
        if self.far is not None and self.far <= self.near:
            raise ValueError("far must exceed near")
        return self

    def class_table(self) -> ClassTable:
        return class_table_from_specs(self.classes)

    @property
    def token_grid(self) -> Tuple[int, int]:
        return self.grid_dims[0] // self.patch_size, self.grid_dims[1] // self.patch_size

    @property
    def frame_dt(self) -> float:
        return 1.0 / self.fps

    def horizons_s(self) -> List[float]:
        return [round((k + 1) * self.frame_dt, 6) for k in range(self.future)]


class ObjectSpec(StrictModel):
    center: Tuple[float, float] = (2.0, 3.5)
    extent: Tuple[float, float, float] = (2.0, 1.0, 1.5)
    velocity: Tuple[float, float] = (1.0, 0.0)
    class_name: str = "car"


class BoxSpec(StrictModel):
    lower: Tuple[float, float, float]
    upper: Tuple[float, float, float]
    class_name: str = "building"

    @model_validator(mode="after")
    def check_order(self) -> "BoxSpec":
        if any(lo >= hi for lo, hi in zip(self.lower, self.upper)):
            raise ValueError(f"box lower {self.lower} must be below upper {self.upper}")
        return self


class SceneSpec(StrictModel):
    seed: int = 0
    dims: Tuple[int, int, int] = (32, 32, 8)
    voxel_size: Tuple[float, float, float] = (0.5, 0.5, 0.5)
    origin: Tuple[float, float, float] = (-8.0, -8.0, 0.0)
    sequence_length: int = Field(10, ge=2)
    fps: float = Field(2.0, gt=0.0)
    ego_speed: float = 1.0
    ego_yaw_rate: float = 0.0
    num_buildings: int = Field(4, ge=0)
    num_objects: int = Field(2, ge=0)
    road_half_width: float = Field(3.0, gt=0.0)
    buildings: Optional[List[BoxSpec]] = None
    objects: Optional[List[ObjectSpec]] = None
    image_size: Tuple[int, int] = (32, 32)
    focal: float = Field(16.0, gt=0.0)
    camera_height: float = 1.75
    camera_pitch: float = 0.0
    texture_frequency: float = Field(0.5, gt=0.0)
    classes: List[str] = Field(default_factory=lambda: list(DEFAULT_CLASS_SPECS))

    @field_validator("classes")
    @classmethod
    def check_classes(cls, value: List[str]) -> List[str]:
        class_table_from_specs(value)
        return value

    def class_table(self) -> ClassTable:
        return class_table_from_specs(self.classes)

    @property
    def frame_dt(self) -> float:
        return 1.0 / self.fps

    @property
    def extent(self) -> Tuple[float, float, float]:
        return tuple(n * v for n, v in zip(self.dims, self.voxel_size))

    @property
    def diagonal(self) -> float:
        return math.sqrt(sum(e * e for e in self.extent))


class TrainConfig(StrictModel):
    steps: int = Field(200, ge=0)
    batch_size: int = Field(4, ge=1)
    learning_rate: float = Field(0.05, gt=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    clip_norm: Optional[float] = 5.0
    log_every: int = Field(10, ge=1)
    max_minutes: Optional[float] = None
    progress: bool = False


class EvalConfig(StrictModel):
    footprint_length: float = Field(4.0, gt=0.0)
    footprint_width: float = Field(1.8, gt=0.0)
    obstacle_exclude: List[str] = Field(default_factory=lambda: ["road"])
    chamfer_azimuths: int = Field(90, ge=1)
    chamfer_elevations: Tuple[float, ...] = (-0.3, -0.15, 0.0, 0.15)
    sensor_height: float = 1.75
    baseline_transport: bool = True
    window_stride: int = Field(1, ge=1)


class RunConfig(StrictModel):
    model: WorldModelConfig = Field(default_factory=WorldModelConfig)
    scene: SceneSpec = Field(default_factory=SceneSpec)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    output_dir: str = "runs"
    num_scenes: int = Field(200, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def check_consistency(self) -> "RunConfig":
        if self.model.classes != self.scene.classes:
            raise ValueError("model.classes and scene.classes must list the same class table")
        if tuple(self.model.grid_dims) != tuple(self.scene.dims):
            raise ValueError(f"model.grid_dims {self.model.grid_dims} != scene.dims {self.scene.dims}")
        if self.scene.sequence_length < self.model.history + self.model.future:
            raise ValueError(
                f"scene.sequence_length {self.scene.sequence_length} is shorter than "
                f"history + future = {self.model.history + self.model.future}"
            )
        if self.model.fps != self.scene.fps:
            raise ValueError("model.fps and scene.fps must agree")
        return self


# -- flat key=value files ----------------------------------------------------


def _leaf_keys(model_cls, prefix: str = "") -> List[str]:
    keys = []
    for name, field in model_cls.model_fields.items():
        annotation = field.annotation
        if isinstance(annotation, type) and issubclass(annotation, BaseModel):
            keys.extend(_leaf_keys(annotation, f"{prefix}{name}."))
        else:
            keys.append(f"{prefix}{name}")
    return keys


def valid_keys() -> List[str]:
    return _leaf_keys(RunConfig)


def parse_value(raw: str) -> Any:
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        pass
    if "," in raw:
        return [parse_value(part) for part in raw.split(",") if part.strip()]
    return raw


def parse_flat(text: str) -> Dict[str, Any]:
    """Parse ``key=value`` lines into a nested dict; ``#`` starts a comment."""
    allowed = set(valid_keys())
    nested: Dict[str, Any] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigurationError(f"config line {number} is not key=value: {line!r}")
        if key not in allowed:
            raise ConfigurationError(f"unknown config key {key!r}; valid keys: {', '.join(sorted(allowed))}")
        node = nested
        *parents, leaf = key.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = parse_value(value)
    return nested


def build_config(overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    try:
        return RunConfig.model_validate(overrides or {})
    except ValidationError as exc:
        raise ConfigurationError(f"invalid configuration: {exc}")


def load_config(path: Union[str, Path, None] = None) -> RunConfig:
    if path is None:
        return build_config()
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    config = build_config(parse_flat(path.read_text(encoding="utf-8")))
    logger.debug("loaded config from %s", path)
    return config


def dump_flat(config: BaseModel, prefix: str = "") -> str:
    lines = []
    for name in type(config).model_fields:
        value = getattr(config, name)
        if isinstance(value, BaseModel):
            lines.append(dump_flat(value, f"{prefix}{name}."))
        else:
            dumped = json.dumps(_plain(value), separators=(",", ":"))
            lines.append(f"{prefix}{name}={dumped}")
    return "\n".join(line for line in lines if line)


def _plain(value):
    if isinstance(value, BaseModel):
        return value.model_dump(mode="json")
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def save_config(config: RunConfig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_flat(config) + "\n", encoding="utf-8")
    return path
