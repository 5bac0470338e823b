import hashlib
import json
import math
from pathlib import Path
from typing import Annotated, Any, Dict, Literal, Tuple

from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, ValidationError, model_validator

from src.app.exceptions import ConfigError


def _split_csv(value: Any) -> Any:
    if isinstance(value, str):
        return tuple(item.strip() for item in value.split(",") if item.strip())
    return value


FloatTuple = Annotated[Tuple[float, ...], BeforeValidator(_split_csv)]
IntTuple = Annotated[Tuple[int, ...], BeforeValidator(_split_csv)]
StrTuple = Annotated[Tuple[str, ...], BeforeValidator(_split_csv)]

Similarity = Literal["attention", "cosine", "euclidean", "xcorr"]
Fusion = Literal["late", "early", "c2", "c5"]
Strategy = Literal["F", "P", "FP", "AP"]
Face = Literal["front", "back", "left", "right", "top"]


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PillarConfig(Section):
    area: FloatTuple = Field((-3.2, -3.2, -3.0, 3.2, 3.2, 1.0), min_length=6, max_length=6)
    pillar_size: FloatTuple = Field((0.1, 0.1, 4.0), min_length=3, max_length=3)
    max_points_per_pillar: int = Field(32, ge=1)
    max_pillars: int = Field(4096, ge=1)

    @model_validator(mode="after")
    def check_grid(self):
        x_min, y_min, z_min, x_max, y_max, z_max = self.area
        dx, dy, dz = self.pillar_size
        if min(x_max - x_min, y_max - y_min, z_max - z_min) <= 0:
            raise ValueError("area extents must be positive")
        if min(dx, dy, dz) <= 0:
            raise ValueError("pillar size must be positive")
        for extent, step in ((x_max - x_min, dx), (y_max - y_min, dy)):
            cells = extent / step
            if abs(cells - round(cells)) > 1e-6:
                raise ValueError(f"area extent {extent} is not a multiple of pillar size {step}")
        if abs(dz - (z_max - z_min)) > 1e-9:
            raise ValueError("pillar height must span the full z extent")
        return self

    @property
    def grid_size(self) -> Tuple[int, int]:
        x_min, y_min, _, x_max, y_max, _ = self.area
        dx, dy, _ = self.pillar_size
        return int(round((x_max - x_min) / dx)), int(round((y_max - y_min) / dy))

    def cell_centers(self, stride: int = 1) -> Tuple[Tuple[float, ...], Tuple[float, ...]]:
        """Cell-centre coordinates along x and y for a grid downsampled by `stride`."""
        nx, ny = self.grid_size
        x_min, y_min = self.area[0], self.area[1]
        dx, dy = self.pillar_size[0] * stride, self.pillar_size[1] * stride
        xs = tuple(x_min + (i + 0.5) * dx for i in range(nx // stride))
        ys = tuple(y_min + (j + 0.5) * dy for j in range(ny // stride))
        return xs, ys


BACKBONE_PRESETS: Dict[str, Dict[str, Any]] = {
    "pvtv2-b2-paper": dict(
        in_channels=64,
        channels=(64, 128, 320, 512),
        depths=(3, 4, 6, 3),
        heads=(1, 2, 5, 8),
        ffn_expansion=(8, 8, 4, 8),
        sr_ratios=(8, 4, 2, 1),
    ),
    "desk-small": dict(
        in_channels=32,
        channels=(16, 32, 64, 128),
        depths=(1, 1, 1, 1),
        heads=(1, 2, 4, 8),
        ffn_expansion=(4, 4, 4, 4),
        sr_ratios=(8, 4, 2, 1),
    ),
}


class BackboneConfig(Section):
    preset: Literal["pvtv2-b2-paper", "desk-small"] = "desk-small"
    in_channels: int = Field(32, ge=1)
    channels: IntTuple = (16, 32, 64, 128)
    depths: IntTuple = (1, 1, 1, 1)
    heads: IntTuple = (1, 2, 4, 8)
    ffn_expansion: IntTuple = (4, 4, 4, 4)
    sr_ratios: IntTuple = (8, 4, 2, 1)
    patch_sizes: IntTuple = (7, 3, 3, 3)
    patch_strides: IntTuple = (4, 2, 2, 2)
    normalize: bool = True
    eps: float = Field(1e-5, gt=0)

    @model_validator(mode="before")
    @classmethod
    def apply_preset(cls, data: Any) -> Any:
        if isinstance(data, dict):
            preset = data.get("preset", "desk-small")
            if preset in BACKBONE_PRESETS:
                data = {**BACKBONE_PRESETS[preset], **data}
        return data

    @model_validator(mode="after")
    def check_stages(self):
        stage_fields = (self.channels, self.depths, self.heads, self.ffn_expansion,
                        self.sr_ratios, self.patch_sizes, self.patch_strides)
        if any(len(values) != 4 for values in stage_fields):
            raise ValueError("backbone needs exactly 4 stages")
        cumulative = tuple(math.prod(self.patch_strides[:i + 1]) for i in range(4))
        if cumulative != (4, 8, 16, 32):
            raise ValueError(f"cumulative strides must be 4, 8, 16, 32, got {cumulative}")
        for channels, heads in zip(self.channels, self.heads):
            if channels % heads:
                raise ValueError(f"{channels} channels not divisible by {heads} heads")
        return self


class EncoderConfig(Section):
    width: int = Field(64, ge=1)
    heads: int = Field(4, ge=1)
    depth: int = Field(1, ge=1)
    ffn_dim: int = Field(64, ge=1)
    similarity: Similarity = "attention"
    fusion: Fusion = "late"
    positional_encoding: bool = True

    @model_validator(mode="after")
    def check_heads(self):
        if self.width % self.heads:
            raise ValueError(f"encoder width {self.width} not divisible by {self.heads} heads")
        return self


class DecoderConfig(Section):
    k: int = Field(64, ge=1)
    two_stage: bool = True
    heads: int = Field(4, ge=1)
    depth: int = Field(1, ge=1)
    ffn_dim: int = Field(128, ge=1)
    num_bands: int = Field(8, ge=1)


class LossWeights(Section):
    cls: float = Field(2.0, ge=0)
    l1: float = Field(5.0, ge=0)

    @model_validator(mode="after")
    def check_not_both_zero(self):
        if self.cls == 0 and self.l1 == 0:
            raise ValueError("loss weights cannot both be zero")
        return self


class OptimizerConfig(Section):
    lr: float = Field(1e-4, gt=0)
    weight_decay: float = Field(0.05, ge=0)
    milestones: FloatTuple = (63 / 72, 69 / 72)
    gamma: float = Field(0.1, gt=0)


class TrainingConfig(Section):
    epochs: int = Field(40, ge=1)
    batch_size: int = Field(8, ge=1)
    max_steps: int = Field(0, ge=0)
    search_jitter: float = Field(0.3, ge=0)
    dense_stage_one: bool = False
    log_every: int = Field(10, ge=1)
    strategy: Strategy = "FP"


class TrackerConfig(Section):
    strategy: Strategy = "FP"
    template_margin: float = Field(0.25, ge=0)


class ScenarioConfig(Section):
    n_frames: int = Field(10, ge=2)
    size: FloatTuple = Field((1.8, 4.2, 1.6), min_length=3, max_length=3)
    initial_pose: FloatTuple = Field((10.0, 0.0, 0.0, 0.0), min_length=4, max_length=4)
    velocity: float = 0.3
    yaw_rate: float = 0.0
    noise_std: float = Field(0.05, ge=0)
    yaw_noise_std: float = Field(0.0, ge=0)
    points_on_target: int = Field(256, ge=0)
    # -1 keeps points_on_target for the first frame too
    first_frame_points: int = Field(-1, ge=-1)
    clutter_points: int = Field(64, ge=0)
    clutter_area: FloatTuple = Field((-3.2, -3.2, -1.0, 3.2, 3.2, 0.0), min_length=6, max_length=6)
    drop_faces: StrTuple = ()
    sensor_height: float = 2.0
    category: str = "Car"
    object_id: str = "synthetic"
    seed: int = 0

    @model_validator(mode="after")
    def check_faces(self):
        unknown = set(self.drop_faces) - {"front", "back", "left", "right", "top"}
        if unknown:
            raise ValueError(f"unknown faces {sorted(unknown)}")
        if min(self.size) <= 0:
            raise ValueError("box size must be positive")
        return self


class DataConfig(Section):
    train_path: str = ""
    eval_path: str = ""
    train_sequences: int = Field(20, ge=1)
    eval_sequences: int = Field(5, ge=1)
    train_seed: int = 0
    eval_seed: int = 1000
    format: Literal["text", "binary"] = "text"


class SweepConfig(Section):
    point_counts: IntTuple = (8, 16, 32, 64, 128, 256)
    sequences_per_bucket: int = Field(30, ge=0)


RUN_PRESETS: Dict[str, Dict[str, Dict[str, Any]]] = {
    "desk": {
        "backbone": {"preset": "desk-small"},
    },
    "full": {
        "backbone": {"preset": "pvtv2-b2-paper"},
        "encoder": {"width": 256, "ffn_dim": 256, "heads": 8},
        "decoder": {"heads": 8, "depth": 8, "ffn_dim": 2048},
        "training": {"epochs": 72, "batch_size": 16},
    },
}

MODEL_SECTIONS = {"pillars", "template_pillars", "backbone", "encoder", "decoder"}
TOP_LEVEL_ALIASES = {"similarity": ("encoder", "similarity"), "fusion": ("encoder", "fusion")}


def _default_template_pillars() -> PillarConfig:
    return PillarConfig(area=(-1.6, -1.6, -2.0, 1.6, 1.6, 2.0), pillar_size=(0.1, 0.1, 4.0))


class RunConfig(Section):
    preset: Literal["desk", "full"] = "desk"
    seed: int = 0
    pillars: PillarConfig = Field(default_factory=PillarConfig)
    template_pillars: PillarConfig = Field(default_factory=_default_template_pillars)
    backbone: BackboneConfig = Field(default_factory=BackboneConfig)
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    decoder: DecoderConfig = Field(default_factory=DecoderConfig)
    loss: LossWeights = Field(default_factory=LossWeights)
    optim: OptimizerConfig = Field(default_factory=OptimizerConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    tracker: TrackerConfig = Field(default_factory=TrackerConfig)
    scenario: ScenarioConfig = Field(default_factory=ScenarioConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)

    @model_validator(mode="after")
    def check_model_compat(self):
        if self.decoder.k > _stride4_cells(self.pillars):
            raise ValueError("decoder.k exceeds the number of stride-4 search locations")
        if self.encoder.width % self.decoder.heads:
            raise ValueError(f"encoder width {self.encoder.width} not divisible by {self.decoder.heads} decoder heads")
        for pillars in (self.pillars, self.template_pillars):
            nx, ny = pillars.grid_size
            if nx % 32 or ny % 32:
                raise ValueError(f"pillar grid {nx}x{ny} is not divisible by 32")
        return self

    @classmethod
    def from_flat(cls, flat: Dict[str, Any]) -> "RunConfig":
        flat = dict(flat)
        preset = flat.get("preset", "desk")
        if preset not in RUN_PRESETS:
            raise ConfigError(f"Unknown preset '{preset}'")
        nested: Dict[str, Any] = {name: dict(values) for name, values in RUN_PRESETS[preset].items()}
        for key, value in flat.items():
            path = TOP_LEVEL_ALIASES.get(key) or tuple(key.split("."))
            if len(path) == 1:
                nested[path[0]] = value
            elif len(path) == 2:
                section = nested.setdefault(path[0], {})
                if not isinstance(section, dict):
                    raise ConfigError(f"Key '{key}' does not address a section")
                section[path[1]] = value
            else:
                raise ConfigError(f"Unknown config key '{key}'")
        try:
            return cls.model_validate(nested)
        except ValidationError as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        return cls.from_flat(parse_key_values(text))

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"Cannot read config {path}: {e}") from e
        return cls.from_text(text)

    def with_overrides(self, overrides: Dict[str, Any]) -> "RunConfig":
        flat = self.to_flat()
        for key, value in overrides.items():
            flat[".".join(TOP_LEVEL_ALIASES.get(key, (key,)))] = value
        return RunConfig.from_flat(flat)

    def to_flat(self) -> Dict[str, Any]:
        flat: Dict[str, Any] = {}
        for name, value in self.model_dump(mode="json").items():
            if isinstance(value, dict):
                for key, item in value.items():
                    flat[f"{name}.{key}"] = item
            else:
                flat[name] = value
        return flat

    def to_text(self) -> str:
        lines = [f"# config hash {self.config_hash}"]
        for key, value in self.to_flat().items():
            lines.append(f"{key} = {_format_value(value)}")
        return "\n".join(lines) + "\n"

    @property
    def config_hash(self) -> str:
        payload = self.model_dump(mode="json", include=MODEL_SECTIONS)
        canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _stride4_cells(pillars: PillarConfig) -> int:
    nx, ny = pillars.grid_size
    return (nx // 4) * (ny // 4)


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(_format_value(item) for item in value)
    return str(value)


def parse_key_values(text: str) -> Dict[str, str]:
    values: Dict[str, str] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"Line {number}: expected 'key = value', got '{raw.strip()}'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"Line {number}: empty key")
        if key in values:
            raise ConfigError(f"Line {number}: duplicate key '{key}'")
        values[key] = value
    return values
