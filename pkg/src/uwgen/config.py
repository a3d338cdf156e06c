"""Pipeline configuration: one file drives every CLI stage.

The schema is strict — any key that does not map to a dataclass field is
rejected with its full dotted path, so typos fail fast instead of silently
falling back to defaults.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .augment import AugmentConfig, DetectionPreprocessConfig
from .errors import ValidationError
from .trainer import ClassifierTrainConfig, TrainConfig

_SCALARS = (str, int, float, bool, type(None))


@dataclass(frozen=True)
class DatasetPaths:
    uw_dir: str = "data/uw"
    lab_dir: str = "data/lab"
    lab_labels_dir: str | None = None  # darknet txts; default: next to the images
    crops_dir: str | None = None       # default: <output_root>/prepare/crops


@dataclass(frozen=True)
class AugmentSection:
    target_count: int = 1980
    ops: tuple = AugmentConfig().ops
    rotate_degrees: tuple = (-30.0, 30.0)
    saturation_factor: tuple = (0.5, 1.5)
    exposure_factor: tuple = (0.7, 1.3)
    noise_stddev: tuple = (0.0, 0.05)
    op_probability: float = 1.0

    def __post_init__(self):
        if self.target_count < 1:
            raise ValidationError(f"target_count must be >= 1, got {self.target_count}")
        self.to_augment_config()  # surface range/op errors at load time

    def to_augment_config(self) -> AugmentConfig:
        return AugmentConfig(
            ops=tuple(self.ops),
            rotate_degrees=tuple(self.rotate_degrees),
            saturation_factor=tuple(self.saturation_factor),
            exposure_factor=tuple(self.exposure_factor),
            noise_stddev=tuple(self.noise_stddev),
            op_probability=self.op_probability,
        )


@dataclass(frozen=True)
class FidSection:
    embedder: str = "desk"
    batch_size: int = 32

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValidationError(f"fid batch_size must be >= 1, got {self.batch_size}")


@dataclass(frozen=True)
class ExportSection:
    source: str = "lab"            # "lab" or "generated"
    val_ratio: float = 0.2
    preprocess_fraction: float = 0.5
    blur_sigma: tuple = (0.0, 1.25)
    corrupt_fraction: float = 0.08
    detector_input_size: int = 416
    detector_batch_size: int = 16
    detector_learning_rate: float = 0.01

    def __post_init__(self):
        if self.source not in ("lab", "generated"):
            raise ValidationError(f"export source must be 'lab' or 'generated', got {self.source!r}")
        if not 0.0 < self.val_ratio < 1.0:
            raise ValidationError(f"export val_ratio must lie in (0,1), got {self.val_ratio}")
        if not 0.0 <= self.preprocess_fraction <= 1.0:
            raise ValidationError(
                f"preprocess_fraction must lie in [0,1], got {self.preprocess_fraction}"
            )

    def to_preprocess_config(self) -> DetectionPreprocessConfig:
        return DetectionPreprocessConfig(
            hflip_prob=0.5,
            blur_sigma_range=tuple(self.blur_sigma),
            salt_pepper_fraction=self.corrupt_fraction,
        )


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    output_root: str = "runs/default"
    dataset: DatasetPaths = field(default_factory=DatasetPaths)
    gan: TrainConfig = field(default_factory=TrainConfig)
    classifier: ClassifierTrainConfig = field(default_factory=ClassifierTrainConfig)
    augment: AugmentSection = field(default_factory=AugmentSection)
    fid: FidSection = field(default_factory=FidSection)
    export: ExportSection = field(default_factory=ExportSection)

    def crops_dir(self) -> Path:
        if self.dataset.crops_dir:
            return Path(self.dataset.crops_dir)
        return Path(self.output_root) / "prepare" / "crops"

    def stage_dir(self, stage: str) -> Path:
        return Path(self.output_root) / stage


def _build(cls, data, path: str):
    """Recursively construct a dataclass from a mapping, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ValidationError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    spec = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(spec))
    if unknown:
        where = f"{path}.{unknown[0]}" if path else unknown[0]
        raise ValidationError(f"unknown config key {where!r}; valid keys: {sorted(spec)}")
    kwargs = {}
    for name, value in data.items():
        f = spec[name]
        sub = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(f.type) or dataclasses.is_dataclass(_resolve(cls, f)):
            kwargs[name] = _build(_resolve(cls, f), value, sub)
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        elif isinstance(value, _SCALARS) or isinstance(value, tuple):
            kwargs[name] = _coerce_scalar(f, value, sub)
        else:
            raise ValidationError(f"{sub}: unsupported value type {type(value).__name__}")
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ValidationError(f"{path or 'config'}: {exc}") from exc


def _coerce_scalar(f, value, path: str):
    """Parse numeric strings into float fields.

    YAML 1.1 reads dot-less scientific notation (`1e-4`) as a string; without
    this the dataclass validators fail with an opaque comparison TypeError.
    """
    t = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", "")
    if isinstance(value, str) and "float" in t:
        try:
            return float(value)
        except ValueError:
            raise ValidationError(f"{path}: expected a number, got {value!r}") from None
    return value


def _resolve(cls, f):
    """Field types arrive as strings under `from __future__ import annotations`."""
    t = f.type
    if isinstance(t, str):
        t = {
            "DatasetPaths": DatasetPaths,
            "TrainConfig": TrainConfig,
            "ClassifierTrainConfig": ClassifierTrainConfig,
            "AugmentSection": AugmentSection,
            "FidSection": FidSection,
            "ExportSection": ExportSection,
        }.get(t, t)
    return t


def load_config(path) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config file not found: {path}")
    text = path.read_text()
    if path.suffix.lower() in (".yaml", ".yml"):
        import yaml

        data = yaml.safe_load(text)
    elif path.suffix.lower() == ".json":
        data = json.loads(text)
    else:
        raise ValidationError(f"config must be .yaml/.yml/.json, got {path.suffix!r}")
    if data is None:
        data = {}
    return _build(PipelineConfig, data, "")


def config_digest(cfg: PipelineConfig) -> str:
    """Stable content hash of a pipeline config (order-independent)."""
    payload = json.dumps(dataclasses.asdict(cfg), sort_keys=True, default=str)
    return hashlib.sha256(payload.encode()).hexdigest()


def dump_config(cfg: PipelineConfig, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(dataclasses.asdict(cfg), indent=2, sort_keys=True, default=str) + "\n")
