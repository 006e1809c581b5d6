from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from pathlib import Path

import torch
import yaml

from stzoo.errors import ConfigError, ShapeError, SpecError


class Family(str, Enum):
    TSN = "TSN"
    I3D = "I3D"
    S3D = "S3D"
    TAM = "TAM"
    TSM = "TSM"
    CONV1D = "Conv1D"
    TSN_NLN = "TSN+NLN"

    @property
    def is_volumetric(self):
        return self in (Family.I3D, Family.S3D)

    @property
    def has_block_modules(self):
        return self in (Family.TAM, Family.TSM, Family.CONV1D)


class Backbone(str, Enum):
    INCEPTION_V1 = "InceptionV1"
    RESNET18 = "ResNet18"
    RESNET50 = "ResNet50"
    TINYNET = "TinyNet"

    @property
    def is_resnet(self):
        return self in (Backbone.RESNET18, Backbone.RESNET50)


class Placement(str, Enum):
    ALL = "All"
    TOP_HALF = "TopHalf"
    BOTTOM_HALF = "BottomHalf"
    UNIFORM_HALF = "UniformHalf"


class Layout(str, Enum):
    BATCHED_2D = "Batched2D"  # F x C x H x W
    VOLUMETRIC_3D = "Volumetric3D"  # C x F x H x W


class Init(str, Enum):
    IMAGENET = "ImageNet"
    SCRATCH = "Scratch"
    FROM_CHECKPOINT = "FromCheckpoint"


class Strategy(str, Enum):
    UNIFORM = "Uniform"
    DENSE = "Dense"


class SamplingMode(str, Enum):
    TRAIN = "Train"
    EVAL_CLIP = "EvalClip"
    EVAL_VIDEO = "EvalVideo"


class Schedule(str, Enum):
    COSINE = "CosineHalfPeriod"
    STEP = "Step"


class EvalLevel(str, Enum):
    CLIP = "Clip"
    VIDEO = "Video"


class DataProtocol(str, Enum):
    MINI = "Mini"
    FULL = "Full"


MIN_POOLED_FRAMES = 8
MANIFEST_NAME = "manifest.csv"
SYNTHETIC_DATASETS = {"synthetic-direction": "Direction", "synthetic-adjacency": "Adjacency"}


def _coerce_enums(instance):
    hints = typing.get_type_hints(type(instance))
    for f in fields(instance):
        kind = hints[f.name]
        value = getattr(instance, f.name)
        if isinstance(kind, type) and issubclass(kind, Enum) and not isinstance(value, kind):
            try:
                object.__setattr__(instance, f.name, kind(value))
            except ValueError:
                choices = ", ".join(member.value for member in kind)
                raise SpecError(f"{f.name}: '{value}' is not one of {choices}") from None


@dataclass(frozen=True)
class Violation:
    field: str
    rule: str

    def __str__(self):
        return f"{self.field}: {self.rule}"


def format_name(family, backbone, temporal_pool):
    family = getattr(family, "value", family)
    backbone = getattr(backbone, "value", backbone)
    return f"{family}-{backbone}-tp" if temporal_pool else f"{family}-{backbone}"


@dataclass(frozen=True)
class ArchSpec:
    family: Family
    backbone: Backbone
    frames: int = 8
    temporal_pool: bool = False
    placement: Placement = Placement.ALL
    num_classes: int = 400

    def __post_init__(self):
        _coerce_enums(self)

    def check(self):
        violations = validate(self)
        if violations:
            raise SpecError("invalid architecture: " + "; ".join(str(v) for v in violations))
        return self

    @property
    def name(self):
        return canonical_name(self)

    @property
    def input_layout(self):
        return Layout.VOLUMETRIC_3D if self.family.is_volumetric else Layout.BATCHED_2D

    def to_dict(self):
        return to_dict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


def validate(spec):
    violations = []
    if not isinstance(spec.frames, int) or spec.frames < 1:
        violations.append(Violation("frames", "frames must be a positive integer"))
    if not isinstance(spec.num_classes, int) or spec.num_classes < 1:
        violations.append(Violation("num_classes", "num_classes must be a positive integer"))
    if spec.placement is not Placement.ALL and not spec.family.has_block_modules:
        violations.append(
            Violation("placement", f"placement {spec.placement.value} is invalid for {spec.family.value}")
        )
    if spec.temporal_pool and isinstance(spec.frames, int) and spec.frames < MIN_POOLED_FRAMES:
        violations.append(Violation("frames", f"frames<{MIN_POOLED_FRAMES} with temporal_pool"))
    if spec.family is Family.TSN_NLN and not spec.backbone.is_resnet:
        violations.append(Violation("backbone", "non-local blocks require a ResNet backbone"))
    return violations


def canonical_name(spec):
    spec.check()
    return format_name(spec.family, spec.backbone, spec.temporal_pool)


@dataclass(frozen=True, eq=False)
class VideoTensor:
    values: torch.Tensor
    layout: Layout = Layout.BATCHED_2D

    def __post_init__(self):
        object.__setattr__(self, "layout", Layout(self.layout))
        if self.values.dim() != 4:
            raise ShapeError(f"a clip must be 4-dimensional, got shape {tuple(self.values.shape)}")
        if min(self.values.shape) < 1:
            raise ShapeError(f"every clip extent must be positive, got shape {tuple(self.values.shape)}")

    @property
    def frames(self):
        return self.values.shape[0 if self.layout is Layout.BATCHED_2D else 1]

    @property
    def channels(self):
        return self.values.shape[1 if self.layout is Layout.BATCHED_2D else 0]

    @property
    def height(self):
        return self.values.shape[2]

    @property
    def width(self):
        return self.values.shape[3]

    def to_layout(self, layout):
        layout = Layout(layout)
        if layout is self.layout:
            return self
        # F x C <-> C x F is the same swap in both directions
        return VideoTensor(self.values.permute(1, 0, 2, 3), layout)


@dataclass(frozen=True)
class SamplerConfig:
    strategy: Strategy = Strategy.UNIFORM
    frames: int = 8
    stride: int = 1
    clips: int = 1
    mode: SamplingMode = SamplingMode.TRAIN
    seed: int = 0

    def __post_init__(self):
        _coerce_enums(self)
        for name in ("frames", "stride", "clips"):
            if getattr(self, name) < 1:
                raise ConfigError(f"sampler {name} must be >= 1")

    @property
    def window(self):
        return (self.frames - 1) * self.stride + 1


@dataclass(frozen=True)
class TrainProtocol:
    epochs: int = 30
    lr: float = 0.01
    peak_lr: float = 0.01
    warmup_epochs: int = 0
    schedule: Schedule = Schedule.COSINE
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 16
    progressive: tuple[int, ...] = ()
    step_milestones: tuple[float, ...] = (0.5, 0.75)
    step_gamma: float = 0.1

    def __post_init__(self):
        _coerce_enums(self)
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("warmup_epochs must lie in [0, epochs)")

    @classmethod
    def full(cls):
        return cls(epochs=196, lr=0.01, peak_lr=1.6, warmup_epochs=34, batch_size=1024)

    @classmethod
    def transfer(cls):
        return cls(epochs=45, lr=0.01, peak_lr=0.01, batch_size=48)

    @classmethod
    def desk(cls):
        return cls(epochs=30, lr=0.01, peak_lr=0.01, batch_size=16)


@dataclass(frozen=True)
class EvalProtocol:
    level: EvalLevel = EvalLevel.CLIP
    clips: int = 1
    crops: int = 1

    def __post_init__(self):
        _coerce_enums(self)
        if self.clips < 1 or self.crops < 1:
            raise ConfigError("clips and crops must be >= 1")
        if self.level is EvalLevel.CLIP and self.clips != 1:
            raise ConfigError("clip-level evaluation uses exactly one clip")

    @property
    def sampling_mode(self):
        return SamplingMode.EVAL_CLIP if self.level is EvalLevel.CLIP else SamplingMode.EVAL_VIDEO

    @property
    def predictions_per_video(self):
        return self.clips * self.crops

    @classmethod
    def clip(cls):
        return cls()

    @classmethod
    def video(cls, clips=10):
        return cls(level=EvalLevel.VIDEO, clips=clips)

    @classmethod
    def kinetics(cls):
        return cls(level=EvalLevel.VIDEO, clips=10, crops=3)

    @classmethod
    def ssv2(cls):
        return cls(level=EvalLevel.VIDEO, clips=2, crops=3)


@dataclass(frozen=True)
class ExperimentConfig:
    arch: ArchSpec
    dataset: str
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    train: TrainProtocol = field(default_factory=TrainProtocol.desk)
    eval: EvalProtocol = field(default_factory=EvalProtocol)
    seed: int = 0
    output_dir: str = "runs"
    init: Init = Init.IMAGENET
    checkpoint: str | None = None
    input_size: int = 224
    dropout: float = 0.0
    workers: int = 0
    protocol: DataProtocol = DataProtocol.MINI
    subset: str | None = None

    def __post_init__(self):
        _coerce_enums(self)

    def violations(self):
        found = validate(self.arch)
        if self.sampler.frames != self.arch.frames:
            found.append(Violation("sampler.frames", "sampler frames must equal arch frames"))
        if self.sampler.seed != self.seed:
            found.append(Violation("sampler.seed", "sampler seed must equal seed"))
        if self.init is Init.FROM_CHECKPOINT and not self.checkpoint:
            found.append(Violation("checkpoint", "FromCheckpoint init needs a checkpoint path"))
        if not is_resolvable(self.dataset):
            found.append(Violation("dataset", f"cannot resolve dataset '{self.dataset}'"))
        return found

    def check(self):
        found = self.violations()
        if found:
            raise ConfigError("inconsistent experiment: " + "; ".join(str(v) for v in found))
        return self


def is_resolvable(dataset_id):
    return dataset_id in SYNTHETIC_DATASETS or (Path(dataset_id) / MANIFEST_NAME).is_file()


def to_dict(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, tuple):
        return [to_dict(item) for item in obj]
    return obj


def _key_lines(node, prefix=()):
    lines = {}
    if isinstance(node, yaml.MappingNode):
        for key_node, value_node in node.value:
            path = prefix + (key_node.value,)
            lines[path] = key_node.start_mark.line + 1
            lines.update(_key_lines(value_node, path))
    return lines


class _ConfigReader:
    def __init__(self, source, lines):
        self.source = source
        self.lines = lines

    def _where(self, path):
        line = self.lines.get(tuple(path))
        location = f"{self.source}:{line}" if line else str(self.source)
        return f"{location}: {'.'.join(path) or '<root>'}"

    def build(self, cls, data, path=()):
        if not isinstance(data, dict):
            raise ConfigError(f"{self._where(path)}: expected a mapping for {cls.__name__}")
        hints = typing.get_type_hints(cls)
        names = {f.name for f in fields(cls)}
        for key in data:
            if key not in names:
                raise ConfigError(f"{self._where(path + (str(key),))}: unknown field '{key}'")
        kwargs = {}
        for f in fields(cls):
            if f.name in data:
                kwargs[f.name] = self.convert(hints[f.name], data[f.name], path + (f.name,))
        missing = [
            f.name
            for f in fields(cls)
            if f.name not in kwargs and f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING
        ]
        if missing:
            raise ConfigError(f"{self._where(path)}: missing field(s) {', '.join(missing)}")
        try:
            return cls(**kwargs)
        except (ConfigError, SpecError) as exc:
            raise ConfigError(f"{self._where(path)}: {exc}") from None

    def convert(self, kind, value, path):
        origin = typing.get_origin(kind)
        if dataclasses.is_dataclass(kind):
            return self.build(kind, value, path)
        if origin is tuple:
            (item_kind, _) = typing.get_args(kind)
            if not isinstance(value, list):
                raise ConfigError(f"{self._where(path)}: expected a list")
            return tuple(self.convert(item_kind, item, path) for item in value)
        if origin is not None:  # optional
            if value is None:
                return None
            (kind,) = [arg for arg in typing.get_args(kind) if arg is not type(None)]
        if isinstance(kind, type) and issubclass(kind, Enum):
            try:
                return kind(value)
            except ValueError:
                choices = ", ".join(member.value for member in kind)
                raise ConfigError(f"{self._where(path)}: '{value}' is not one of {choices}") from None
        if kind is bool:
            if not isinstance(value, bool):
                raise ConfigError(f"{self._where(path)}: expected true/false, got {value!r}")
            return value
        if kind is int:
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{self._where(path)}: expected an integer, got {value!r}")
            return value
        if kind is float:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{self._where(path)}: expected a number, got {value!r}")
            return float(value)
        if not isinstance(value, str):
            raise ConfigError(f"{self._where(path)}: expected a string, got {value!r}")
        return value


def parse_config(text, source="<config>"):
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}:{mark.column + 1}" if mark else str(source)
        problem = getattr(exc, "problem", None) or str(exc)
        raise ConfigError(f"{where}: parse error: {problem}") from None
    if data is None:
        raise ConfigError(f"{source}: parse error: empty configuration")
    return _ConfigReader(source, _key_lines(node)).build(ExperimentConfig, data)


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    return parse_config(text, source=path)


def save_config(config, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(to_dict(config), sort_keys=False))
    return path


def override(config, **changes):
    """Return a copy of ``config`` with dotted-path fields replaced, e.g. ``override(c, **{"arch.frames": 16})``."""
    leaves, nested = {}, {}
    for dotted, value in changes.items():
        head, _, rest = dotted.partition(".")
        if rest:
            nested.setdefault(head, {})[rest] = value
        else:
            leaves[head] = value
    # one replace per level, so related fields change together
    for head, sub in nested.items():
        leaves[head] = override(leaves.get(head, getattr(config, head)), **sub)
    return replace(config, **leaves)
