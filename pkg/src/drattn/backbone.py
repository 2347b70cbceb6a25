"""Feature extractor, classifier head, and the assembled grading model."""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from .attention import CabForwardArtifacts, CabState, ConfigError, GabState, cab_forward, gab_forward
from .seeding import derive_rng
from .tensor_core import Conv1x1, Conv3x3, Linear, Tensor, checkpoint, ops

ABLATION_MODES = ("baseline", "gab_only", "cab_only", "gab_cab")
STAGES = ("pre_attention", "gab", "cab")
GROUPS = ("backbone", "reduce", "gab", "cab", "head")


@dataclass(frozen=True)
class BackboneSpec:
    """Reference CNN: per stage a 3x3 conv, relu, then average-pool downsampling."""

    widths: tuple = (16, 32, 64, 128)
    downsample: tuple = (2, 2, 2, 2)
    in_channels: int = 3

    def __post_init__(self):
        if len(self.widths) != len(self.downsample):
            raise ConfigError("widths and downsample must have one entry per stage")
        if any(w < 1 for w in self.widths) or any(d < 1 for d in self.downsample):
            raise ConfigError("stage widths and downsample factors must be positive")

    @property
    def out_channels(self) -> int:
        return self.widths[-1] if self.widths else self.in_channels

    @property
    def total_downsample(self) -> int:
        return int(np.prod(self.downsample)) if self.downsample else 1

    def output_hw(self, height: int, width: int) -> tuple:
        f = self.total_downsample
        if height % f or width % f:
            raise ConfigError(f"input {height}x{width} not divisible by total downsample {f}")
        return height // f, width // f


@dataclass(frozen=True)
class ModelConfig:
    widths: tuple = (16, 32, 64, 128)
    downsample: tuple = (2, 2, 2, 2)
    in_channels: int = 3
    reduce_channels: int = 128
    reduction_ratio: int = 8
    k: int = 5
    num_classes: int = 5
    dropout_rate: float = 0.5
    cab_sigmoid: bool = False
    mode: str = "gab_cab"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "downsample", tuple(int(d) for d in self.downsample))
        if self.mode not in ABLATION_MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {ABLATION_MODES}")
        if self.reduce_channels < 1 or self.num_classes < 1 or self.k < 1:
            raise ConfigError("reduce_channels, num_classes and k must be positive")
        if self.reduce_channels % self.reduction_ratio:
            raise ConfigError(
                f"reduce_channels {self.reduce_channels} not divisible by reduction_ratio {self.reduction_ratio}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @property
    def backbone(self) -> BackboneSpec:
        return BackboneSpec(self.widths, self.downsample, self.in_channels)

    @property
    def use_gab(self) -> bool:
        return self.mode in ("gab_only", "gab_cab")

    @property
    def use_cab(self) -> bool:
        return self.mode in ("cab_only", "gab_cab")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["downsample"] = list(self.downsample)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


@dataclass
class ModelAssembly:
    config: ModelConfig
    backbone: list  # of Conv3x3
    reduce: Conv1x1
    gab: Optional[GabState]
    cab: Optional[CabState]
    head: Linear
    frozen: set = field(default_factory=set)

    def groups(self) -> dict:
        out = {
            "backbone": [p for conv in self.backbone for p in conv.parameters()],
            "reduce": self.reduce.parameters(),
            "gab": self.gab.parameters() if self.gab is not None else [],
            "cab": self.cab.parameters() if self.cab is not None else [],
            "head": self.head.parameters(),
        }
        return out

    def parameters(self) -> list:
        return [p for ps in self.groups().values() for p in ps]

    def named_parameters(self) -> dict:
        return {p.name: p for p in self.parameters()}

    def parameter_count(self, group: Optional[str] = None) -> int:
        params = self.groups()[group] if group else self.parameters()
        return sum(p.size for p in params)

    def set_frozen(self, group: str, frozen: bool = True) -> None:
        if group not in GROUPS:
            raise ConfigError(f"unknown parameter group {group!r}")
        for p in self.groups()[group]:
            p.trainable = not frozen
        (self.frozen.add if frozen else self.frozen.discard)(group)

    def state_dict(self) -> dict:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state_dict(self, state: dict) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ConfigError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.size != p.size:
                raise ConfigError(f"{name}: {arr.size} values, expected {p.size}")
            p.data = arr.reshape(p.shape).copy()

    def copy(self) -> "ModelAssembly":
        return copy.deepcopy(self)


def build_assembly(config: ModelConfig = ModelConfig()) -> ModelAssembly:
    """Initialise every block from its own named stream under ``config.seed``.

    Blocks shared between ablation modes therefore start identical.
    """
    spec = config.backbone

    def rng(name):
        return derive_rng(config.seed, "init", name)

    stages = []
    c_in = spec.in_channels
    for i, width in enumerate(spec.widths):
        stages.append(Conv3x3.create(f"backbone.stage{i}", c_in, width, rng(f"backbone.stage{i}")))
        c_in = width
    c = config.reduce_channels
    reduce = Conv1x1.create("reduce", spec.out_channels, c, rng("reduce"))
    gab = GabState.create(c, config.reduction_ratio, rng("gab")) if config.use_gab else None
    cab = None
    if config.use_cab:
        cab = CabState.create(c, config.k, config.num_classes, config.dropout_rate,
                              config.cab_sigmoid, rng("cab"))
    head = Linear.create("head", c, config.num_classes, rng("head"))
    return ModelAssembly(config, stages, reduce, gab, cab, head)


def backbone_forward(image: Tensor, spec: BackboneSpec, params: list) -> Tensor:
    if image.data.ndim != 4 or image.shape[1] != spec.in_channels:
        raise ConfigError(f"backbone expects (n, {spec.in_channels}, H, W) input, got {image.shape}")
    spec.output_hw(image.shape[2], image.shape[3])
    x = image
    for conv, factor in zip(params, spec.downsample):
        x = ops.avg_pool(ops.relu(conv(x)), factor)
    return x


def reduce_features(features: Tensor, reduce_conv: Conv1x1) -> Tensor:
    return reduce_conv(features)


def classify_head(f_cab_out: Tensor, head: Linear) -> Tensor:
    """GAP, flatten, fully connected -> logits (n, L)."""
    return head(ops.flatten(ops.global_avg_pool(f_cab_out)))


def predict(logits) -> np.ndarray:
    """Argmax grade per row; ties resolve to the lowest grade."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return data.argmax(axis=1)


@dataclass
class ForwardResult:
    logits: Tensor
    artifacts: Optional[CabForwardArtifacts]
    intermediates: dict


def model_forward(image, assembly: ModelAssembly, training: bool = False, seed=None,
                  tap: Optional[str] = None) -> ForwardResult:
    """backbone -> 1x1 reduce -> GAB -> CAB -> GAP/FC.

    ``tap`` names a stage (``pre_attention``, ``gab``, ``cab``) whose
    activation is re-rooted as a gradient-tracking leaf, so a backward pass
    fills its ``grad`` even when every parameter is frozen.
    """
    if tap is not None and tap not in STAGES:
        raise ConfigError(f"unknown stage {tap!r}; expected one of {STAGES}")
    if not isinstance(image, Tensor):
        image = Tensor(image)
    inter = {}

    def stage(name, t):
        if name == tap:
            t = t.leaf()
        inter[name] = t
        return t

    features = backbone_forward(image, assembly.config.backbone, assembly.backbone)
    inter["features"] = features
    x = stage("pre_attention", reduce_features(features, assembly.reduce))
    if assembly.gab is not None:
        x = gab_forward(x, assembly.gab)
    x = stage("gab", x)
    artifacts = None
    if assembly.cab is not None:
        x, artifacts = cab_forward(x, assembly.cab, training, seed)
        inter["cab_attention"] = artifacts.attention_map
    x = stage("cab", x)
    return ForwardResult(classify_head(x, assembly.head), artifacts, inter)


def ablation_variant(assembly: ModelAssembly, mode: str) -> ModelAssembly:
    """Copy of ``assembly`` with attention blocks dropped (identity) or added per ``mode``.

    Added blocks are initialised exactly as :func:`build_assembly` would.
    """
    if mode not in ABLATION_MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {ABLATION_MODES}")
    config = ModelConfig.from_dict({**assembly.config.to_dict(), "mode": mode})
    out = assembly.copy()
    out.config = config
    fresh = build_assembly(config)
    out.gab = (out.gab or fresh.gab) if config.use_gab else None
    out.cab = (out.cab or fresh.cab) if config.use_cab else None
    for group in out.frozen:
        out.set_frozen(group, True)
    return out


def parameter_report(assembly: ModelAssembly) -> dict:
    return {g: assembly.parameter_count(g) for g in GROUPS} | {"total": assembly.parameter_count()}


# --- persistence ---------------------------------------------------------

def to_checkpoint_bytes(assembly: ModelAssembly, extra_header: Optional[dict] = None) -> bytes:
    header = {"model": assembly.config.to_dict(), **(extra_header or {})}
    return checkpoint.dumps(assembly.state_dict(), header)


def from_checkpoint_bytes(blob: bytes) -> ModelAssembly:
    header, records = checkpoint.loads(blob)
    return _assembly_from(header, records)


def _assembly_from(header: dict, records: dict) -> ModelAssembly:
    if "model" not in header:
        raise checkpoint.CheckpointError("checkpoint header carries no model config")
    assembly = build_assembly(ModelConfig.from_dict(header["model"]))
    assembly.load_state_dict(records)
    return assembly


def save_assembly(path, assembly: ModelAssembly, extra_header: Optional[dict] = None) -> None:
    with open(path, "wb") as f:
        f.write(to_checkpoint_bytes(assembly, extra_header))


def load_assembly(path, model_config_path=None) -> ModelAssembly:
    """Load a checkpoint; if a model config file is given it must match the header."""
    header, records = checkpoint.load(path)
    if model_config_path is not None:
        with open(model_config_path, encoding="utf-8") as f:
            on_disk = ModelConfig.from_dict(json.load(f))
        if on_disk.to_dict() != header.get("model"):
            raise ConfigError(f"{model_config_path} does not match the checkpoint's model config")
    return _assembly_from(header, records)
