"""Configuration records for every pipeline stage plus the experiment config
that nests them.

This module is deliberately torch-free so that cheap CLI paths (``params``,
config validation) never pay the torch import cost.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .errors import ConfigurationError

SPLIT_NAMES = ("train", "validation", "test")


def derive_seed(seed: int, label: str) -> int:
    """Stable per-stage sub-seed from the global seed and a stage label."""
    digest = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little") % (2**31)


@dataclass(frozen=True)
class HarmonizeConfig:
    """Standardization pipeline settings."""

    window_duration_s: float = 0.1
    target_length: int = 1024
    normalize_range: tuple[float, float] = (0.0, 1.0)
    epsilon_degenerate: float = 1e-12
    antialias: bool = False  # optional low-pass prefilter before length mapping

    def __post_init__(self) -> None:
        if self.window_duration_s <= 0:
            raise ConfigurationError("window_duration_s must be positive")
        if self.target_length < 2:
            raise ConfigurationError("target_length must be >= 2")
        low, high = self.normalize_range
        if not low < high:
            raise ConfigurationError("normalize_range must satisfy low < high")
        if self.epsilon_degenerate <= 0:
            raise ConfigurationError("epsilon_degenerate must be positive")


@dataclass(frozen=True)
class FusionConfig:
    """Cross-domain temporal fusion settings."""

    lambda_range: tuple[float, float] = (0.55, 0.95)
    window_t: int = 5
    fused_fraction: float = 0.5
    pair_policy: str = "cross_dataset_uniform"
    seed: int = 0

    def __post_init__(self) -> None:
        low, high = self.lambda_range
        if not (0.5 < low <= high < 1.0):
            raise ConfigurationError("lambda_range must lie strictly inside (0.5, 1)")
        if self.window_t < 1 or self.window_t % 2 == 0:
            raise ConfigurationError("window_t must be odd and >= 1")
        if not 0.0 <= self.fused_fraction <= 1.0:
            raise ConfigurationError("fused_fraction must be in [0, 1]")
        if self.pair_policy != "cross_dataset_uniform":
            raise ConfigurationError(f"unknown pair_policy {self.pair_policy!r}")


@dataclass(frozen=True)
class AugmentConfig:
    """Stochastic view-generation settings."""

    shift_range: tuple[float, float] = (0.0, 1.0)
    scale_mean: float = 1.0
    scale_std: float = 0.1
    jitter_std: float = 0.05
    scale_granularity: str = "per_window"
    seed: int = 0

    def __post_init__(self) -> None:
        low, high = self.shift_range
        if not (0.0 <= low <= high <= 1.0):
            raise ConfigurationError("shift_range must lie within [0, 1)")
        if self.scale_std < 0 or self.jitter_std < 0:
            raise ConfigurationError("scale_std and jitter_std must be >= 0")
        if self.scale_granularity != "per_window":
            raise ConfigurationError("scale_granularity must be 'per_window'")


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture hyperparameters for the patch transformer."""

    input_length: int = 1024
    patch_size: int = 16
    model_dim: int = 128
    num_layers: int = 4
    num_heads: int = 4
    ffn_ratio: int = 4

    def __post_init__(self) -> None:
        for name in ("input_length", "patch_size", "model_dim", "num_layers", "num_heads", "ffn_ratio"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.input_length % self.patch_size != 0:
            raise ConfigurationError("patch_size must divide input_length")
        if self.model_dim % self.num_heads != 0:
            raise ConfigurationError("num_heads must divide model_dim")

    @property
    def num_tokens(self) -> int:
        return self.input_length // self.patch_size

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    @property
    def ffn_dim(self) -> int:
        return self.ffn_ratio * self.model_dim

    def parameter_count(self) -> int:
        """Exact learnable-value count, by pure arithmetic (no tensors built).

        Counts the patch projection, positional table, per-layer attention +
        FFN + two pre-norms, the final norm, and the pretraining projection
        head.
        """
        d, f, t = self.model_dim, self.ffn_dim, self.num_tokens
        attention = 4 * (d * d + d)
        ffn = d * f + f + f * d + d
        norms = 4 * d
        per_layer = attention + ffn + norms
        patch = self.patch_size * d + d
        head = d * d + d
        return self.num_layers * per_layer + patch + t * d + 2 * d + head


VARIANTS: dict[str, EncoderConfig] = {
    "lite": EncoderConfig(model_dim=128, num_layers=4, num_heads=4),
    "base": EncoderConfig(model_dim=256, num_layers=8, num_heads=8),
}


@dataclass(frozen=True)
class ContrastiveConfig:
    """Contrastive objective settings."""

    temperature: float = 0.2
    include_self_term: bool = True
    projection: str = "linear_head"

    def __post_init__(self) -> None:
        if self.temperature <= 0:
            raise ConfigurationError("temperature must be positive")
        if self.projection != "linear_head":
            raise ConfigurationError("projection must be 'linear_head'")


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adamw"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 1e-5
    adam_epsilon: float = 1e-8

    def __post_init__(self) -> None:
        if self.kind != "adamw":
            raise ConfigurationError("optimizer kind must be 'adamw'")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigurationError("betas must lie in (0, 1)")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigurationError("learning_rate and weight_decay must be >= 0")


@dataclass(frozen=True)
class ScheduleConfig:
    """Cosine learning-rate schedule with warm restarts.

    ``first_cycle=None`` resolves to one epoch of steps at run time.
    """

    first_cycle: int | None = None
    cycle_mult: float = 2.0
    min_lr_fraction: float = 0.01

    def __post_init__(self) -> None:
        if self.first_cycle is not None and self.first_cycle < 1:
            raise ConfigurationError("first_cycle must be >= 1")
        if self.cycle_mult < 1.0:
            raise ConfigurationError("cycle_mult must be >= 1")
        if not 0.0 <= self.min_lr_fraction < 1.0:
            raise ConfigurationError("min_lr_fraction must lie in [0, 1)")


@dataclass(frozen=True)
class PretrainRunConfig:
    """Pretraining loop settings.

    ``batch_size=None`` resolves at run time: 512 for corpora of at least
    50k windows, 128 below that (desk scale).
    """

    batch_size: int | None = None
    epochs: int = 5
    seed: int = 0
    fusion_enabled: bool = True

    def __post_init__(self) -> None:
        if self.batch_size is not None and self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")

    def resolve_batch_size(self, corpus_size: int) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return 512 if corpus_size >= 50_000 else 128


@dataclass(frozen=True)
class FewShotSpec:
    """How many labeled samples the fine-tune stage may see."""

    mode: str = "per_class_k"
    value: float = 10
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in ("per_class_k", "total_count", "fraction"):
            raise ConfigurationError(f"unknown few-shot mode {self.mode!r}")
        if self.value <= 0:
            raise ConfigurationError("few-shot value must be > 0")
        if self.mode == "fraction" and self.value > 1:
            raise ConfigurationError("fraction must be <= 1")
        if self.mode in ("per_class_k", "total_count") and self.value != int(self.value):
            raise ConfigurationError(f"{self.mode} value must be an integer")


@dataclass(frozen=True)
class FinetuneRunConfig:
    batch_size: int = 64
    epochs: int = 200
    mode: str = "head_only"
    seeds: tuple[int, ...] = (0, 1, 2)
    backbone_lr_scale: float = 0.1

    def __post_init__(self) -> None:
        if self.mode not in ("head_only", "full"):
            raise ConfigurationError("mode must be 'head_only' or 'full'")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigurationError("batch_size and epochs must be >= 1")
        if not self.seeds:
            raise ConfigurationError("at least one fine-tune seed required")


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic benchmark sizing."""

    seed: int = 0
    recordings_scale: float = 1.0
    noise_scale: float = 1.0

    def __post_init__(self) -> None:
        if self.recordings_scale <= 0:
            raise ConfigurationError("recordings_scale must be positive")
        if self.noise_scale < 0:
            raise ConfigurationError("noise_scale must be >= 0")


def _validate_ratios(ratios: tuple[float, float, float]) -> None:
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ConfigurationError("split ratios must be three non-negative reals")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigurationError(f"split ratios must sum to 1, got {sum(ratios)}")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one run needs, nested by stage."""

    seed: int = 0
    data_root: str = ""  # empty -> <run_dir>/data
    out_root: str = "runs"
    threads: int | None = None
    variant: str = "lite"
    pretrain_split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    target_split_ratios: tuple[float, float, float] = (0.6, 0.0, 0.4)
    harmonize: HarmonizeConfig = field(default_factory=HarmonizeConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    pretrain_run: PretrainRunConfig = field(default_factory=PretrainRunConfig)
    few_shot: FewShotSpec = field(default_factory=FewShotSpec)
    finetune_run: FinetuneRunConfig = field(default_factory=FinetuneRunConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def __post_init__(self) -> None:
        if self.variant != "custom" and self.variant not in VARIANTS:
            raise ConfigurationError(
                f"variant must be one of {sorted(VARIANTS)} or 'custom', got {self.variant!r}"
            )
        _validate_ratios(self.pretrain_split_ratios)
        _validate_ratios(self.target_split_ratios)
        if self.threads is not None and self.threads < 1:
            raise ConfigurationError("threads must be >= 1")

    def encoder_config(self) -> EncoderConfig:
        """Effective architecture: a preset unless variant == 'custom'."""
        if self.variant == "custom":
            return self.encoder
        return VARIANTS[self.variant]

    def to_dict(self) -> dict[str, Any]:
        return _as_jsonable(dataclasses.asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self) -> str:
        """Short content hash of the effective config; names the run dir."""
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:12]

    def run_dir(self) -> Path:
        return Path(self.out_root) / self.digest()


_SECTION_TYPES = {
    "harmonize": HarmonizeConfig,
    "fusion": FusionConfig,
    "augment": AugmentConfig,
    "encoder": EncoderConfig,
    "contrastive": ContrastiveConfig,
    "optimizer": OptimizerConfig,
    "schedule": ScheduleConfig,
    "pretrain_run": PretrainRunConfig,
    "few_shot": FewShotSpec,
    "finetune_run": FinetuneRunConfig,
    "synth": SynthConfig,
}


def _as_jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _as_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_as_jsonable(v) for v in obj]
    return obj


def _build_section(cls: type, data: dict[str, Any], where: str) -> Any:
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigurationError(f"unknown keys in {where}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        if isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigurationError(f"bad {where} section: {exc}") from exc


def config_from_dict(data: dict[str, Any]) -> ExperimentConfig:
    """Build an ExperimentConfig from parsed JSON, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigurationError("config root must be a JSON object")
    top: dict[str, Any] = {}
    for key, value in data.items():
        if key in _SECTION_TYPES:
            if not isinstance(value, dict):
                raise ConfigurationError(f"section {key!r} must be an object")
            top[key] = _build_section(_SECTION_TYPES[key], value, key)
        else:
            if isinstance(value, list):
                value = tuple(value)
            top[key] = value
    return _build_section(ExperimentConfig, top, "config")


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(data)


def apply_overrides(cfg: ExperimentConfig, overrides: dict[str, Any]) -> ExperimentConfig:
    """Return a copy with dotted-path overrides applied (flags win over file).

    Keys are either top-level field names or ``section.field``.
    """
    data = cfg.to_dict()
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        node = data
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigurationError(f"unknown config path {dotted!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigurationError(f"unknown config path {dotted!r}")
        node[parts[-1]] = value
    return config_from_dict(data)
