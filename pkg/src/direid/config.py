"""Dataclass configs and the YAML round-trip used by every entry point."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    """Unknown key, bad value, or malformed override."""


@dataclass
class DegradationKind:
    kind: str = "resolution"
    low: float | None = None
    high: float | None = None

    def __post_init__(self):
        if self.kind not in DEFAULT_RANGES:
            raise ConfigError(f"unknown degradation kind {self.kind!r}")
        lo, hi = DEFAULT_RANGES[self.kind]
        if self.low is None:
            self.low = lo
        if self.high is None:
            self.high = hi
        if self.low > self.high:
            raise ConfigError(f"empty degradation range [{self.low}, {self.high}]")

    @property
    def param_range(self) -> tuple[float, float]:
        return (self.low, self.high)


DEFAULT_RANGES = {
    "resolution": (2.0, 4.0),
    "illumination": (2.0, 3.5),
}


@dataclass
class NetworkConfig:
    height: int = 64
    width: int = 32
    content_dim: int = 128
    degradation_dim: int = 64
    sensitive_dim: int = 256
    cue_dim: int = 128
    encoder_scales: int = 3
    discriminator_scales: int = 2
    num_identities: int = 50
    # hidden widths; not part of any interface
    base_width: int = 16
    attention_hidden: int = 64

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 1:
                raise ConfigError(f"network.{f.name} must be >= 1")
        if self.encoder_scales > 3:
            raise ConfigError("network.encoder_scales must be <= 3")

    @classmethod
    def tiny(cls, **kw) -> "NetworkConfig":
        """Configuration used by the finite-difference checks."""
        base = dict(height=16, width=8, content_dim=8, degradation_dim=4,
                    sensitive_dim=8, cue_dim=8, num_identities=4, base_width=4,
                    attention_hidden=4)
        base.update(kw)
        return cls(**base)


@dataclass
class LossWeights:
    invc: float = 1.0
    recon: float = 10.0
    pre: float = 1.0
    real: float = 1.0
    deg: float = 1.0
    id: float = 1.0
    inv: float = 1.0
    sen: float = 1.0
    both: float = 1.0
    rank_margin: float = 0.5
    triplet_margin: float = 0.3

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"loss weight {f.name} must be non-negative")
        if self.rank_margin <= 0:
            raise ConfigError("rank_margin must be positive")
        if self.triplet_margin <= 0:
            raise ConfigError("triplet_margin must be positive")

    def scaled(self, c: float) -> "LossWeights":
        """All stage weights multiplied by ``c``; margins untouched."""
        names = ("invc", "recon", "pre", "real", "deg", "id", "inv", "sen", "both")
        return dataclasses.replace(self, **{n: getattr(self, n) * c for n in names})


STAGES = ("pretrain_id", "ddgan", "dfen")
LR_SCHEDULES = ("constant", "cosine")


@dataclass
class TrainConfig:
    stage: str = "ddgan"
    ids_per_batch: int = 4
    instances_per_id: int = 2
    iterations: int = 1000
    lr_gan: float = 2e-4
    lr_head: float = 3e-4
    finetune_scale: float = 0.1
    betas: tuple[float, float] = (0.5, 0.999)
    # "constant" or "cosine" (annealed to 0 over ``iterations``)
    lr_schedule: str = "constant"
    seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 1
    degradation: DegradationKind = field(default_factory=DegradationKind)
    weights: LossWeights = field(default_factory=LossWeights)
    # dfen switches
    freeze_content: bool = False
    use_attention: bool = True
    # d_steps discriminator updates per generator update
    d_steps: int = 1

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}; choose from {LR_SCHEDULES}")
        if self.ids_per_batch < 1 or self.instances_per_id < 1:
            raise ConfigError("batch shape must be positive")
        if self.stage != "ddgan" and (self.batch_size < 4 or self.ids_per_batch < 2):
            raise ConfigError("triplet stages need batch_size >= 4 with >= 2 identities")
        self.betas = tuple(self.betas)

    @property
    def batch_size(self) -> int:
        return self.ids_per_batch * self.instances_per_id


@dataclass
class DataConfig:
    root: str = "data/synthetic"
    num_identities: int = 100
    images_per_identity: int = 8
    num_cameras: int = 2
    seed: int = 0
    train_fraction: float = 0.5
    query_camera: int = 0
    # down-sample the query camera in the training corpus as well (MLR construction)
    degrade_train_query_camera: bool = True


@dataclass
class EvalConfig:
    max_rank: int = 20
    trials: int = 10
    seed: int = 0
    variant: str = "fused"


@dataclass
class StageConfigs:
    pretrain_id: TrainConfig = field(
        default_factory=lambda: TrainConfig(stage="pretrain_id", ids_per_batch=8,
                                            instances_per_id=4, iterations=2000,
                                            betas=(0.9, 0.999), lr_schedule="cosine"))
    ddgan: TrainConfig = field(
        default_factory=lambda: TrainConfig(stage="ddgan", ids_per_batch=4,
                                            instances_per_id=2, iterations=5000))
    dfen: TrainConfig = field(
        default_factory=lambda: TrainConfig(stage="dfen", ids_per_batch=8,
                                            instances_per_id=4, iterations=2000,
                                            betas=(0.9, 0.999), lr_schedule="cosine"))


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: StageConfigs = field(default_factory=StageConfigs)
    eval: EvalConfig = field(default_factory=EvalConfig)
    out_dir: str = "runs/default"
    seed: int = 0

    def propagate_seed(self) -> "ExperimentConfig":
        """Push the global seed into every stage and the evaluator."""
        for name in STAGES:
            getattr(self.train, name).seed = self.seed
        self.eval.seed = self.seed
        return self


def to_dict(cfg) -> dict:
    def conv(v):
        if dataclasses.is_dataclass(v):
            return {f.name: conv(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, tuple):
            return [conv(x) for x in v]
        return v
    return conv(cfg)


def from_dict(cls, data: dict | None, path: str = ""):
    """Build dataclass ``cls`` from nested dicts, rejecting unknown keys by dotted path."""
    data = dict(data or {})
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs: dict[str, Any] = {}
    for key, value in data.items():
        dotted = f"{path}.{key}" if path else key
        if key not in known:
            raise ConfigError(f"invalid config key: {dotted}")
        sub = _dataclass_type(cls, key)
        if sub is not None:
            if not isinstance(value, dict):
                raise ConfigError(f"config key {dotted} expects a mapping")
            default = getattr(cls(), key) if _has_defaults(cls) else None
            merged = to_dict(default) if default is not None else {}
            merged.update(value)
            kwargs[key] = from_dict(sub, merged, dotted)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"bad value under {path or '<root>'}: {e}") from e


def _has_defaults(cls) -> bool:
    try:
        cls()
        return True
    except Exception:
        return False


_NESTED = {
    (TrainConfig, "degradation"): DegradationKind,
    (TrainConfig, "weights"): LossWeights,
    (StageConfigs, "pretrain_id"): TrainConfig,
    (StageConfigs, "ddgan"): TrainConfig,
    (StageConfigs, "dfen"): TrainConfig,
    (ExperimentConfig, "data"): DataConfig,
    (ExperimentConfig, "network"): NetworkConfig,
    (ExperimentConfig, "train"): StageConfigs,
    (ExperimentConfig, "eval"): EvalConfig,
}


def _dataclass_type(cls, key):
    return _NESTED.get((cls, key))


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` overrides to a nested dict; values parse as YAML scalars."""
    raw = _deepcopy(raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, _, text = item.partition("=")
        parts = key.strip().split(".")
        node = raw
        for i, p in enumerate(parts[:-1]):
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"invalid config key: {'.'.join(parts[: i + 1])}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"invalid config key: {key.strip()}")
        node[parts[-1]] = yaml.safe_load(text)
    return raw


def _deepcopy(d):
    if isinstance(d, dict):
        return {k: _deepcopy(v) for k, v in d.items()}
    if isinstance(d, list):
        return [_deepcopy(v) for v in d]
    return d


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> ExperimentConfig:
    raw = to_dict(ExperimentConfig())
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        user = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        if not isinstance(user, dict):
            raise ConfigError(f"config file {path} must hold a mapping")
        # validate user keys before merging so typos are named
        from_dict(ExperimentConfig, user)
        raw = _merge(raw, user)
    raw = apply_overrides(raw, overrides or [])
    return from_dict(ExperimentConfig, raw).propagate_seed()


def _merge(base: dict, top: dict) -> dict:
    out = dict(base)
    for k, v in top.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def dump_config(cfg, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(to_dict(cfg), sort_keys=True), encoding="utf-8")
