"""Run configuration: dataclasses, strict YAML parsing, and hashing.

Unknown keys are rejected rather than ignored; a silent typo in a loss
weight or threshold would corrupt an experiment. Every random choice in a
run is derived from the single top-level seed.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import yaml

from .common import ConfigurationError, derive_seed
from .data import ALLOWED_RATIOS, AugmentationConfig
from .evaluation import EnsembleConfig
from .losses import LossWeights

OUTPUT_ROOT_ENV = "REGIONSEG_OUTPUT_ROOT"


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "synthetic"            # "synthetic" or "folder"
    num_train: int = 200
    num_val: int = 50
    image_size: tuple = (64, 64)
    num_classes: int = 3
    train_root: str | None = None
    val_root: str | None = None

    def validate(self):
        if self.kind not in ("synthetic", "folder"):
            raise ConfigurationError(f"dataset.kind must be synthetic or folder, got {self.kind!r}")
        if self.kind == "synthetic":
            if self.num_train < 1 or self.num_val < 0:
                raise ConfigurationError("dataset sizes must be positive")
            if self.num_classes < 2:
                raise ConfigurationError("dataset.num_classes must be >= 2")
        else:
            if not self.train_root:
                raise ConfigurationError("dataset.kind=folder requires train_root")


@dataclass(frozen=True)
class PartitionConfig:
    ratio: Fraction = Fraction(1, 8)
    seed: int | None = None  # None: derived from the top-level seed

    def validate(self):
        if Fraction(self.ratio) not in ALLOWED_RATIOS:
            raise ConfigurationError(
                f"partition.ratio {self.ratio} not in {[str(r) for r in ALLOWED_RATIOS]}"
            )


@dataclass(frozen=True)
class ModelConfig:
    base_channels: int = 16
    disc_channels: int = 16

    def validate(self):
        if self.base_channels < 4 or self.disc_channels < 4:
            raise ConfigurationError("model channel widths must be >= 4")


@dataclass(frozen=True)
class Toggles:
    lplf: bool = False
    drlc: bool = False
    eni: bool = False


@dataclass
class TrainConfig:
    max_iters: int = 1000
    batch_size_labeled: int = 4
    batch_size_unlabeled: int = 4
    seg_lr: float = 2.5e-3
    seg_momentum: float = 0.9
    seg_weight_decay: float = 5e-4
    disc_lr: float = 1e-4
    disc_betas: tuple = (0.9, 0.99)
    poly_power: float = 0.9
    warmup_iters: int | None = None    # None: 5% of max_iters
    grad_accum_steps: int = 1
    checkpoint_every: int = 0          # 0: final checkpoint only
    eval_every: int = 0                # 0: final evaluation only
    toggles: Toggles = field(default_factory=Toggles)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0

    def resolved_warmup(self) -> int:
        if self.warmup_iters is not None:
            return self.warmup_iters
        return max(0, round(0.05 * self.max_iters))

    def validate(self):
        if self.max_iters < 1:
            raise ConfigurationError("train.max_iters must be >= 1")
        warmup = self.resolved_warmup()
        if not 0 <= warmup < self.max_iters:
            raise ConfigurationError(
                f"need max_iters > warmup_iters >= 0, got {self.max_iters} / {warmup}"
            )
        if self.seg_lr <= 0 or self.disc_lr <= 0:
            raise ConfigurationError("learning rates must be positive")
        if self.batch_size_labeled < 1 or self.batch_size_unlabeled < 0:
            raise ConfigurationError("batch sizes must be positive")
        if self.grad_accum_steps < 1:
            raise ConfigurationError("train.grad_accum_steps must be >= 1")
        try:
            self.loss_weights.validate()
        except ValueError as e:
            raise ConfigurationError(str(e)) from e


@dataclass(frozen=True)
class AblationConfig:
    ratios: tuple = (Fraction(1, 8),)
    seeds: tuple = (0, 1, 2)

    def validate(self):
        for r in self.ratios:
            if Fraction(r) not in ALLOWED_RATIOS:
                raise ConfigurationError(f"ablation ratio {r} not allowed")
        if not self.seeds:
            raise ConfigurationError("ablation.seeds must be nonempty")


@dataclass
class RunConfig:
    output_dir: str = "runs/default"
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    partition: PartitionConfig | None = field(default_factory=PartitionConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def validate(self):
        self.dataset.validate()
        if self.partition is not None:
            self.partition.validate()
        try:
            self.augmentation.validate()
            self.ensemble.validate()
        except ValueError as e:
            raise ConfigurationError(str(e)) from e
        self.model.validate()
        self.train.validate()
        self.ablation.validate()

    def partition_seed(self) -> int:
        if self.partition is not None and self.partition.seed is not None:
            return self.partition.seed
        return derive_seed(self.seed, "partition")


def _strict_kwargs(cls, section: dict, name: str) -> dict:
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigurationError(f"unknown key(s) in {name}: {', '.join(sorted(unknown))}")
    return dict(section)


def _as_tuple(value):
    return tuple(value) if isinstance(value, (list, tuple)) else value


def _parse_loss(section: dict) -> LossWeights:
    section = dict(section)
    profile = section.pop("profile", None)
    if profile is not None:
        if profile == "voc":
            base = LossWeights.voc_profile()
        elif profile == "cityscapes":
            base = LossWeights.cityscapes_profile()
        else:
            raise ConfigurationError(f"unknown loss.profile {profile!r} (voc or cityscapes)")
    else:
        base = LossWeights()
    kwargs = _strict_kwargs(LossWeights, section, "loss")
    return dataclasses.replace(base, **kwargs)


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigurationError("config file must contain a mapping at top level")
    data = dict(raw)
    sections = {}

    if "dataset" in data:
        ds = _strict_kwargs(DatasetConfig, data.pop("dataset"), "dataset")
        if "image_size" in ds:
            ds["image_size"] = _as_tuple(ds["image_size"])
        sections["dataset"] = DatasetConfig(**ds)
    if "partition" in data:
        part = data.pop("partition")
        if part is None:
            sections["partition"] = None
        else:
            pk = _strict_kwargs(PartitionConfig, part, "partition")
            if "ratio" in pk:
                pk["ratio"] = Fraction(str(pk["ratio"]))
            sections["partition"] = PartitionConfig(**pk)
    if "augmentation" in data:
        aug = _strict_kwargs(AugmentationConfig, data.pop("augmentation"), "augmentation")
        for key in ("crop_size", "scale_range"):
            if key in aug:
                aug[key] = _as_tuple(aug[key])
        sections["augmentation"] = AugmentationConfig(**aug)
    if "model" in data:
        sections["model"] = ModelConfig(
            **_strict_kwargs(ModelConfig, data.pop("model"), "model"))
    if "loss" in data:
        loss = _parse_loss(data.pop("loss"))
    else:
        loss = LossWeights()
    if "train" in data:
        tr = _strict_kwargs(TrainConfig, data.pop("train"), "train")
        tr.pop("loss_weights", None)
        tr.pop("seed", None)
        if "toggles" in tr:
            tr["toggles"] = Toggles(**_strict_kwargs(Toggles, tr["toggles"], "train.toggles"))
        if "disc_betas" in tr:
            tr["disc_betas"] = _as_tuple(tr["disc_betas"])
        sections["train"] = TrainConfig(**tr)
    if "ensemble" in data:
        sections["ensemble"] = EnsembleConfig(
            **_strict_kwargs(EnsembleConfig, data.pop("ensemble"), "ensemble"))
    if "ablation" in data:
        ab = _strict_kwargs(AblationConfig, data.pop("ablation"), "ablation")
        if "ratios" in ab:
            ab["ratios"] = tuple(Fraction(str(r)) for r in ab["ratios"])
        if "seeds" in ab:
            ab["seeds"] = _as_tuple(ab["seeds"])
        sections["ablation"] = AblationConfig(**ab)

    top = {}
    for key in ("output_dir", "seed"):
        if key in data:
            top[key] = data.pop(key)
    if data:
        raise ConfigurationError(f"unknown top-level key(s): {', '.join(sorted(data))}")

    cfg = RunConfig(**top, **sections)
    cfg.train.loss_weights = dataclasses.replace(loss, drlc_enabled=cfg.train.toggles.drlc)
    cfg.train.seed = cfg.seed
    cfg.validate()
    return cfg


def config_to_dict(cfg: RunConfig) -> dict:
    def clean(obj):
        if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
            return {k: clean(v) for k, v in dataclasses.asdict(obj).items()}
        if isinstance(obj, Fraction):
            return str(obj)
        if isinstance(obj, tuple):
            return [clean(v) for v in obj]
        if isinstance(obj, list):
            return [clean(v) for v in obj]
        if isinstance(obj, dict):
            return {k: clean(v) for k, v in obj.items()}
        return obj

    out = {
        "output_dir": cfg.output_dir,
        "seed": cfg.seed,
        "dataset": clean(cfg.dataset),
        "partition": clean(cfg.partition) if cfg.partition is not None else None,
        "augmentation": clean(cfg.augmentation),
        "model": clean(cfg.model),
        "train": clean(cfg.train),
        "ensemble": clean(cfg.ensemble),
        "ablation": clean(cfg.ablation),
    }
    # loss weights live in their own section of the file
    train = out["train"]
    out["loss"] = train.pop("loss_weights")
    out["loss"].pop("drlc_enabled")  # mirrors train.toggles.drlc
    train.pop("seed")                # mirrors the top-level seed
    return out


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file {path} does not exist")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ConfigurationError(f"cannot parse {path}: {e}") from e
    return config_from_dict(raw)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=True))


def config_hash(cfg: RunConfig) -> str:
    """Stable digest of everything except the output location."""
    payload = config_to_dict(cfg)
    payload.pop("output_dir", None)
    blob = json.dumps(payload, sort_keys=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def resolve_output_dir(cfg: RunConfig) -> Path:
    """Apply the output-root override env var to relative output dirs."""
    out = Path(cfg.output_dir)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    return out
