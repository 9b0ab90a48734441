"""Run configuration, stored as YAML and checked strictly.

Layout::

    seed: 0
    out_dir: runs
    dataset:
      kind: synthetic        # synthetic | camvid | cityscapes | folder
      root: null             # required unless kind is synthetic
      train_split: train
      val_split: val
      val_images: 32         # synthetic validation split size
      synthetic: {seed: 1, num_images: 64, ...}   # SyntheticSpec fields
    model:
      residual_mode: sr      # sr | er
      predictor: bp          # bp | gp
      num_levels: 3
      dropout: 0.1
      early_dropout: 0.01
    train: {...}             # TrainConfig fields except seed

The top-level ``seed`` seeds model initialisation and the training loop.
The synthetic validation split uses ``synthetic.seed + 1``. Unknown keys at
any depth raise :class:`ConfigError` naming the offending field.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .data import SyntheticSpec
from .errors import ConfigError
from .training import TrainConfig

DATASET_KINDS = ("synthetic", "camvid", "cityscapes", "folder")


@dataclass
class DatasetConfig:
    kind: str = "synthetic"
    root: str | None = None
    train_split: str = "train"
    val_split: str = "val"
    val_images: int = 32
    synthetic: SyntheticSpec = field(default_factory=lambda: SyntheticSpec(seed=1))

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ConfigError(f"dataset.kind: must be one of {DATASET_KINDS}, got {self.kind!r}")
        if self.kind != "synthetic" and not self.root:
            raise ConfigError(f"dataset.root: required for kind {self.kind!r}")
        if self.val_images < 0:
            raise ConfigError("dataset.val_images: must be non-negative")


@dataclass
class ModelConfig:
    residual_mode: str = "sr"
    predictor: str = "bp"
    num_levels: int = 3
    dropout: float = 0.1
    early_dropout: float = 0.01

    def __post_init__(self):
        if self.residual_mode not in ("sr", "er"):
            raise ConfigError(f"model.residual_mode: must be sr or er, got {self.residual_mode!r}")
        if self.predictor not in ("bp", "gp", "basic", "guided"):
            raise ConfigError(f"model.predictor: must be bp or gp, got {self.predictor!r}")
        if not 1 <= self.num_levels <= 3:
            raise ConfigError("model.num_levels: must be 1, 2 or 3")


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.train.seed != self.seed:
            self.train = replace(self.train, seed=self.seed)
        if self.train.top_level > self.model.num_levels:
            raise ConfigError(
                f"train.stage_plan: reaches level {self.train.top_level} but "
                f"model.num_levels is {self.model.num_levels}"
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"].pop("seed")
        d["train"]["stage_plan"] = [list(s) for s in self.train.stage_plan]
        syn = d["dataset"]["synthetic"]
        for key in ("image_size", "shapes_per_image", "shape_extent"):
            syn[key] = list(syn[key])
        return d

    def hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:10]


def _strict(cls, data, where):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"{where}.{unknown[0]}: unknown key (allowed: {', '.join(sorted(allowed))})")
    return data


def _build(cls, data, where, **kw):
    try:
        return cls(**data, **kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def from_dict(data: dict) -> RunConfig:
    data = dict(_strict(RunConfig, data, "config"))
    ds = dict(_strict(DatasetConfig, data.pop("dataset", None), "dataset"))
    syn = _strict(SyntheticSpec, ds.pop("synthetic", None), "dataset.synthetic")
    syn = {k: tuple(v) if isinstance(v, list) else v for k, v in syn.items()}
    syn.setdefault("seed", 1)
    ds["synthetic"] = _build(SyntheticSpec, syn, "dataset.synthetic")
    model = _strict(ModelConfig, data.pop("model", None), "model")
    train = data.pop("train", None)
    if isinstance(train, dict) and "seed" in train:
        raise ConfigError("train.seed: set the top-level seed instead")
    train = _strict(TrainConfig, train, "train")
    seed = data.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError(f"seed: expected an integer, got {seed!r}")
    return _build(
        RunConfig,
        data,
        "config",
        dataset=_build(DatasetConfig, ds, "dataset"),
        model=_build(ModelConfig, model, "model"),
        train=_build(TrainConfig, train, "train", seed=seed),
    )


def dumps(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False, default_flow_style=None)


def loads(text: str) -> RunConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    return from_dict(data or {})


def load(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    return loads(path.read_text())


def save(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(cfg))
    return path
