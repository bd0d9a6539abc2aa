"""Run configuration: a JSON document with strict keys at every level."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .data import directory_dataset, split_dataset, synthetic_dataset
from .errors import ConfigError
from .geom import ROTATION_SETTINGS
from .mae import ModelConfig
from .pcio import SHAPES
from .rihf import RILF_GROUPS


def _strict(cls, d, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}; allowed: {sorted(known)}")
    return cls(**d)


@dataclass
class DataConfig:
    kind: str = "synthetic"
    shapes: list = field(default_factory=lambda: list(SHAPES))
    per_class: int = 200
    test_per_class: int = 100
    n_points: int = 512
    train_dir: str = ""
    test_dir: str = ""
    test_fraction: float = 0.2

    def validate(self):
        if self.kind not in ("synthetic", "directory"):
            raise ConfigError(f"data.kind must be 'synthetic' or 'directory', got {self.kind!r}")
        if self.kind == "synthetic":
            bad = [s for s in self.shapes if s not in SHAPES]
            if bad or not self.shapes:
                raise ConfigError(f"data.shapes: unknown shape(s) {bad}; allowed: {list(SHAPES)}")
        elif not self.train_dir:
            raise ConfigError("data.train_dir is required when data.kind is 'directory'")


@dataclass
class ProbeConfig:
    epochs: int = 200
    lr: float = 0.1
    lam: float = 1e-3
    pooling: str = "maxmean"


@dataclass
class FinetuneConfig:
    task: str = "classification"
    epochs: int = 20
    lr: float = 1e-3
    head_only: bool = False


@dataclass
class FewShotConfig:
    ways: int = 5
    shots: int = 10
    queries: int = 10
    episodes: int = 10


@dataclass
class AblateConfig:
    mask_ratios: list = field(default_factory=lambda: [0.3, 0.5, 0.6, 0.8])
    rilf_groups: list = field(
        default_factory=lambda: [[], ["distance"], ["reference"], ["neighbor"],
                                 ["distance", "reference", "neighbor"]]
    )
    epochs: int = 0  # 0 means "use the top-level epochs"


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    fewshot: FewShotConfig = field(default_factory=FewShotConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)
    train_rotation: str = "R"
    test_rotation: str = "R"
    epochs: int = 50
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.05
    checkpoint_every: int = 0
    seed: int | None = None
    output: str = "runs/default"

    _SECTIONS = {
        "model": ModelConfig, "data": DataConfig, "probe": ProbeConfig,
        "finetune": FinetuneConfig, "fewshot": FewShotConfig, "ablate": AblateConfig,
    }

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("config root must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s) {unknown}; allowed: {sorted(known)}")
        kwargs = dict(d)
        for name, sub in cls._SECTIONS.items():
            if name in kwargs:
                if name == "model":
                    if not isinstance(kwargs[name], dict):
                        raise ConfigError("model: expected an object")
                    kwargs[name] = ModelConfig.from_dict(kwargs[name])
                else:
                    kwargs[name] = _strict(sub, kwargs[name], name)
        try:
            cfg = cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(doc)

    def validate(self):
        for name in ("train_rotation", "test_rotation"):
            if getattr(self, name) not in ROTATION_SETTINGS:
                raise ConfigError(f"{name} must be one of {list(ROTATION_SETTINGS)}")
        for name in ("epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.seed is not None and (int(self.seed) != self.seed or self.seed < 0):
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")
        if self.finetune.task not in ("classification", "segmentation"):
            raise ConfigError(f"finetune.task must be classification or segmentation")
        if self.probe.pooling not in ("maxmean", "concat"):
            raise ConfigError("probe.pooling must be 'maxmean' or 'concat'")
        for r in self.ablate.mask_ratios:
            if not 0.0 <= r < 1.0:
                raise ConfigError(f"ablate.mask_ratios: {r} is outside [0, 1)")
        for groups in self.ablate.rilf_groups:
            bad = [g for g in groups if g not in RILF_GROUPS]
            if bad:
                raise ConfigError(f"ablate.rilf_groups: unknown group(s) {bad}; "
                                  f"allowed: {list(RILF_GROUPS)}")
        self.data.validate()

    def to_dict(self):
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    def config_hash(self):
        """Hash of everything that affects results (the output directory does not)."""
        d = self.to_dict()
        d.pop("output")
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def datasets(self):
        """(train, test) datasets in canonical pose."""
        dc, seed = self.data, self.seed
        if dc.kind == "synthetic":
            train = synthetic_dataset(dc.shapes, dc.per_class, dc.n_points, seed, "train")
            test = synthetic_dataset(dc.shapes, dc.test_per_class, dc.n_points, seed, "test")
            return train, test
        train = directory_dataset(dc.train_dir, dc.n_points, seed)
        if dc.test_dir:
            return train, directory_dataset(dc.test_dir, dc.n_points, seed)
        return split_dataset(train, dc.test_fraction, seed)
