"""Experiment configuration: one JSON-serializable tree with toy defaults.

The toy defaults are sized so the full run-all pipeline finishes on a single
CPU core in minutes while still exhibiting the qualitative rate-distortion
and adaptation behavior the acceptance properties assert.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

from .classifier import TrainHyper
from .codec import CodecConfig
from .errors import ConfigError

BUILD_TAG = "latentvox-0.1.0"


@dataclass(frozen=True)
class DatasetConfig:
    num_classes: int = 6
    clouds_per_class: int = 120
    points_per_cloud: int = 2048
    jitter: float = 0.01
    scale_min: float = 0.7
    scale_max: float = 1.0


@dataclass(frozen=True)
class ClassifierConfig:
    grid: int = 32
    k: int = 1
    resample_points: int = 1024
    conv_channels: tuple = (64, 32, 16, 16, 16, 16)
    conv_strides: tuple = (2, 2, 1, 1, 1, 1)
    fc_sizes: tuple = (256, 64)
    pruning_units: int = 2
    train: TrainHyper = field(default_factory=lambda: TrainHyper(
        batch_size=32, lr=1e-3, max_epochs=18, stop_patience=6, lr_patience=3))


@dataclass(frozen=True)
class AdaptationConfig:
    presets: tuple = ("HighComp", "MediumComp", "LowComp",
                      "HighComp+Bridge", "MediumComp+Bridge", "LowComp+Bridge")
    bridge: TrainHyper = field(default_factory=lambda: TrainHyper(
        batch_size=32, lr=2e-3, max_epochs=6, stop_patience=3, lr_patience=2))
    finetune: TrainHyper = field(default_factory=lambda: TrainHyper(
        batch_size=32, lr=2e-3, max_epochs=6, stop_patience=3, lr_patience=2))
    sweep_enabled: bool = True
    sweep_lambda_index: int = 0
    sweep: TrainHyper = field(default_factory=lambda: TrainHyper(
        batch_size=32, lr=2e-3, max_epochs=4, stop_patience=2, lr_patience=2))


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 20260814
    threads: int = 1
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    # top-N binarization keeps reconstruction quality meaningful across the
    # whole ladder; plain thresholding stays the codec-level default
    codec: CodecConfig = field(
        default_factory=lambda: CodecConfig(decode_mode="topn"))
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    adaptation: AdaptationConfig = field(default_factory=AdaptationConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["codec"] = self.codec.to_dict()
        return d

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:12]

    def provenance(self) -> dict:
        return {"config_hash": self.config_hash(), "seed": self.seed,
                "build": BUILD_TAG}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        kw = {}
        if "seed" in d:
            kw["seed"] = int(d["seed"])
        if "threads" in d:
            kw["threads"] = int(d["threads"])
        if "dataset" in d:
            kw["dataset"] = DatasetConfig(**d["dataset"])
        if "codec" in d:
            kw["codec"] = CodecConfig.from_dict(d["codec"])
        if "classifier" in d:
            c = dict(d["classifier"])
            if "train" in c:
                c["train"] = TrainHyper(**c["train"])
            for key in ("conv_channels", "conv_strides", "fc_sizes"):
                if key in c:
                    c[key] = tuple(c[key])
            kw["classifier"] = ClassifierConfig(**c)
        if "adaptation" in d:
            a = dict(d["adaptation"])
            for key in ("bridge", "finetune", "sweep"):
                if key in a:
                    a[key] = TrainHyper(**a[key])
            if "presets" in a:
                a["presets"] = tuple(a["presets"])
            kw["adaptation"] = AdaptationConfig(**a)
        unknown = set(d) - {"seed", "threads", "dataset", "codec", "classifier",
                            "adaptation"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1, sort_keys=True)
            f.write("\n")

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=seed)
