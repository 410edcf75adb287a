"""Experiment configuration: versioned JSON schema with strict validation.

Unknown keys are rejected at every level so stale or misspelled options
cannot silently change an experiment. The config hash (over everything
except the output location) is embedded in every produced file.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .attacks import AttackConfig
from .errors import ConfigError

SCHEMA_VERSION = 1

DATASETS = ("mnist", "cifar10", "synthetic", "imagenet64")
TIERS = ("D1", "D2", "D3")
OBJECTIVES = ("base", "svbi", "dvib")


def _require_keys(d: dict, allowed: set[str], context: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"{context}: unknown keys {sorted(unknown)}")


def _expect(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


@dataclass(frozen=True)
class SyntheticSpec:
    classes: int = 10
    per_class: int = 300
    image_size: int = 28
    noise: float = 0.2
    channels: int = 1

    @staticmethod
    def from_dict(d: dict) -> "SyntheticSpec":
        _require_keys(d, {"classes", "per_class", "image_size", "noise", "channels"}, "synthetic")
        spec = SyntheticSpec(**d)
        _expect(spec.classes >= 2, "synthetic.classes must be >= 2")
        _expect(spec.per_class >= 1, "synthetic.per_class must be >= 1")
        return spec


@dataclass(frozen=True)
class TrainSpec:
    epochs: int = 2
    batch_size: int = 128
    learning_rate: float = 1e-3
    train_limit: int | None = None
    beta_dvib: float = 2e-3
    beta_svbi: float = 0.2
    latent_dvib: int = 32
    latent_svbi: int = 6
    epochs_svbi: int | None = None  # codec often needs a little longer

    @staticmethod
    def from_dict(d: dict) -> "TrainSpec":
        _require_keys(d, {
            "epochs", "batch_size", "learning_rate", "train_limit",
            "beta_dvib", "beta_svbi", "latent_dvib", "latent_svbi", "epochs_svbi",
        }, "train")
        spec = TrainSpec(**d)
        _expect(spec.epochs >= 1, "train.epochs must be >= 1")
        _expect(spec.batch_size >= 1, "train.batch_size must be >= 1")
        _expect(spec.beta_dvib >= 0 and spec.beta_svbi >= 0, "train betas must be nonnegative")
        return spec


@dataclass(frozen=True)
class TabacofSpec:
    enabled: bool = False
    target_label: int = 1
    lambda_reg: float = 0.05
    max_iters: int = 60
    lr: float = 0.05
    objectives: tuple[str, ...] = ("base", "dvib")

    @staticmethod
    def from_dict(d: dict) -> "TabacofSpec":
        _require_keys(d, {"enabled", "target_label", "lambda_reg", "max_iters", "lr", "objectives"}, "tabacof")
        d = dict(d)
        if "objectives" in d:
            d["objectives"] = tuple(d["objectives"])
        spec = TabacofSpec(**d)
        for o in spec.objectives:
            _expect(o in OBJECTIVES, f"tabacof.objectives: unknown objective {o!r}")
        return spec


_ATTACK_KEYS = {
    "kind", "epsilon", "alpha", "beta_w", "c", "beta_l1", "theta", "gamma",
    "lambda_reg", "max_iters", "lr", "targeted", "seed", "grace",
}


def _attack_from_dict(d: dict, idx: int) -> AttackConfig:
    _require_keys(d, _ATTACK_KEYS, f"attacks[{idx}]")
    try:
        return AttackConfig(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"attacks[{idx}]: {e}") from None


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str
    tiers: tuple[str, ...]
    objectives: tuple[str, ...]
    attacks: tuple[AttackConfig, ...]
    train: TrainSpec
    output_dir: str
    master_seed: int = 0
    sample_limit: int | None = None
    data_dir: str | None = None
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    tabacof: TabacofSpec = field(default_factory=TabacofSpec)
    precision: str = "f32"
    attack_batch_size: int = 256
    save_sample_images: int = 0

    ROOT_KEYS = {
        "schema_version", "dataset", "tiers", "objectives", "attacks", "train",
        "output_dir", "master_seed", "sample_limit", "data_dir", "synthetic",
        "tabacof", "precision", "attack_batch_size", "save_sample_images",
    }

    @staticmethod
    def from_dict(d: dict) -> "ExperimentConfig":
        _require_keys(d, ExperimentConfig.ROOT_KEYS, "config")
        version = d.get("schema_version")
        _expect(version == SCHEMA_VERSION,
                f"config schema_version must be {SCHEMA_VERSION}, got {version!r}")
        _expect("dataset" in d and "output_dir" in d, "config needs dataset and output_dir")
        dataset = d["dataset"]
        _expect(dataset in DATASETS, f"unknown dataset {dataset!r}")
        _expect(dataset != "imagenet64",
                "imagenet64 is reserved in the schema but not implemented")
        tiers = tuple(d.get("tiers", ("D1",)))
        for t in tiers:
            _expect(t in TIERS, f"unknown tier {t!r}")
        _expect(len(tiers) == len(set(tiers)) > 0, "tiers must be a nonempty unique list")
        objectives = tuple(d.get("objectives", ("base",)))
        for o in objectives:
            _expect(o in OBJECTIVES, f"unknown objective {o!r}")
        _expect(len(objectives) == len(set(objectives)) > 0,
                "objectives must be a nonempty unique list")
        attacks = tuple(
            _attack_from_dict(a, i) for i, a in enumerate(d.get("attacks", ()))
        )
        for a in attacks:
            _expect(a.kind != "tabacof",
                    "the latent-targeting attack is configured via the tabacof block")
        train = TrainSpec.from_dict(d.get("train", {}))
        synthetic = SyntheticSpec.from_dict(d.get("synthetic", {}))
        tabacof = TabacofSpec.from_dict(d.get("tabacof", {}))
        if tabacof.enabled:
            for o in tabacof.objectives:
                _expect(o in objectives,
                        f"tabacof.objectives: {o!r} is not in the experiment objectives")
        precision = d.get("precision", "f32")
        _expect(precision in ("f32", "f64"), "precision must be f32 or f64")
        sample_limit = d.get("sample_limit")
        if sample_limit is not None:
            _expect(int(sample_limit) >= 1, "sample_limit must be positive")
            sample_limit = int(sample_limit)
        if "svbi" in objectives:
            _expect("base" in objectives, "svbi requires base (teacher) in objectives")
        cfg = ExperimentConfig(
            dataset=dataset,
            tiers=tiers,
            objectives=objectives,
            attacks=attacks,
            train=train,
            output_dir=str(d["output_dir"]),
            master_seed=int(d.get("master_seed", 0)),
            sample_limit=sample_limit,
            data_dir=d.get("data_dir"),
            synthetic=synthetic,
            tabacof=tabacof,
            precision=precision,
            attack_batch_size=int(d.get("attack_batch_size", 256)),
            save_sample_images=int(d.get("save_sample_images", 0)),
        )
        return cfg

    @staticmethod
    def load(path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path}: invalid JSON ({e})") from None
        return ExperimentConfig.from_dict(raw)

    def replace(self, **kw) -> "ExperimentConfig":
        from dataclasses import replace as _dc_replace

        return _dc_replace(self, **kw)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "dataset": self.dataset,
            "tiers": list(self.tiers),
            "objectives": list(self.objectives),
            "attacks": [
                {k: v for k, v in vars(a).items()} for a in self.attacks
            ],
            "train": vars(self.train).copy(),
            "output_dir": self.output_dir,
            "master_seed": self.master_seed,
            "sample_limit": self.sample_limit,
            "data_dir": self.data_dir,
            "synthetic": vars(self.synthetic).copy(),
            "tabacof": {**vars(self.tabacof), "objectives": list(self.tabacof.objectives)},
            "precision": self.precision,
            "attack_batch_size": self.attack_batch_size,
            "save_sample_images": self.save_sample_images,
        }

    def hash(self) -> str:
        """Hash of the experiment content (output location excluded)."""
        payload = self.to_dict()
        payload.pop("output_dir")
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def seed_for(master_seed: int, *parts) -> int:
    """Stable derived seed for a named purpose."""
    text = "|".join([str(master_seed)] + [str(p) for p in parts])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:4], "little")
