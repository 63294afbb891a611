"""Experiment configuration: YAML document, dotted-key overrides, grid expansion, hashing."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from ..augment import STRATEGIES
from ..data import CORRUPTION_FAMILIES
from ..ensembles import MODES
from ..netcore import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSection:
    n_clusters: int = 5
    ring_radius: float = 3.0
    radii: list = field(default_factory=lambda: [0.2, 0.4, 0.6, 0.8, 1.0])
    samples_per_cluster: int = 300
    val_fraction: float = 0.1
    test_fraction: float = 0.4


@dataclass
class EnsembleSection:
    mode: str = "deep"
    K: int = 4
    hidden: list = field(default_factory=lambda: [64, 64])
    dropout_rate: float = 0.1
    factor_std: float = 0.5


@dataclass
class AugmentSection:
    strategy: str = "none"
    a: float = 1.0
    alpha: float = 0.1
    k: int = 3
    augmix_intensity: float = 0.3
    conf_mode: str = "max"
    camixup_scope: str = "ensemble"


@dataclass
class EvalSection:
    bins: int = 15
    tace_threshold: float = 0.01
    temperature: bool = True
    corruption_families: list = field(default_factory=lambda: list(CORRUPTION_FAMILIES))
    intensities: list = field(default_factory=lambda: [1, 2, 3, 4, 5])


@dataclass
class TrainSection:
    epochs: int = 200
    base_lr: float = 0.03
    lr_decay_ratio: float = 0.1
    lr_decay_epochs: list = field(default_factory=lambda: [80, 160])
    momentum: float = 0.9
    l2: float = 1e-4
    batch_size: int = 64

    def to_train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(seed=seed, **asdict(self))


# strategy -> augment fields it reads
STRATEGY_PARAMS = {
    "none": (),
    "mixup": ("a",),
    "label_smooth": ("alpha",),
    "augmix": ("k", "augmix_intensity"),
    "augmixup": ("a", "k", "augmix_intensity"),
    "camixup": ("a", "conf_mode", "camixup_scope"),
    "augcamixup": ("a", "k", "augmix_intensity", "conf_mode", "camixup_scope"),
    "forgetting_camixup": ("a",),
}

SECTIONS = {"dataset": DatasetSection, "ensemble": EnsembleSection, "augment": AugmentSection,
            "eval": EvalSection, "train": TrainSection}


@dataclass
class ExperimentConfig:
    name: str | None = None
    dataset: DatasetSection = field(default_factory=DatasetSection)
    ensemble: EnsembleSection = field(default_factory=EnsembleSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    eval: EvalSection = field(default_factory=EvalSection)
    train: TrainSection = field(default_factory=TrainSection)
    seeds: list = field(default_factory=lambda: [0])
    output_dir: str = "runs"

    @property
    def label(self) -> str:
        return self.name or f"{self.ensemble.mode}-{self.augment.strategy}"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        d.pop("grid", None)
        kwargs = {}
        for key, value in d.items():
            if key in SECTIONS:
                section = SECTIONS[key]
                names = {f.name for f in fields(section)}
                unknown = set(value or {}) - names
                if unknown:
                    raise ConfigError(f"unknown keys in [{key}]: {sorted(unknown)}")
                kwargs[key] = section(**_coerce(section, value or {}))
            elif key in ("name", "seeds", "output_dir"):
                kwargs[key] = value
            else:
                raise ConfigError(f"unknown config key {key!r}")
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        e, a, t, ds, ev = self.ensemble, self.augment, self.train, self.dataset, self.eval
        if e.mode not in MODES:
            raise ConfigError(f"ensemble.mode must be one of {MODES}, got {e.mode!r}")
        if e.K < 1:
            raise ConfigError("ensemble.K must be at least 1")
        if a.strategy not in STRATEGIES:
            raise ConfigError(f"augment.strategy must be one of {STRATEGIES}, got {a.strategy!r}")
        needs = STRATEGY_PARAMS[a.strategy]
        if "a" in needs and not a.a > 0:
            raise ConfigError("augment.a must be positive")
        if "alpha" in needs and not 0 <= a.alpha < 1:
            raise ConfigError("augment.alpha must be in [0, 1)")
        if "k" in needs and a.k < 1:
            raise ConfigError("augment.k must be at least 1")
        if a.conf_mode not in ("max", "class"):
            raise ConfigError("augment.conf_mode must be 'max' or 'class'")
        if a.camixup_scope not in ("ensemble", "member"):
            raise ConfigError("augment.camixup_scope must be 'ensemble' or 'member'")
        if not self.seeds or not isinstance(self.seeds, list):
            raise ConfigError("seeds must be a non-empty list")
        if len(ds.radii) != ds.n_clusters:
            raise ConfigError("dataset.radii needs one radius per cluster")
        unknown = set(ev.corruption_families) - set(CORRUPTION_FAMILIES)
        if unknown:
            raise ConfigError(f"unknown corruption families {sorted(unknown)}")
        if any(not 1 <= i <= 5 for i in ev.intensities):
            raise ConfigError("eval.intensities must lie in 1..5")
        try:
            t.to_train_config(0)
        except ValueError as exc:
            raise ConfigError(f"train: {exc}") from exc

    def semantic_dict(self) -> dict:
        """Fields that change results; unused strategy knobs, seeds and paths are dropped."""
        d = self.to_dict()
        for key in ("name", "seeds", "output_dir"):
            d.pop(key)
        used = STRATEGY_PARAMS[self.augment.strategy]
        d["augment"] = {k: v for k, v in d["augment"].items() if k == "strategy" or k in used}
        if self.ensemble.mode != "mc_dropout":
            d["ensemble"].pop("dropout_rate")
        if self.ensemble.mode != "batch_ensemble":
            d["ensemble"].pop("factor_std")
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.semantic_dict(), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def dataset_hash(self) -> str:
        blob = json.dumps(asdict(self.dataset), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _coerce(section, values: dict) -> dict:
    """Cast numeric fields so that e.g. ``a: 1`` and ``a: 1.0`` hash alike."""
    types = {f.name: f.type for f in fields(section)}
    out = {}
    for key, value in values.items():
        kind = types[key]
        try:
            if kind == "float" and not isinstance(value, bool):
                value = float(value)
            elif kind == "int" and not isinstance(value, bool) and float(value) == int(value):
                value = int(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key}: expected {kind}, got {value!r}") from exc
        out[key] = value
    return out


def _set_dotted(d: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = d
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {dotted!r}: {key!r} is not a section")
    node[keys[-1]] = value


def parse_overrides(args: list[str]) -> dict[str, object]:
    """``--train.epochs 50`` / ``--augment.strategy=mixup`` pairs; values parsed as YAML."""
    out = {}
    i = 0
    while i < len(args):
        arg = args[i]
        if not arg.startswith("--"):
            raise ConfigError(f"unexpected argument {arg!r}")
        key = arg[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(args):
                raise ConfigError(f"flag {arg} needs a value")
            raw = args[i + 1]
            i += 2
        out[key] = yaml.safe_load(raw)
    return out


def load_document(path=None, overrides: dict | None = None) -> dict:
    doc = {}
    if path is not None:
        text = Path(path).read_text()
        doc = yaml.safe_load(text) or {}
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a mapping")
    doc = copy.deepcopy(doc)
    for key, value in (overrides or {}).items():
        if key.startswith("grid."):
            doc.setdefault("grid", {})[key[len("grid."):]] = value
        else:
            _set_dotted(doc, key, value)
    return doc


def expand_grid(doc: dict) -> list[ExperimentConfig]:
    """One config per combination of the ``grid`` lists (dotted keys -> value lists).

    Cells are named by their grid values, prefixed with the document ``name``.
    """
    grid = doc.get("grid") or {}
    cells = [(copy.deepcopy(doc), [])]
    for dotted, values in grid.items():
        if not isinstance(values, list) or not values:
            raise ConfigError(f"grid entry {dotted!r} must be a non-empty list")
        nxt = []
        for cell, tags in cells:
            for v in values:
                c = copy.deepcopy(cell)
                _set_dotted(c, dotted, v)
                nxt.append((c, tags + [str(v)]))
        cells = nxt
    configs = []
    for cell, tags in cells:
        if tags:
            cell["name"] = "-".join(([doc["name"]] if doc.get("name") else []) + tags)
        configs.append(ExperimentConfig.from_dict(cell))
    labels = [c.label for c in configs]
    if len(set(labels)) != len(labels):
        raise ConfigError("grid cells must have distinct names")
    return configs


def dump_yaml(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)
