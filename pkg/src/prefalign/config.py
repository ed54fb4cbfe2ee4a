"""Experiment configuration: one YAML document with fixed sections.

Every section and key is optional; omitted values take the defaults below.
Unknown sections or keys are rejected with the offending key path.

.. code-block:: yaml

    world:   {n_concepts: 512, latent_dim: 16, raw_dim: 32, view_noise: 0.05,
              duplicate_fraction: 0.25, near_dup_cosine: 0.95, seed: 0}
    dedup:   {n_clusters: 1, epsilon: 0.07, seed: 0}
    mining:  {K: 3, captions: null, caption_seed: 0}
    judge:   {sharpness: 4.0, margin: 0.5, cache: score_cache.jsonl}
    loss:    {lambda: 0.5, variant: listwise, expanded_negatives: false}
    train:   {epochs: 10, batch_size: 32, lr: 0.5, seed: 0}
    eval:    {ks: [1, 5], n_instances: null, benchmark_seed: 0}
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace

import yaml

from .exceptions import ConfigInvalid
from .judge import DEFAULT_MARGIN
from .prefbuild import DedupConfig
from .synthworld import WorldConfig
from .trainer import TrainConfig
from .validation import check_int, check_positive


@dataclass(frozen=True)
class MiningConfig:
    K: int = 3
    captions: str | None = None  # optional multi-caption JSONL
    caption_seed: int = 0

    def __post_init__(self):
        check_int(self.K, "mining.K", minimum=0)
        check_int(self.caption_seed, "mining.caption_seed")


@dataclass(frozen=True)
class JudgeConfig:
    sharpness: float = 4.0
    margin: float = DEFAULT_MARGIN
    cache: str = "score_cache.jsonl"

    def __post_init__(self):
        try:
            check_positive(self.sharpness, "judge.sharpness")
        except ValueError as exc:
            raise ConfigInvalid(f"judge.sharpness: {exc}") from None


@dataclass(frozen=True)
class EvalConfig:
    ks: tuple = (1, 5)
    n_instances: int | None = None  # None = every planted pair
    benchmark_seed: int = 0
    pooled: bool = False
    embeddings: str | None = None
    instances: str | None = None
    truth: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "ks", tuple(self.ks))
        if not self.ks:
            raise ConfigInvalid("eval.ks: at least one k required")
        for k in self.ks:
            check_int(k, "eval.ks", minimum=1)
        if self.n_instances is not None:
            check_int(self.n_instances, "eval.n_instances", minimum=2)
        check_int(self.benchmark_seed, "eval.benchmark_seed")


# yaml key -> TrainConfig field, for the two sections that feed training
_LOSS_KEYS = {"lambda": "lam", "variant": "variant", "expanded_negatives": "expanded_negatives", "max_pairs": "max_pairs"}
_TRAIN_KEYS = {
    "epochs": "epochs",
    "batch_size": "batch_size",
    "lr": "learning_rate",
    "scale_lr_multiplier": "scale_lr_multiplier",
    "momentum": "momentum",
    "seed": "seed",
    "embed_dim": "embed_dim",
    "init_scale": "init_scale",
    "modality_offset": "modality_offset",
}

_SIMPLE_SECTIONS = {
    "world": WorldConfig,
    "dedup": DedupConfig,
    "mining": MiningConfig,
    "judge": JudgeConfig,
    "eval": EvalConfig,
}
SECTIONS = ("world", "dedup", "mining", "judge", "loss", "train", "eval")


@dataclass(frozen=True)
class ExperimentConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    dedup: DedupConfig = field(default_factory=DedupConfig)
    mining: MiningConfig = field(default_factory=MiningConfig)
    judge: JudgeConfig = field(default_factory=JudgeConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def from_dict(cls, doc):
        doc = {} if doc is None else doc
        if not isinstance(doc, dict):
            raise ConfigInvalid("config: top level must be a mapping")
        for key in doc:
            if key not in SECTIONS:
                raise ConfigInvalid(f"unknown config key: {key}")
        parts = {}
        for name, klass in _SIMPLE_SECTIONS.items():
            section = _section(doc, name)
            allowed = {f.name for f in fields(klass)}
            _reject_unknown(name, section, allowed)
            parts[name] = _build(klass, name, section)
        train_kw = {}
        for name, mapping in (("loss", _LOSS_KEYS), ("train", _TRAIN_KEYS)):
            section = _section(doc, name)
            _reject_unknown(name, section, mapping)
            train_kw.update({mapping[k]: v for k, v in section.items()})
        parts["train"] = _build(TrainConfig, "train", train_kw)
        return cls(**parts)

    @classmethod
    def load(cls, path):
        if path is None:
            return cls()
        with open(path, encoding="utf-8") as fh:
            try:
                doc = yaml.safe_load(fh)
            except yaml.YAMLError as exc:
                raise ConfigInvalid(f"config: cannot parse {path}: {exc}") from None
        return cls.from_dict(doc)

    def with_seed(self, seed):
        """Copy with every seed (world, dedup, training) set to ``seed``."""
        return replace(
            self,
            world=replace(self.world, seed=seed),
            dedup=replace(self.dedup, seed=seed),
            train=replace(self.train, seed=seed),
        )

    def to_dict(self):
        t = asdict(self.train)
        return {
            "world": asdict(self.world),
            "dedup": asdict(self.dedup),
            "mining": asdict(self.mining),
            "judge": asdict(self.judge),
            "loss": {k: t[v] for k, v in _LOSS_KEYS.items()},
            "train": {k: t[v] for k, v in _TRAIN_KEYS.items()},
            "eval": {**asdict(self.eval), "ks": list(self.eval.ks)},
        }

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _section(doc, name):
    section = doc.get(name) or {}
    if not isinstance(section, dict):
        raise ConfigInvalid(f"{name}: section must be a mapping")
    return section


def _reject_unknown(name, section, allowed):
    for key in section:
        if key not in allowed:
            raise ConfigInvalid(f"unknown config key: {name}.{key}")


def _build(klass, name, kw):
    try:
        return klass(**kw)
    except ConfigInvalid:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigInvalid(f"{name}: {exc}") from None
