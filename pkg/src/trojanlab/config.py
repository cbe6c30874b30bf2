"""Experiment configuration: one JSON document, strict keys, documented defaults.

Sections and their defaults are the dataclasses below.  Unknown keys at any
level raise :class:`ConfigError`.  ``attack`` maps onto
:class:`~trojanlab.trojan.AttackConfig` and ``finetune`` onto
:class:`~trojanlab.finetune.FineTuneConfig`.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .finetune import FineTuneConfig, FineTuneConfigError
from .model import ModelTopology, TopologyError
from .trojan import AttackConfig, AttackConfigError


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    train: int = 2000
    finetune: int = 2000
    test: int = 500
    image_dims: list = field(default_factory=lambda: [16, 16, 3])
    vocab_size: int = 64
    embed_dim: int = 32
    glove_path: str | None = None  # optional GloVe-format table instead of synthetic vectors


@dataclass
class ModelConfig:
    vision_hidden: list = field(default_factory=lambda: [128])
    text_hidden: list = field(default_factory=lambda: [64])
    repr_dim: int = 32
    head_widths: list = field(default_factory=lambda: [64])
    text_pooling: str = "mean"


@dataclass
class PretrainConfig:
    epochs: int = 50
    batch_size: int = 128
    lr: float = 1e-3
    center: bool = True  # fold a zero-mean shift of the perturbation layer into the biases


@dataclass
class TrojanConfig:
    pool_size: int = 200  # Trojans generated from training samples, drawn on for injection
    test_size: int | None = None  # None: every test sample


@dataclass
class DefenseConfig:
    sigmas: list = field(default_factory=lambda: [0.0, 0.001, 0.01, 0.1])


@dataclass
class SweepConfig:
    alphas: list = field(default_factory=lambda: [0.01, 0.1, 0.5])
    iterations: list = field(default_factory=lambda: [5, 50])
    depths: list = field(default_factory=lambda: [1, 2, 3])
    counts: list = field(default_factory=lambda: [0, 1, 4, 8, 32, 128])
    compromise_threshold: float = 5.0  # percent ATA
    profile_samples: int = 200
    dist_samples: int = 200


@dataclass
class ExperimentConfig:
    seed: int = 0
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    output_dir: str | None = None
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    trojans: TrojanConfig = field(default_factory=TrojanConfig)
    finetune: FineTuneConfig = field(default_factory=FineTuneConfig)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    sweeps: SweepConfig = field(default_factory=SweepConfig)

    def topology(self) -> ModelTopology:
        d, m = self.data, self.model
        return ModelTopology(
            image_dims=tuple(d.image_dims), vision_hidden=list(m.vision_hidden), embed_dim=d.embed_dim,
            text_hidden=list(m.text_hidden), repr_dim=m.repr_dim, head_widths=list(m.head_widths),
            vocab_size=d.vocab_size, text_pooling=m.text_pooling,
        )

    def to_json(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = asdict(v) if hasattr(v, "__dataclass_fields__") else v
        for k in ("vision_clip", "text_clip"):
            out["attack"][k] = list(out["attack"][k])
        return out


_SECTIONS = {
    "data": DataConfig, "model": ModelConfig, "pretrain": PretrainConfig, "attack": AttackConfig,
    "trojans": TrojanConfig, "finetune": FineTuneConfig, "defense": DefenseConfig, "sweeps": SweepConfig,
}
_SCALARS = {"seed", "seeds", "output_dir"}


def _build(cls, values, where: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{where} must be a JSON object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    try:
        return cls(**values)
    except (TypeError, AttackConfigError, FineTuneConfigError) as exc:
        raise ConfigError(f"invalid {where}: {exc}") from exc


def from_dict(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(doc) - _SCALARS - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    kwargs = {k: _build(cls, doc[k], k) for k, cls in _SECTIONS.items() if k in doc}
    for k in _SCALARS & set(doc):
        kwargs[k] = doc[k]
    cfg = ExperimentConfig(**kwargs)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    d = cfg.data
    if min(d.train, d.finetune, d.test) < 1:
        raise ConfigError("data split sizes must be >= 1")
    if not cfg.seeds:
        raise ConfigError("seeds must list at least one seed")
    if cfg.trojans.pool_size < 1:
        raise ConfigError("trojans.pool_size must be >= 1")
    if any(s < 0 for s in cfg.defense.sigmas):
        raise ConfigError("defense.sigmas must be >= 0")
    try:
        cfg.topology()
    except TopologyError as exc:
        raise ConfigError(f"invalid model topology: {exc}") from exc


def load(path) -> ExperimentConfig:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return from_dict(doc)
