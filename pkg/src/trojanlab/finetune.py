"""Poisoned fine-tuning with the adversarial-learning objective, and attack metrics.

A fine-tuned model keeps the pretrained encoders frozen, so the perturbation
layer of every sample is computed once up front and only the head is trained
on those cached features.  Per batch the adversarial objective is

    mean CE(clean rows) - beta * mean CE(trojan rows)

with the trojan term dropped when the batch holds no Trojans.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import container
from .datagen import TASKS, Dataset
from .model import (
    Adam,
    TrainingError,
    VqaModel,
    activations,
    head_logits,
    param_tensors,
    replace_head,
    layer_grads,
    trainable_arrays,
)
from .numcore import GradTape, Rng, Tensor, cross_entropy
from .trojan import TrojanSet

MODES = ("adversarial_loss", "label_flip", "clean")


class FineTuneConfigError(ValueError):
    pass


@dataclass
class FineTuneConfig:
    depth: int = 1
    width: int = 64
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    beta: float = 1.0
    gamma: float | None = None
    count: int | None = 32
    mode: str = "adversarial_loss"

    def __post_init__(self) -> None:
        if self.depth < 1:
            raise FineTuneConfigError(f"depth must be >= 1, got {self.depth}")
        if self.width < 1 or self.batch_size < 1 or self.epochs < 0:
            raise FineTuneConfigError("width and batch_size must be >= 1, epochs >= 0")
        if self.lr < 0:
            raise FineTuneConfigError(f"lr must be >= 0, got {self.lr}")
        if self.beta < 0:
            raise FineTuneConfigError(f"beta must be >= 0, got {self.beta}")
        if self.gamma is not None and not 0 <= self.gamma < 1:
            raise FineTuneConfigError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.count is not None and self.count < 0:
            raise FineTuneConfigError(f"count must be >= 0, got {self.count}")
        if self.mode not in MODES:
            raise FineTuneConfigError(f"mode must be one of {MODES}, got {self.mode!r}")

    def with_(self, **changes) -> "FineTuneConfig":
        d = dict(self.__dict__)
        d.update(changes)
        return FineTuneConfig(**d)


def injection_count(gamma: float, n_finetune: int) -> int:
    """floor(gamma * N), with a rounding guard so 32/168000 * 168000 gives 32."""
    return int(math.floor(gamma * n_finetune + 1e-9))


def resolve_count(cfg: FineTuneConfig, n_finetune: int) -> int:
    if cfg.count is not None:
        return int(cfg.count)
    if cfg.gamma is not None:
        return injection_count(cfg.gamma, n_finetune)
    return 0


@dataclass
class PoisonedDataset:
    data: Dataset
    is_trojan: np.ndarray  # bool per row

    def __len__(self) -> int:
        return len(self.data)

    @property
    def n_trojan(self) -> int:
        return int(self.is_trojan.sum())


def build_poisoned_set(finetune_data: Dataset, trojans: TrojanSet, count: int,
                       rng: Rng | None = None) -> PoisonedDataset:
    """Append ``count`` Trojans (adversarial image and question, original label).

    With ``rng`` the Trojans are a seeded draw from the pool, otherwise the first
    ``count`` are taken.
    """
    if count < 0:
        raise ValueError(f"count must be >= 0, got {count}")
    if count > len(trojans):
        raise ValueError(f"requested {count} Trojans but only {len(trojans)} are available")
    n = len(finetune_data)
    if count == 0:
        return PoisonedDataset(finetune_data, np.zeros(n, dtype=bool))
    pick = rng.choice(len(trojans), count) if rng is not None else np.arange(count)
    t = trojans.subset(pick).as_dataset()
    data = Dataset(
        np.concatenate([finetune_data.images, t.images]),
        np.concatenate([finetune_data.questions, t.questions]),
        np.concatenate([finetune_data.answers, t.answers]),
        np.concatenate([finetune_data.tasks, t.tasks]),
        list(finetune_data.scenes) + list(t.scenes),
        np.concatenate([finetune_data.image_seeds, t.image_seeds]),
    )
    tag = np.zeros(n + count, dtype=bool)
    tag[n:] = True
    return PoisonedDataset(data, tag)


@dataclass
class UpdateTrace:
    """Concatenated head parameters (weights then bias, layer by layer)."""

    initial: np.ndarray
    epoch_deltas: list[np.ndarray] = field(default_factory=list)
    final: np.ndarray | None = None

    @property
    def delta(self) -> np.ndarray:
        final = self.initial if self.final is None else self.final
        return final - self.initial

    def norms(self) -> list[float]:
        return [float(np.linalg.norm(d)) for d in self.epoch_deltas]


def head_vector(model: VqaModel) -> np.ndarray:
    parts = []
    for layer in model.head:
        parts += [layer.weight.ravel(), layer.bias.ravel()]
    return np.concatenate(parts)


def flip_labels(labels: np.ndarray, num_classes: int, rng: Rng) -> np.ndarray:
    """Uniformly drawn wrong label for every entry."""
    offset = rng.integers(num_classes - 1, size=len(labels)) + 1
    return (labels + offset) % num_classes


def batch_loss(model: VqaModel, params, v_clean, y_clean, v_troj, y_troj, beta: float) -> Tensor:
    """Mean CE over the clean rows minus ``beta`` times mean CE over the Trojan rows."""
    loss = None
    if len(y_clean):
        loss = cross_entropy(head_logits(model, Tensor(v_clean), params), y_clean)
    if len(y_troj) and beta:
        adv = cross_entropy(head_logits(model, Tensor(v_troj), params), y_troj) * (-beta)
        loss = adv if loss is None else loss + adv
    return loss


def finetune(model: VqaModel, poisoned: PoisonedDataset, cfg: FineTuneConfig, rng: Rng,
             dp_sigma: float = 0.0, features: np.ndarray | None = None) -> tuple[VqaModel, UpdateTrace]:
    """Train the head of ``model`` in place on ``poisoned``.

    ``dp_sigma`` > 0 adds fresh N(0, sigma^2) noise to every head parameter
    before each batch step, drawn from its own stream so sigma = 0 leaves the
    run bit-identical.  ``features`` may carry precomputed perturbation-layer
    activations of ``poisoned.data``.
    """
    if dp_sigma < 0:
        raise ValueError(f"dp sigma must be >= 0, got {dp_sigma}")
    if any(not l.frozen for l in model.vision + model.text):
        raise TrainingError("fine-tuning expects frozen encoders; call replace_head first")
    if not model.trainable():
        raise TrainingError("model has no trainable parameters")
    data = poisoned.data
    y = data.answers.copy()
    tag = poisoned.is_trojan.copy()
    feats = activations(model, data.images, data.questions) if features is None else features
    if cfg.mode == "clean":
        keep = ~tag
        feats, y, tag = feats[keep], y[keep], tag[keep]
    elif cfg.mode == "label_flip":
        y[tag] = flip_labels(y[tag], model.topology.num_answers, rng.child("flip"))
        tag = np.zeros_like(tag)
    beta = cfg.beta if cfg.mode == "adversarial_loss" else 0.0

    opt = Adam(cfg.lr)
    arrays = trainable_arrays(model)
    shuffle = rng.child("shuffle")
    noise = rng.child("dp")
    trace = UpdateTrace(head_vector(model))
    n = len(y)
    for _ in range(cfg.epochs):
        start = head_vector(model)
        order = shuffle.permutation(n)
        for s in range(0, n, cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            if dp_sigma > 0:
                for key in sorted(arrays):
                    arrays[key] += noise.normal(arrays[key].shape, std=dp_sigma)
            ci, ti = idx[~tag[idx]], idx[tag[idx]]
            params = param_tensors(model)
            with GradTape() as tape:
                for layer in model.head:
                    tape.watch(*params[layer.name])
                loss = batch_loss(model, params, feats[ci], y[ci], feats[ti], y[ti], beta)
            if loss is None:
                continue
            opt.step(arrays, layer_grads(tape, loss, model, params))
        trace.epoch_deltas.append(head_vector(model) - start)
    trace.final = head_vector(model)
    return model, trace


# --- evaluation -------------------------------------------------------------


@dataclass
class AttackMetrics:
    mta: float
    ata: float
    per_task: dict = field(default_factory=dict)  # task -> {"mta": .., "ata": ..}

    def as_row(self) -> dict:
        row = {"mta": 100.0 * self.mta, "ata": 100.0 * self.ata}
        for task in TASKS:
            if task in self.per_task:
                row[f"mta_{task}"] = 100.0 * self.per_task[task]["mta"]
                row[f"ata_{task}"] = 100.0 * self.per_task[task]["ata"]
        return row


def _accuracy_by_task(pred: np.ndarray, labels: np.ndarray, tasks: np.ndarray) -> tuple[float, dict]:
    ok = pred == labels
    by_task = {}
    for t, name in enumerate(TASKS):
        sel = tasks == t
        if sel.any():
            by_task[name] = float(ok[sel].mean())
    return float(ok.mean()), by_task


def metrics_from_predictions(clean_pred, clean_labels, clean_tasks, troj_pred, troj_labels, troj_tasks):
    if len(clean_labels) == 0 or len(troj_labels) == 0:
        raise ValueError("MTA and ATA need non-empty clean and Trojan test sets")
    mta, mt = _accuracy_by_task(np.asarray(clean_pred), np.asarray(clean_labels), np.asarray(clean_tasks))
    ata, at = _accuracy_by_task(np.asarray(troj_pred), np.asarray(troj_labels), np.asarray(troj_tasks))
    per_task = {k: {"mta": mt.get(k, float("nan")), "ata": at.get(k, float("nan"))} for k in TASKS
                if k in mt or k in at}
    return AttackMetrics(mta, ata, per_task)


def _predict_features(model: VqaModel, feats: np.ndarray) -> np.ndarray:
    return np.argmax(head_logits(model, Tensor(feats)).data, axis=1)


def evaluate(model: VqaModel, clean_test: Dataset, trojan_test: TrojanSet) -> AttackMetrics:
    """MTA on clean inputs and ATA on Trojan inputs; argmax ties go to the lowest class id."""
    if len(clean_test) == 0 or len(trojan_test) == 0:
        raise ValueError("MTA and ATA need non-empty clean and Trojan test sets")
    feats_c = activations(model, clean_test.images, clean_test.questions)
    feats_t = activations(model, trojan_test.images_adv, trojan_test.questions_adv)
    return metrics_from_predictions(
        _predict_features(model, feats_c), clean_test.answers, clean_test.tasks,
        _predict_features(model, feats_t), trojan_test.labels, trojan_test.tasks,
    )


# --- experiment cells -------------------------------------------------------


@dataclass
class AttackBench:
    """Everything a fine-tuning cell needs, with frozen-encoder features cached."""

    pretrained: VqaModel
    finetune_data: Dataset
    pool: TrojanSet
    clean_test: Dataset
    trojan_test: TrojanSet
    _cache: dict = field(default_factory=dict, repr=False)

    def features(self, key: str) -> np.ndarray:
        if key not in self._cache:
            m = self.pretrained
            src = {
                "finetune": (self.finetune_data.images, self.finetune_data.questions),
                "pool": (self.pool.images_adv, self.pool.questions_adv),
                "clean_test": (self.clean_test.images, self.clean_test.questions),
                "trojan_test": (self.trojan_test.images_adv, self.trojan_test.questions_adv),
            }[key]
            self._cache[key] = activations(m, *src)
        return self._cache[key]


@dataclass
class CellResult:
    depth: int
    mode: str
    count: int
    seed: int
    sigma: float
    metrics: AttackMetrics
    trace: UpdateTrace
    model: VqaModel | None = None

    def as_row(self) -> dict:
        return {"depth": self.depth, "mode": self.mode, "count": self.count, "seed": self.seed,
                "sigma": self.sigma, **self.metrics.as_row()}


def run_cell(bench: AttackBench, cfg: FineTuneConfig, seed: int, dp_sigma: float = 0.0,
             keep_model: bool = False) -> CellResult:
    """Replace the head, fine-tune on the poisoned set and evaluate.

    The head initialisation, Trojan draw and shuffling depend only on
    ``(seed, depth)``, so with-AL and without-AL runs of one seed share them.
    """
    n_ft = len(bench.finetune_data)
    count = resolve_count(cfg, n_ft)
    root = Rng(seed).child("finetune", cfg.depth)
    model = replace_head(bench.pretrained, cfg.depth, cfg.width, root.child("head"))
    poisoned = build_poisoned_set(bench.finetune_data, bench.pool, count, root.child("inject"))
    feats = bench.features("finetune")
    if count:
        pick = root.child("inject").choice(len(bench.pool), count)
        feats = np.concatenate([feats, bench.features("pool")[pick]])
    model, trace = finetune(model, poisoned, cfg, root.child("train"), dp_sigma=dp_sigma, features=feats)
    metrics = metrics_from_predictions(
        _predict_features(model, bench.features("clean_test")), bench.clean_test.answers, bench.clean_test.tasks,
        _predict_features(model, bench.features("trojan_test")), bench.trojan_test.labels,
        bench.trojan_test.tasks,
    )
    return CellResult(cfg.depth, cfg.mode, count, seed, dp_sigma, metrics, trace, model if keep_model else None)


def depth_sweep(bench: AttackBench, depths, cfg: FineTuneConfig, seeds) -> list[CellResult]:
    """With-AL (adversarial_loss) and without-AL (clean) cells for each depth and seed."""
    out = []
    for depth in depths:
        for mode in ("adversarial_loss", "clean"):
            for seed in seeds:
                out.append(run_cell(bench, cfg.with_(depth=depth, mode=mode), seed))
    return out


def sample_efficiency(bench: AttackBench, depth: int, counts, cfg: FineTuneConfig, seeds) -> list[CellResult]:
    out = []
    for count in counts:
        for seed in seeds:
            out.append(run_cell(bench, cfg.with_(depth=depth, count=int(count), gamma=None), seed))
    return out


def minimal_compromising_count(rows: list[CellResult], threshold: float = 0.0) -> int | None:
    """Smallest count whose seed-mean ATA (fraction) is at most ``threshold``."""
    by_count: dict[int, list[float]] = {}
    for r in rows:
        by_count.setdefault(r.count, []).append(r.metrics.ata)
    for count in sorted(by_count):
        if np.mean(by_count[count]) <= threshold + 1e-12:
            return count
    return None


# --- persistence ------------------------------------------------------------

TRACE_MAGIC = b"TJLBTRCE"


def save_trace(trace: UpdateTrace, path) -> None:
    sections = {"initial": trace.initial, "final": trace.initial if trace.final is None else trace.final,
                "epoch_deltas": np.asarray(trace.epoch_deltas).reshape(len(trace.epoch_deltas), -1)}
    container.save(path, TRACE_MAGIC, sections)


def load_trace(path) -> UpdateTrace:
    sec = container.load(path, TRACE_MAGIC)
    return UpdateTrace(sec["initial"], list(sec["epoch_deltas"]), sec["final"])
