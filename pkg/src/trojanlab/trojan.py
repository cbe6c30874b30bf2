"""Instance-level Trojan generation against the selected perturbation neurons.

Vision: iterated sign-gradient descent on the image, pushing the vision
perturbation neuron toward the target activation, clipped to the pixel range
every step.  Text: the same iteration on the embedding of one question token
(the roi token), clipped to the embedding range, then decoded back to the
nearest vocabulary token by L2 distance in a 2-D PCA projection fitted on the
vocabulary together with the optimised embedding.

Generation is vectorised across samples.  Each sample's loss depends only on
its own input, so the gradient of the summed loss restricted to one row is that
sample's own gradient and batched results match one-at-a-time generation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import container
from .datagen import TEXT_CLIP, Dataset, EmbeddingTable, clip_open
from .model import VqaModel, activations, encode_text, encode_vision, flatten_images, text_features
from .neurons import PerturbationNeurons
from .numcore import GradTape, Tensor, grad, mul, pca_fit_transform, reduce_sum, sub, take

TROJAN_MAGIC = b"TJLBTROJ"


class AttackConfigError(ValueError):
    pass


@dataclass
class AttackConfig:
    alpha_i: float = 0.1
    E_i: int = 50
    alpha_q: float = 0.1
    E_q: int = 50
    target_activation: float = 10.0
    vision_clip: tuple = (0.0, 1.0)
    text_clip: tuple = TEXT_CLIP
    roi_policy: str = "last"
    decode_mode: str = "pca"

    def __post_init__(self) -> None:
        self.vision_clip = tuple(float(v) for v in self.vision_clip)
        self.text_clip = tuple(float(v) for v in self.text_clip)
        if not (self.alpha_i > 0 and self.alpha_q > 0):
            raise AttackConfigError("step lengths alpha_i and alpha_q must be positive")
        if self.E_i < 0 or self.E_q < 0:
            raise AttackConfigError("iteration counts E_i and E_q must be >= 0")
        if not self.vision_clip[0] < self.vision_clip[1]:
            raise AttackConfigError(f"vision_clip low must be below high, got {self.vision_clip}")
        if not self.text_clip[0] < self.text_clip[1]:
            raise AttackConfigError(f"text_clip low must be below high, got {self.text_clip}")
        if self.roi_policy not in ("last", "first"):
            raise AttackConfigError(f"roi_policy must be 'last' or 'first', got {self.roi_policy!r}")
        if self.decode_mode not in ("pca", "l2"):
            raise AttackConfigError(f"decode_mode must be 'pca' or 'l2', got {self.decode_mode!r}")


def clip(x: np.ndarray, bounds) -> np.ndarray:
    return np.clip(x, bounds[0], bounds[1])


def clip_text(x: np.ndarray, bounds) -> np.ndarray:
    # the embedding range is an open interval, so the bounds themselves are excluded
    return clip_open(x, bounds)


# --- vision -----------------------------------------------------------------


def vision_attack(model: VqaModel, neurons: PerturbationNeurons, images: np.ndarray,
                  cfg: AttackConfig, trace: bool = False):
    """Batched vision Trojans.  Returns ``(x_adv, final_activation[, loss_trace])``.

    ``loss_trace`` has shape (E_i + 1, n): the squared error at every iterate.
    """
    d = model.topology.repr_dim
    col = neurons.u_vision - d
    x = np.array(images, dtype=np.float64, copy=True)
    shape = x.shape
    losses = []
    for _ in range(cfg.E_i):
        flat = Tensor(flatten_images(x))
        with GradTape() as tape:
            tape.watch(flat)
            act = take(encode_vision(model, flat), col, axis=1)
            err = sub(cfg.target_activation, act)
            loss = reduce_sum(mul(err, err))
        if trace:
            losses.append(err.data**2)
        g = grad(tape, loss, flat).reshape(shape)
        x = clip(x - cfg.alpha_i * np.sign(g), cfg.vision_clip)
    final = encode_vision(model, flatten_images(x)).data[:, col]
    if trace:
        losses.append((cfg.target_activation - final) ** 2)
        return x, final, np.asarray(losses).reshape(cfg.E_i + 1, -1)
    return x, final


def gen_vision_trojan(model, neurons, image, question, cfg: AttackConfig):
    """Single-sample vision Trojan; the question is carried but never modified."""
    x, final = vision_attack(model, neurons, np.asarray(image)[None], cfg)
    return x[0], float(final[0])


# --- text -------------------------------------------------------------------


def roi_index(question: np.ndarray, pad_id: int, policy: str = "last") -> int:
    nonpad = np.flatnonzero(np.asarray(question) != pad_id)
    if nonpad.size == 0:
        raise ValueError("cannot build a text Trojan for an empty question")
    return int(nonpad[-1] if policy == "last" else nonpad[0])


def decode_token(trojan_embedding, table: EmbeddingTable, mode: str = "pca") -> int:
    """Vocabulary token nearest the optimised embedding (ties to the lowest id).

    ``pca`` mode projects vocabulary plus Trojan onto their top two principal
    components (fitted per call) and compares there; ``l2`` compares raw vectors.
    """
    cand = table.candidate_ids()
    if cand.size < 2:
        raise ValueError(f"decoding needs a vocabulary of at least 2 tokens, got {cand.size}")
    vocab = table.vectors[cand]
    e = np.asarray(trojan_embedding, dtype=np.float64).reshape(1, -1)
    if mode == "pca":
        proj = pca_fit_transform(np.vstack([vocab, e]), 2, allow_degenerate=True).data
        vocab, e = proj[:-1], proj[-1:]
    elif mode != "l2":
        raise ValueError(f"unknown decode mode {mode!r}")
    dist = np.sqrt(((vocab - e) ** 2).sum(axis=1))
    return int(cand[int(np.argmin(dist))])


def text_attack(model: VqaModel, neurons: PerturbationNeurons, questions: np.ndarray,
                cfg: AttackConfig, trace: bool = False):
    """Batched roi-embedding optimisation.

    Returns ``(roi_positions, optimised_embeddings, activation_at_embedding[, loss_trace])``.
    """
    table = model.embeddings
    questions = np.asarray(questions, dtype=np.int64)
    roi = np.array([roi_index(q, table.pad_id, cfg.roi_policy) for q in questions], dtype=np.int64)
    e = table.vectors[questions[np.arange(len(questions)), roi]].copy()
    col = neurons.u_text
    losses = []

    def act_of(embed: Tensor) -> Tensor:
        return take(encode_text(model, text_features(model, questions, roi, embed)), col, axis=1)

    for _ in range(cfg.E_q):
        var = Tensor(e)
        with GradTape() as tape:
            tape.watch(var)
            err = sub(cfg.target_activation, act_of(var))
            loss = reduce_sum(mul(err, err))
        if trace:
            losses.append(err.data**2)
        g = grad(tape, loss, var)
        e = clip_text(e - cfg.alpha_q * np.sign(g), cfg.text_clip)
    final = act_of(Tensor(e)).data
    if trace:
        losses.append((cfg.target_activation - final) ** 2)
        return roi, e, final, np.asarray(losses).reshape(cfg.E_q + 1, -1)
    return roi, e, final


def _text_activation(model, neurons, questions) -> np.ndarray:
    return encode_text(model, text_features(model, questions)).data[:, neurons.u_text]


def gen_text_trojan(model, neurons, image, question, embeddings: EmbeddingTable, cfg: AttackConfig):
    """Single-sample text Trojan: ``(x_q_adv, trojan_embedding, final_activation)``.

    ``final_activation`` is measured after decoding and re-embedding the token.
    """
    if embeddings is not model.embeddings and not np.array_equal(embeddings.vectors, model.embeddings.vectors):
        raise ValueError("text Trojans must be decoded with the model's own embedding table")
    q = np.asarray(question, dtype=np.int64)
    roi, e, _ = text_attack(model, neurons, q[None], cfg)
    token = decode_token(e[0], embeddings, cfg.decode_mode)
    q_adv = q.copy()
    q_adv[roi[0]] = token
    return q_adv, e[0], float(_text_activation(model, neurons, q_adv[None])[0])


# --- batches ----------------------------------------------------------------


@dataclass
class TrojanSample:
    image: np.ndarray
    question: np.ndarray
    label: int
    image_adv: np.ndarray
    question_adv: np.ndarray
    act_vision: float
    act_text: float
    act_text_embedding: float
    task: int = 0


@dataclass
class TrojanSet:
    """Column-stored batch of Trojan samples; indexing yields :class:`TrojanSample`."""

    images: np.ndarray
    questions: np.ndarray
    labels: np.ndarray
    tasks: np.ndarray
    images_adv: np.ndarray
    questions_adv: np.ndarray
    trojan_embeddings: np.ndarray
    roi: np.ndarray
    act_vision: np.ndarray
    act_text: np.ndarray
    act_text_embedding: np.ndarray
    source_index: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def __getitem__(self, i: int) -> TrojanSample:
        return TrojanSample(
            self.images[i], self.questions[i], int(self.labels[i]), self.images_adv[i],
            self.questions_adv[i], float(self.act_vision[i]), float(self.act_text[i]),
            float(self.act_text_embedding[i]), int(self.tasks[i]),
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, idx) -> "TrojanSet":
        idx = np.asarray(idx, dtype=np.int64)
        cols = {k: getattr(self, k)[idx] for k in _ARRAY_FIELDS}
        return TrojanSet(**cols, meta=dict(self.meta))

    def as_dataset(self, adversarial: bool = True) -> Dataset:
        imgs = self.images_adv if adversarial else self.images
        qs = self.questions_adv if adversarial else self.questions
        n = len(self)
        return Dataset(imgs, qs, self.labels.copy(), self.tasks.copy(), [()] * n,
                       np.zeros(n, dtype=np.uint64))


_ARRAY_FIELDS = (
    "images", "questions", "labels", "tasks", "images_adv", "questions_adv", "trojan_embeddings",
    "roi", "act_vision", "act_text", "act_text_embedding", "source_index",
)


def empty_trojan_set(model: VqaModel) -> TrojanSet:
    top = model.topology
    z = np.zeros
    return TrojanSet(
        z((0, *top.image_dims)), z((0, top.question_len), dtype=np.int64), z(0, dtype=np.int64),
        z(0, dtype=np.int64), z((0, *top.image_dims)), z((0, top.question_len), dtype=np.int64),
        z((0, top.embed_dim)), z(0, dtype=np.int64), z(0), z(0), z(0), z(0, dtype=np.int64),
    )


def gen_trojan_batch(model: VqaModel, neurons: PerturbationNeurons, samples: Dataset,
                     embeddings: EmbeddingTable, cfg: AttackConfig, chunk: int = 256) -> TrojanSet:
    """Vision and text Trojans for every sample, in input order."""
    n = len(samples)
    if n == 0:
        return empty_trojan_set(model)
    parts = []
    for s in range(0, n, chunk):
        imgs = samples.images[s : s + chunk]
        qs = samples.questions[s : s + chunk]
        x_adv, act_v = vision_attack(model, neurons, imgs, cfg)
        roi, emb, act_e = text_attack(model, neurons, qs, cfg)
        tokens = np.array([decode_token(e, embeddings, cfg.decode_mode) for e in emb])
        q_adv = qs.copy()
        q_adv[np.arange(len(qs)), roi] = tokens
        act_t = _text_activation(model, neurons, q_adv)
        parts.append((imgs, qs, x_adv, q_adv, emb, roi, act_v, act_t, act_e))
    cat = lambda i: np.concatenate([p[i] for p in parts])  # noqa: E731
    return TrojanSet(
        images=cat(0), questions=cat(1), labels=samples.answers.copy(), tasks=samples.tasks.copy(),
        images_adv=cat(2), questions_adv=cat(3), trojan_embeddings=cat(4), roi=cat(5),
        act_vision=cat(6), act_text=cat(7), act_text_embedding=cat(8),
        source_index=np.arange(n, dtype=np.int64),
        meta={"u_text": neurons.u_text, "u_vision": neurons.u_vision},
    )


def trojan_activations(model: VqaModel, trojans: TrojanSet) -> np.ndarray:
    """Perturbation-layer activations of the Trojan inputs (adversarial image + question)."""
    return activations(model, trojans.images_adv, trojans.questions_adv)


# --- serialization ----------------------------------------------------------


def save_trojans(trojans: TrojanSet, path) -> None:
    sections = {"meta": trojans.meta}
    for k in _ARRAY_FIELDS:
        sections[k] = np.asarray(getattr(trojans, k))
    container.save(path, TROJAN_MAGIC, sections)


def load_trojans(path) -> TrojanSet:
    sec = container.load(path, TROJAN_MAGIC)
    cols = {}
    for k in _ARRAY_FIELDS:
        v = sec[k]
        if v.dtype.kind == "f":
            cols[k] = v.astype(np.float64)
        else:
            cols[k] = v.astype(np.int64)
    return TrojanSet(**cols, meta=sec["meta"])


def trojans_debug_json(trojans: TrojanSet, table: EmbeddingTable, limit: int | None = None) -> str:
    rows = []
    for i in range(len(trojans) if limit is None else min(limit, len(trojans))):
        rows.append({
            "index": i,
            "label": int(trojans.labels[i]),
            "question": table.decode(trojans.questions[i]),
            "question_adv": table.decode(trojans.questions_adv[i]),
            "act_vision": float(trojans.act_vision[i]),
            "act_text": float(trojans.act_text[i]),
            "act_text_embedding": float(trojans.act_text_embedding[i]),
            "max_pixel_change": float(np.abs(trojans.images_adv[i] - trojans.images[i]).max()),
        })
    return json.dumps({"meta": trojans.meta, "samples": rows}, indent=2)
