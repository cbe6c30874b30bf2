"""Desk-scale multimodal classifier: vision MLP, text MLP, concatenation, head.

The perturbation layer is the concatenated representation ``[v_q | v_i]``:
columns ``0..D-1`` come from the text encoder and ``D..2D-1`` from the vision
encoder.  Everything after it is the head (the pretrained fusion network, or
the replacement fine-tuning network after :func:`replace_head`).
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import container
from .datagen import QUESTION_LEN, Dataset, EmbeddingTable
from .numcore import (
    DimensionError,
    GradTape,
    Rng,
    Tensor,
    add,
    concat,
    cross_entropy,
    grad,
    matmul,
    mul,
    relu,
)

CHECKPOINT_MAGIC = b"TJLBCKPT"


class TopologyError(ValueError):
    pass


class TrainingError(ValueError):
    pass


@dataclass
class ModelTopology:
    image_dims: tuple = (16, 16, 3)
    vision_hidden: list = field(default_factory=lambda: [128])
    embed_dim: int = 32
    text_hidden: list = field(default_factory=lambda: [64])
    repr_dim: int = 32
    head_widths: list = field(default_factory=lambda: [64])
    num_answers: int = 8
    vocab_size: int = 64
    question_len: int = QUESTION_LEN
    text_pooling: str = "mean"

    def __post_init__(self) -> None:
        self.image_dims = tuple(int(v) for v in self.image_dims)
        if self.text_pooling not in ("mean", "concat"):
            raise TopologyError(f"text_pooling must be 'mean' or 'concat', got {self.text_pooling!r}")
        if self.repr_dim < 2:
            raise TopologyError(f"repr_dim must be >= 2, got {self.repr_dim}")
        if self.num_answers < 2:
            raise TopologyError(f"num_answers must be >= 2, got {self.num_answers}")
        if len(self.image_dims) != 3 or min(self.image_dims) < 1:
            raise TopologyError(f"image_dims must be (height, width, channels), got {self.image_dims}")

    @property
    def perturbation_width(self) -> int:
        return 2 * self.repr_dim

    @property
    def fusion_out(self) -> int:
        return self.head_widths[0] if self.head_widths else self.num_answers

    @property
    def text_input(self) -> int:
        return self.embed_dim * (self.question_len if self.text_pooling == "concat" else 1)

    @property
    def image_size(self) -> int:
        h, w, c = self.image_dims
        return h * w * c

    def to_json(self) -> dict:
        d = asdict(self)
        d["image_dims"] = list(self.image_dims)
        return d


@dataclass
class Layer:
    name: str
    weight: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray  # (fan_out,)
    frozen: bool = False


@dataclass
class VqaModel:
    topology: ModelTopology
    embeddings: EmbeddingTable
    vision: list[Layer]
    text: list[Layer]
    head: list[Layer]

    @property
    def layers(self) -> list[Layer]:
        return self.vision + self.text + self.head

    @property
    def frozen_mask(self) -> dict[str, bool]:
        return {layer.name: layer.frozen for layer in self.layers}

    def trainable(self) -> list[Layer]:
        return [layer for layer in self.layers if not layer.frozen]

    def copy(self) -> "VqaModel":
        return copy.deepcopy(self)


# --- construction -----------------------------------------------------------


def _dense_stack(prefix: str, widths: list[int], rng: Rng | None) -> list[Layer]:
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        last = i == len(widths) - 2
        if rng is None:
            w = np.zeros((fan_in, fan_out))
        else:
            # He init for relu-fed layers, Glorot-like for output layers
            std = np.sqrt((1.0 if last else 2.0) / fan_in)
            w = rng.normal((fan_in, fan_out), std=std)
        layers.append(Layer(f"{prefix}.{i}", w, np.zeros(fan_out)))
    return layers


def _check_embeddings(top: ModelTopology, table: EmbeddingTable) -> None:
    if table.dim != top.embed_dim:
        raise TopologyError(f"embedding dim {table.dim} != topology embed_dim {top.embed_dim}")
    if len(table) != top.vocab_size:
        raise TopologyError(f"vocabulary has {len(table)} tokens, topology says {top.vocab_size}")
    if table.pad_id is None:
        raise TopologyError("embedding table needs a pad token")


def init_model(top: ModelTopology, table: EmbeddingTable, rng: Rng | None) -> VqaModel:
    """Freshly initialised model; ``rng=None`` gives all-zero weights."""
    _check_embeddings(top, table)
    d = top.repr_dim
    vision = _dense_stack("vision", [top.image_size, *top.vision_hidden, d], rng and rng.child("vision"))
    text = _dense_stack("text", [top.text_input, *top.text_hidden, d], rng and rng.child("text"))
    head = _dense_stack(
        "head", [2 * d, *top.head_widths, top.num_answers], rng and rng.child("head")
    )
    return VqaModel(top, table, vision, text, head)


def replace_head(model: VqaModel, depth: int, width: int, rng: Rng) -> VqaModel:
    """Freeze encoders and perturbation layer; attach a fresh ``depth``-layer head."""
    if depth < 1:
        raise TopologyError(f"head depth must be >= 1, got {depth}")
    if width < 1:
        raise TopologyError(f"head width must be >= 1, got {width}")
    top = copy.deepcopy(model.topology)
    top.head_widths = [int(width)] * (depth - 1)
    vision = [Layer(l.name, l.weight.copy(), l.bias.copy(), True) for l in model.vision]
    text = [Layer(l.name, l.weight.copy(), l.bias.copy(), True) for l in model.text]
    head = _dense_stack("tune", [top.perturbation_width, *top.head_widths, top.num_answers], rng)
    return VqaModel(top, model.embeddings, vision, text, head)


# --- forward ----------------------------------------------------------------


def param_tensors(model: VqaModel) -> dict[str, tuple[Tensor, Tensor]]:
    return {l.name: (Tensor(l.weight), Tensor(l.bias)) for l in model.layers}


def _mlp(x: Tensor, layers: list[Layer], params) -> Tensor:
    for i, layer in enumerate(layers):
        w, b = params[layer.name] if params else (layer.weight, layer.bias)
        x = matmul(x, w) + b
        if i < len(layers) - 1:
            x = relu(x)
    return x


def validate_inputs(model: VqaModel, images: np.ndarray, questions: np.ndarray) -> None:
    top = model.topology
    if images.shape[1:] != top.image_dims:
        raise DimensionError(f"image shape {images.shape[1:]} does not match topology {top.image_dims}")
    if questions.ndim != 2 or questions.shape[0] != images.shape[0]:
        raise DimensionError(f"questions shape {questions.shape} does not pair with {images.shape[0]} images")
    bad = (questions < 0) | (questions >= len(model.embeddings))
    if np.any(bad):
        raise KeyError(f"unknown token id {int(questions[bad][0])}")


def text_features(model: VqaModel, questions: np.ndarray, roi=None, roi_embedding=None):
    """Text-encoder input for token-id questions.

    ``mean`` pooling averages the non-pad token embeddings (all-pad pools to
    zeros); ``concat`` lays the L position embeddings side by side with pad
    positions zeroed.  With ``roi`` (one position per row) and ``roi_embedding``
    (an (n, d) Tensor) the token at each roi position is replaced by that
    embedding, keeping the result differentiable in it.
    """
    table = model.embeddings
    emb = table.vectors[questions]  # (n, L, d)
    keep = questions != table.pad_id
    n, length, d = emb.shape
    concat_mode = model.topology.text_pooling == "concat"
    if roi is None:
        emb = emb * keep[..., None]
        if concat_mode:
            return emb.reshape(n, length * d)
        return emb.sum(axis=1) / np.maximum(keep.sum(axis=1), 1)[:, None]
    rows = np.arange(n)
    rest = keep.copy()
    rest[rows, roi] = False
    base = emb * rest[..., None]
    if concat_mode:
        block = np.zeros((n, length, 1))
        block[rows, roi] = 1.0
        tiled = concat([roi_embedding] * length, axis=1)
        return add(base.reshape(n, length * d), mul(tiled, np.broadcast_to(block, (n, length, d)).reshape(n, length * d)))
    count = np.maximum(keep.sum(axis=1), 1)[:, None].astype(np.float64)
    return mul(add(base.sum(axis=1), roi_embedding), 1.0 / count)


def encode_vision(model: VqaModel, flat_images, params=None) -> Tensor:
    return _mlp(flat_images, model.vision, params)


def encode_text(model: VqaModel, features, params=None) -> Tensor:
    return _mlp(features, model.text, params)


def head_logits(model: VqaModel, v, params=None) -> Tensor:
    return _mlp(v, model.head, params)


def flatten_images(images: np.ndarray) -> np.ndarray:
    return images.reshape(images.shape[0], -1)


def perturbation_layer(model: VqaModel, images: np.ndarray, questions: np.ndarray, params=None) -> Tensor:
    v_i = encode_vision(model, flatten_images(images), params)
    v_q = encode_text(model, text_features(model, questions), params)
    return concat([v_q, v_i], axis=1)


def forward_batch(model: VqaModel, images, questions, params=None) -> tuple[Tensor, Tensor]:
    images = np.asarray(images, dtype=np.float64)
    questions = np.asarray(questions, dtype=np.int64)
    validate_inputs(model, images, questions)
    v = perturbation_layer(model, images, questions, params)
    return head_logits(model, v, params), v


def forward(model: VqaModel, image, question) -> tuple[Tensor, Tensor]:
    """Logits (C,) and perturbation-layer activations (2D,) for one sample."""
    image = np.asarray(image, dtype=np.float64)
    question = np.asarray(question, dtype=np.int64)
    if question.ndim != 1:
        raise DimensionError(f"question must be a 1-D token list, got shape {question.shape}")
    logits, v = forward_batch(model, image[None], question[None])
    return Tensor(logits.data[0]), Tensor(v.data[0])


def predict(model: VqaModel, images, questions, batch_size: int = 512) -> np.ndarray:
    """Argmax class per sample (ties go to the lowest class id)."""
    preds = []
    for s in range(0, len(images), batch_size):
        logits, _ = forward_batch(model, images[s : s + batch_size], questions[s : s + batch_size])
        preds.append(np.argmax(logits.data, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def activations(model: VqaModel, images, questions, batch_size: int = 512) -> np.ndarray:
    out = []
    for s in range(0, len(images), batch_size):
        _, v = forward_batch(model, images[s : s + batch_size], questions[s : s + batch_size])
        out.append(v.data)
    return np.concatenate(out) if out else np.zeros((0, model.topology.perturbation_width))


# --- training ---------------------------------------------------------------


class Adam:
    """Adam with per-parameter first and second moments, keyed by parameter name."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for key, g in grads.items():
            m = self.m.get(key)
            if m is None:
                m = self.m[key] = np.zeros_like(g)
                self.v[key] = np.zeros_like(g)
            v = self.v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[key] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def trainable_arrays(model: VqaModel) -> dict[str, np.ndarray]:
    out = {}
    for layer in model.trainable():
        out[layer.name + ":w"] = layer.weight
        out[layer.name + ":b"] = layer.bias
    return out


def layer_grads(tape: GradTape, loss: Tensor, model: VqaModel, params) -> dict[str, np.ndarray]:
    layers = model.trainable()
    flat = [t for l in layers for t in params[l.name]]
    gs = grad(tape, loss, flat)
    out = {}
    for i, layer in enumerate(layers):
        out[layer.name + ":w"] = gs[2 * i]
        out[layer.name + ":b"] = gs[2 * i + 1]
    return out


@dataclass
class TrainingLog:
    loss: list[float] = field(default_factory=list)
    accuracy: list[float] = field(default_factory=list)


def evaluate_loss(model: VqaModel, data: Dataset, batch_size: int = 512) -> tuple[float, float]:
    total, correct = 0.0, 0
    for s in range(0, len(data), batch_size):
        logits, _ = forward_batch(model, data.images[s : s + batch_size], data.questions[s : s + batch_size])
        y = data.answers[s : s + batch_size]
        total += cross_entropy(logits, y).item() * len(y)
        correct += int(np.sum(np.argmax(logits.data, axis=1) == y))
    return total / len(data), correct / len(data)


def pretrain(model: VqaModel, data: Dataset, epochs: int, batch_size: int, lr: float, rng: Rng) -> TrainingLog:
    """Mini-batch Adam on mean cross-entropy; updates ``model`` in place."""
    if len(data) == 0:
        raise TrainingError("cannot pretrain on an empty dataset")
    frozen = [l.name for l in model.layers if l.frozen]
    if frozen:
        raise TrainingError(f"pretraining expects every layer trainable; frozen: {frozen}")
    opt = Adam(lr)
    arrays = trainable_arrays(model)
    log = TrainingLog()
    n = len(data)
    for epoch in range(epochs):
        order = rng.permutation(n)
        for s in range(0, n, batch_size):
            idx = order[s : s + batch_size]
            params = param_tensors(model)
            with GradTape() as tape:
                for w, b in params.values():
                    tape.watch(w, b)
                logits, _ = forward_batch(model, data.images[idx], data.questions[idx], params)
                loss = cross_entropy(logits, data.answers[idx])
            opt.step(arrays, layer_grads(tape, loss, model, params))
        loss_val, acc = evaluate_loss(model, data)
        log.loss.append(loss_val)
        log.accuracy.append(acc)
    return log


def center_representations(model: VqaModel, images, questions) -> np.ndarray:
    """Shift the perturbation layer to zero mean on the given samples.

    The shift is folded into the last encoder biases and compensated in the
    first head bias, so logits are unchanged up to rounding.  This plays the
    part of a frozen mean-normalisation at the encoder outputs.  Returns the
    removed mean.
    """
    mu = activations(model, images, questions).mean(axis=0)
    d = model.topology.repr_dim
    model.text[-1].bias = model.text[-1].bias - mu[:d]
    model.vision[-1].bias = model.vision[-1].bias - mu[d:]
    model.head[0].bias = model.head[0].bias + mu @ model.head[0].weight
    return mu


def round_to_float32(model: VqaModel) -> None:
    """Make in-memory weights match what a checkpoint stores."""
    for layer in model.layers:
        layer.weight = layer.weight.astype(np.float32).astype(np.float64)
        layer.bias = layer.bias.astype(np.float32).astype(np.float64)


# --- persistence ------------------------------------------------------------


def checkpoint_sections(model: VqaModel) -> dict:
    sections: dict = {
        "topology": model.topology.to_json(),
        "vocab": {"tokens": model.embeddings.tokens, "pad_id": model.embeddings.pad_id},
        "layers": [
            {"name": l.name, "group": g, "frozen": l.frozen}
            for g, group in (("vision", model.vision), ("text", model.text), ("head", model.head))
            for l in group
        ],
        "embeddings": model.embeddings.vectors.astype(np.float32),
    }
    for layer in model.layers:
        sections[f"{layer.name}:w"] = layer.weight.astype(np.float32)
        sections[f"{layer.name}:b"] = layer.bias.astype(np.float32)
    return sections


def save(model: VqaModel, path) -> None:
    container.save(path, CHECKPOINT_MAGIC, checkpoint_sections(model))


def encode_checkpoint(model: VqaModel) -> bytes:
    return container.encode(CHECKPOINT_MAGIC, checkpoint_sections(model))


def load(path) -> VqaModel:
    return _from_sections(container.load(path, CHECKPOINT_MAGIC))


def decode_checkpoint(blob: bytes) -> VqaModel:
    return _from_sections(container.decode(CHECKPOINT_MAGIC, blob))


def _from_sections(sec: dict) -> VqaModel:
    top = ModelTopology(**sec["topology"])
    table = EmbeddingTable(list(sec["vocab"]["tokens"]), sec["embeddings"].astype(np.float64),
                           pad_id=sec["vocab"]["pad_id"])
    groups: dict[str, list[Layer]] = {"vision": [], "text": [], "head": []}
    for meta in sec["layers"]:
        name = meta["name"]
        groups[meta["group"]].append(
            Layer(name, sec[f"{name}:w"].astype(np.float64), sec[f"{name}:b"].astype(np.float64),
                  bool(meta["frozen"]))
        )
    return VqaModel(top, table, groups["vision"], groups["text"], groups["head"])


def topology_json(model: VqaModel) -> str:
    return json.dumps(model.topology.to_json(), indent=2, sort_keys=True)
