"""Synthetic shape-world VQA data and token embedding tables.

Images are H x W x 3 grids split into four quadrant slots; each scene places
one to four filled shapes (square, circle, triangle) in distinct slots.  Three
question templates mirror the yes/no, number and "other" task families, and
every answer is computed from the scene graph at generation time.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import container
from .numcore import Rng

log = logging.getLogger(__name__)

PAD = "<pad>"
SHAPES = ("square", "circle", "triangle")
COLORS = ("red", "green", "blue")
ANSWERS = ("yes", "no", "one", "two", "three", "red", "green", "blue")
TASKS = ("yes_no", "number", "other")
QUESTION_LEN = 6
TEXT_CLIP = (-4.145, 4.190)

TEMPLATE_TOKENS = (PAD, "is", "there", "a", "how", "many", "what", "color", "the") + SHAPES

# Unused by the templates; gives the text Trojan decoder a wider vocabulary.
FILLER_TOKENS = (
    "of", "and", "to", "in", "it", "on", "for", "with", "as", "at", "by", "from",
    "this", "that", "or", "an", "be", "are", "was", "were", "can", "will", "do",
    "not", "all", "some", "any", "big", "small", "left", "right", "top", "bottom",
    "near", "far", "dog", "cat", "car", "tree", "house", "sky", "water", "ball",
    "table", "chair", "book", "light", "dark", "round", "sharp", "open", "close",
)

_RGB = {"red": (1.0, 0.1, 0.1), "green": (0.1, 0.9, 0.1), "blue": (0.15, 0.2, 1.0)}

DATASET_MAGIC = b"TJLBDATA"


class VocabularyError(ValueError):
    pass


class GloveFormatError(ValueError):
    pass


def default_vocab(size: int = 64) -> list[str]:
    base = list(TEMPLATE_TOKENS)
    if size < len(base):
        return base[:size]
    return base + list(FILLER_TOKENS[: size - len(base)])


@dataclass
class EmbeddingTable:
    tokens: list[str]
    vectors: np.ndarray
    pad_id: int | None = None
    _index: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.tokens):
            raise ValueError(
                f"{len(self.tokens)} tokens but vectors have shape {self.vectors.shape}"
            )
        self._index = {tok: i for i, tok in enumerate(self.tokens)}
        if self.pad_id is None and PAD in self._index:
            self.pad_id = self._index[PAD]

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def id(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise VocabularyError(f"token {token!r} not in vocabulary") from None

    def encode(self, words: list[str], length: int = QUESTION_LEN) -> np.ndarray:
        if self.pad_id is None:
            raise VocabularyError("vocabulary has no pad token")
        if len(words) > length:
            raise VocabularyError(f"question of {len(words)} tokens exceeds length {length}")
        ids = [self.id(w) for w in words] + [self.pad_id] * (length - len(words))
        return np.asarray(ids, dtype=np.int64)

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids if i != self.pad_id]

    def candidate_ids(self) -> np.ndarray:
        """Token ids a decoded Trojan may take: everything except the pad token."""
        ids = np.arange(len(self.tokens))
        return ids if self.pad_id is None else ids[ids != self.pad_id]


def interior_bounds(bounds, dtype=np.float64) -> tuple[float, float]:
    """Closest ``dtype`` values strictly inside the open interval ``bounds``."""
    lo = np.asarray(bounds[0], dtype=dtype)
    hi = np.asarray(bounds[1], dtype=dtype)
    while float(lo) <= bounds[0]:
        lo = np.nextafter(lo, np.asarray(np.inf, dtype=dtype))
    while float(hi) >= bounds[1]:
        hi = np.nextafter(hi, np.asarray(-np.inf, dtype=dtype))
    return float(lo), float(hi)


def clip_open(x, bounds, dtype=np.float64) -> np.ndarray:
    """Clip into the open interval ``bounds``; values at or past a bound land just inside it."""
    lo, hi = interior_bounds(bounds, dtype)
    return np.clip(x, lo, hi)


def build_embeddings(vocab: list[str], d_emb: int, rng: Rng) -> EmbeddingTable:
    vecs = rng.normal((len(vocab), d_emb))
    vecs = clip_open(vecs, TEXT_CLIP, np.float32).astype(np.float32).astype(np.float64)
    return EmbeddingTable(list(vocab), vecs)


def load_glove_subset(path) -> EmbeddingTable:
    """Parse a GloVe-format text file (token followed by whitespace-separated floats)."""
    tokens: list[str] = []
    rows: list[np.ndarray] = []
    seen: set[str] = set()
    dim = None
    duplicates = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) < 2:
                raise GloveFormatError(f"line {lineno}: expected a token followed by floats")
            try:
                vec = np.array([float(v) for v in parts[1:]], dtype=np.float64)
            except ValueError as exc:
                raise GloveFormatError(f"line {lineno}: {exc}") from None
            if dim is None:
                dim = vec.size
            elif vec.size != dim:
                raise GloveFormatError(f"line {lineno}: {vec.size} values, expected {dim}")
            if not np.all(np.isfinite(vec)):
                raise GloveFormatError(f"line {lineno}: non-finite value")
            if parts[0] in seen:
                duplicates += 1
                continue
            seen.add(parts[0])
            tokens.append(parts[0])
            rows.append(vec)
    if not rows:
        raise GloveFormatError(f"{path}: no embeddings found")
    vectors = np.vstack(rows)
    out_of_range = int(np.sum((vectors <= TEXT_CLIP[0]) | (vectors >= TEXT_CLIP[1])))
    if out_of_range:
        log.warning("clipped %d embedding values outside %s", out_of_range, TEXT_CLIP)
        vectors = clip_open(vectors, TEXT_CLIP)
    if duplicates:
        log.warning("ignored %d duplicate tokens (first occurrence kept)", duplicates)
    return EmbeddingTable(tokens, vectors)


def save_glove_subset(table: EmbeddingTable, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tok, vec in zip(table.tokens, table.vectors):
            fh.write(tok + " " + " ".join(repr(float(v)) for v in vec) + "\n")


def with_pad(table: EmbeddingTable) -> EmbeddingTable:
    """Append a zero pad row if the table has no pad token (e.g. a GloVe subset)."""
    if table.pad_id is not None:
        return table
    vecs = np.vstack([table.vectors, np.zeros((1, table.dim))])
    return EmbeddingTable(table.tokens + [PAD], vecs)


# --- scenes -----------------------------------------------------------------


@dataclass(frozen=True)
class SceneObject:
    slot: int
    shape: str
    color: str


@dataclass
class ShapeWorldSample:
    image: np.ndarray
    question: np.ndarray
    answer: int
    task: str
    scene: tuple[SceneObject, ...]
    image_seed: int


@dataclass
class Dataset:
    images: np.ndarray  # (n, H, W, 3)
    questions: np.ndarray  # (n, QUESTION_LEN) int
    answers: np.ndarray  # (n,) int
    tasks: np.ndarray  # (n,) int index into TASKS
    scenes: list[tuple[SceneObject, ...]]
    image_seeds: np.ndarray

    def __len__(self) -> int:
        return int(self.answers.shape[0])

    def __getitem__(self, i: int) -> ShapeWorldSample:
        return ShapeWorldSample(
            self.images[i], self.questions[i], int(self.answers[i]),
            TASKS[int(self.tasks[i])], self.scenes[i], int(self.image_seeds[i]),
        )

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            self.images[idx], self.questions[idx], self.answers[idx], self.tasks[idx],
            [self.scenes[i] for i in idx], self.image_seeds[idx],
        )


def _shape_mask(shape: str, size: int, rng: Rng) -> np.ndarray:
    r = np.arange(size)[:, None]
    c = np.arange(size)[None, :]
    half = (size - 1) / 2.0
    if shape == "square":
        m = (r >= 1) & (r <= size - 2) & (c >= 1) & (c <= size - 2)
    elif shape == "circle":
        m = (r - half) ** 2 + (c - half) ** 2 <= (half - 0.3) ** 2
    elif shape == "triangle":
        # apex up: row r spans columns within (r / size) of the centre
        width = (r + 0.5) / size * half + 0.25
        m = (np.abs(c - half) <= width) & (r >= 1)
    else:
        raise ValueError(shape)
    return m


def render(scene, image_dims, rng: Rng) -> np.ndarray:
    h, w, ch = image_dims
    if ch != 3:
        raise ValueError("shape-world images are RGB")
    img = rng.uniform((h, w, ch), 0.0, 0.08)
    sh, sw = h // 2, w // 2
    for obj in scene:
        r0 = (obj.slot // 2) * sh
        c0 = (obj.slot % 2) * sw
        size = min(sh, sw)
        mask = _shape_mask(obj.shape, size, rng)
        intensity = 0.8 + 0.2 * rng.uniform()
        rgb = np.asarray(_RGB[obj.color]) * intensity
        patch = img[r0 : r0 + size, c0 : c0 + size]
        patch[mask] = rgb
    # float32-representable so container round-trips are exact
    return np.clip(img, 0.0, 1.0).astype(np.float32).astype(np.float64)


def _random_scene(rng: Rng) -> tuple[SceneObject, ...]:
    n = 1 + rng.integers(4)
    slots = sorted(int(s) for s in rng.choice(4, n))
    return tuple(
        SceneObject(s, SHAPES[rng.integers(len(SHAPES))], COLORS[rng.integers(len(COLORS))])
        for s in slots
    )


def _make_question(scene, task: str, rng: Rng):
    """Return (words, answer) or None if the scene cannot support this task."""
    counts = {s: sum(o.shape == s for o in scene) for s in SHAPES}
    if task == "yes_no":
        want_yes = rng.uniform() < 0.5
        pool = [s for s in SHAPES if (counts[s] > 0) == want_yes]
        if not pool:
            return None
        shape = pool[rng.integers(len(pool))]
        return ["is", "there", "a", shape], "yes" if want_yes else "no"
    if task == "number":
        pool = [s for s in SHAPES if 1 <= counts[s] <= 3]
        if not pool:
            return None
        shape = pool[rng.integers(len(pool))]
        return ["how", "many", shape], ANSWERS[1 + counts[shape]]
    if task == "other":
        pool = [s for s in SHAPES if counts[s] == 1]
        if not pool:
            return None
        shape = pool[rng.integers(len(pool))]
        color = next(o.color for o in scene if o.shape == shape)
        return ["what", "color", "is", "the", shape], color
    raise ValueError(task)


def _sample(image_seed: int, image_dims, table: EmbeddingTable):
    rng = Rng(image_seed)
    task = TASKS[rng.integers(len(TASKS))]
    while True:
        scene = _random_scene(rng)
        q = _make_question(scene, task, rng)
        if q is not None:
            break
    words, answer = q
    image = render(scene, image_dims, rng)
    return image, table.encode(words), ANSWERS.index(answer), TASKS.index(task), scene


def split_holdout(n_holdout: int) -> tuple[int, int]:
    """Finetune/test sizes for a combined held-out pool at a 4:1 ratio."""
    n_test = n_holdout // 5
    return n_holdout - n_test, n_test


def _check_vocab(table: EmbeddingTable) -> None:
    missing = [t for t in TEMPLATE_TOKENS if t not in table._index]
    if missing:
        raise VocabularyError(f"vocabulary cannot phrase the question templates; missing {missing}")


def generate(split_sizes, image_dims, table: EmbeddingTable, rng: Rng):
    """Deterministic (train, finetune, test) datasets.

    ``split_sizes`` is (n_train, n_finetune, n_test), or (n_train, n_holdout) to
    split the held-out pool 4:1 into finetune and test.
    """
    _check_vocab(table)
    sizes = tuple(int(s) for s in split_sizes)
    if len(sizes) == 2:
        sizes = (sizes[0],) + split_holdout(sizes[1])
    if len(sizes) != 3 or min(sizes) < 1:
        raise ValueError(f"split sizes must be three positive counts, got {split_sizes}")
    base = rng.child("datagen")
    total = sum(sizes)
    # one seed per sample, drawn in global order so splits never share image seeds
    seeds = []
    used: set[int] = set()
    while len(seeds) < total:
        s = int(base.raw(1)[0] >> np.uint64(1))
        if s not in used:
            used.add(s)
            seeds.append(s)
    out = []
    start = 0
    for n in sizes:
        rows = [_sample(s, image_dims, table) for s in seeds[start : start + n]]
        out.append(
            Dataset(
                images=np.stack([r[0] for r in rows]),
                questions=np.stack([r[1] for r in rows]),
                answers=np.asarray([r[2] for r in rows], dtype=np.int64),
                tasks=np.asarray([r[3] for r in rows], dtype=np.int64),
                scenes=[r[4] for r in rows],
                image_seeds=np.asarray(seeds[start : start + n], dtype=np.uint64),
            )
        )
        start += n
    return tuple(out)


# --- serialization ----------------------------------------------------------


def _scene_json(scenes):
    return [[[o.slot, o.shape, o.color] for o in sc] for sc in scenes]


def save_datasets(path, splits: dict, table: EmbeddingTable) -> dict:
    """Write named splits plus the embedding table to one container; returns the manifest."""
    sections: dict = {}
    manifest = {
        "counts": {name: len(ds) for name, ds in splits.items()},
        "vocab": table.tokens,
        "pad_id": table.pad_id,
        "classes": list(ANSWERS),
        "tasks": list(TASKS),
        "image_dims": list(next(iter(splits.values())).images.shape[1:]),
    }
    sections["manifest"] = manifest
    sections["embeddings"] = table.vectors.astype(np.float32)
    for name, ds in splits.items():
        sections[f"{name}/images"] = ds.images.astype(np.float32)
        sections[f"{name}/questions"] = ds.questions.astype(np.int32)
        sections[f"{name}/answers"] = ds.answers.astype(np.int32)
        sections[f"{name}/tasks"] = ds.tasks.astype(np.int32)
        sections[f"{name}/scenes"] = _scene_json(ds.scenes)
        sections[f"{name}/image_seeds"] = [str(int(s)) for s in ds.image_seeds]
    container.save(path, DATASET_MAGIC, sections)
    return manifest


def load_datasets(path):
    sec = container.load(path, DATASET_MAGIC)
    manifest = sec["manifest"]
    table = EmbeddingTable(list(manifest["vocab"]), sec["embeddings"].astype(np.float64),
                           pad_id=manifest["pad_id"])
    splits = {}
    for name in manifest["counts"]:
        splits[name] = Dataset(
            images=sec[f"{name}/images"].astype(np.float64),
            questions=sec[f"{name}/questions"].astype(np.int64),
            answers=sec[f"{name}/answers"].astype(np.int64),
            tasks=sec[f"{name}/tasks"].astype(np.int64),
            scenes=[tuple(SceneObject(*o) for o in sc) for sc in sec[f"{name}/scenes"]],
            image_seeds=np.asarray([int(s) for s in sec[f"{name}/image_seeds"]], dtype=np.uint64),
        )
    return splits, table, manifest


def write_manifest(path, manifest: dict) -> None:
    import json

    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
