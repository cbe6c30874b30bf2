import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trojanlab import datagen
from trojanlab.datagen import ANSWERS, TASKS, TEXT_CLIP, EmbeddingTable, GloveFormatError, VocabularyError
from trojanlab.numcore import Rng

from conftest import IMAGE_DIMS


def answer_from_scene(words, scene):
    """Independent reading of a question against its scene graph."""
    shape = words[-1]
    n = sum(o[1] == shape for o in scene)
    if words[:3] == ["is", "there", "a"]:
        return "yes" if n else "no"
    if words[:2] == ["how", "many"]:
        return {1: "one", 2: "two", 3: "three"}[n]
    if words[:2] == ["what", "color"]:
        (color,) = [o[2] for o in scene if o[1] == shape]
        return color
    raise AssertionError(words)


def test_answers_follow_scene_graph(table, splits):
    for ds in splits:
        for i in range(len(ds)):
            s = ds[i]
            scene = [(o.slot, o.shape, o.color) for o in s.scene]
            assert ANSWERS[s.answer] == answer_from_scene(table.decode(s.question), scene)


def test_scene_objects_use_distinct_slots(splits):
    for sc in splits[0].scenes:
        slots = [o.slot for o in sc]
        assert 1 <= len(slots) <= 4 and len(set(slots)) == len(slots)


def test_images_in_unit_range_and_float32_exact(splits):
    imgs = splits[0].images
    assert imgs.shape[1:] == IMAGE_DIMS
    assert imgs.min() >= 0.0 and imgs.max() <= 1.0
    np.testing.assert_array_equal(imgs, imgs.astype(np.float32).astype(np.float64))


def test_occupied_slots_are_brighter(splits):
    ds = splits[0]
    for i in range(10):
        occupied = {o.slot for o in ds.scenes[i]}
        for slot in range(4):
            r0, c0 = (slot // 2) * 4, (slot % 2) * 4
            bright = ds.images[i, r0:r0 + 4, c0:c0 + 4].max()
            assert (bright > 0.5) == (slot in occupied)


def test_task_and_answer_balance(table):
    (big,) = datagen.generate((1, 600, 1), IMAGE_DIMS, table, Rng(8))[1:2]
    shares = np.bincount(big.tasks, minlength=3) / len(big)
    assert np.all(np.abs(shares - 1 / 3) < 0.06)
    yes_no = big.answers[big.tasks == TASKS.index("yes_no")]
    assert 0.35 < np.mean(yes_no == ANSWERS.index("yes")) < 0.65
    assert set(np.unique(big.answers)) == set(range(len(ANSWERS)))


def test_splits_share_no_image_seed(splits):
    seeds = [set(ds.image_seeds.tolist()) for ds in splits]
    assert not seeds[0] & seeds[1] and not seeds[0] & seeds[2] and not seeds[1] & seeds[2]


def test_holdout_split_four_to_one(table):
    train, fine, test = datagen.generate((5, 50), IMAGE_DIMS, table, Rng(1))
    assert (len(train), len(fine), len(test)) == (5, 40, 10)
    assert datagen.split_holdout(2000) == (1600, 400)


def test_generation_is_deterministic(table, splits):
    again = datagen.generate((60, 40, 30), IMAGE_DIMS, table, Rng(3))
    for a, b in zip(splits, again):
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.questions, b.questions)


def test_sample_regenerates_from_its_seed(table, splits):
    ds = splits[2]
    img, q, ans, task, scene = datagen._sample(int(ds.image_seeds[4]), IMAGE_DIMS, table)
    np.testing.assert_array_equal(img, ds.images[4])
    assert ans == ds.answers[4] and scene == ds.scenes[4]


def test_bad_split_sizes(table):
    with pytest.raises(ValueError):
        datagen.generate((10, 0, 5), IMAGE_DIMS, table, Rng(0))


def test_vocab_must_cover_templates():
    small = datagen.build_embeddings(datagen.default_vocab(8), 4, Rng(0))
    with pytest.raises(VocabularyError):
        datagen.generate((2, 2, 2), IMAGE_DIMS, small, Rng(0))


def test_embeddings_strictly_inside_open_interval():
    t = datagen.build_embeddings(datagen.default_vocab(64), 300, Rng(0))
    assert np.all(t.vectors > TEXT_CLIP[0]) and np.all(t.vectors < TEXT_CLIP[1])
    np.testing.assert_array_equal(t.vectors, t.vectors.astype(np.float32))


@settings(max_examples=50, deadline=None)
@given(st.floats(-100, 100, allow_nan=False))
def test_clip_open_stays_inside(v):
    for dtype in (np.float64, np.float32):
        out = datagen.clip_open(np.array([v]), TEXT_CLIP, dtype)
        # still inside after rounding to the storage dtype
        stored = float(out.astype(dtype)[0])
        assert TEXT_CLIP[0] < float(out[0]) < TEXT_CLIP[1]
        assert TEXT_CLIP[0] < stored < TEXT_CLIP[1]


def test_encode_decode_and_pad(table):
    q = table.encode(["how", "many", "circle"])
    assert len(q) == datagen.QUESTION_LEN
    assert table.decode(q) == ["how", "many", "circle"]
    assert table.pad_id not in table.candidate_ids()
    with pytest.raises(VocabularyError):
        table.encode(["zebra"])
    with pytest.raises(VocabularyError):
        table.encode(["is"] * 7)


def test_glove_round_trip(tmp_path):
    t = EmbeddingTable(["a", "b", "c"], np.array([[0.5, -1.0], [2.0, 3.0], [0.0, 0.25]]))
    p = tmp_path / "g.txt"
    datagen.save_glove_subset(t, p)
    back = datagen.load_glove_subset(p)
    assert back.tokens == t.tokens
    np.testing.assert_array_equal(back.vectors, t.vectors)
    padded = datagen.with_pad(back)
    assert padded.tokens[-1] == datagen.PAD and padded.pad_id == 3
    np.testing.assert_array_equal(padded.vectors[-1], 0.0)


def test_glove_clips_and_dedups(tmp_path, caplog):
    p = tmp_path / "g.txt"
    p.write_text("a 9.0 -9.0\nb 1 2\na 0 0\n\n")
    t = datagen.load_glove_subset(p)
    assert t.tokens == ["a", "b"]
    assert TEXT_CLIP[0] < t.vectors.min() and t.vectors.max() < TEXT_CLIP[1]
    assert "duplicate" in caplog.text


@pytest.mark.parametrize("text", ["a 1 2\nb 1\n", "a x y\n", "lonely\n", "", "a nan 1\n"])
def test_glove_format_errors(tmp_path, text):
    p = tmp_path / "g.txt"
    p.write_text(text)
    with pytest.raises(GloveFormatError):
        datagen.load_glove_subset(p)


def test_dataset_container_round_trip(tmp_path, table, splits):
    p = tmp_path / "d.tjd"
    names = {"train": splits[0], "finetune": splits[1], "test": splits[2]}
    manifest = datagen.save_datasets(p, names, table)
    assert manifest["counts"] == {"train": 60, "finetune": 40, "test": 30}
    back, t2, _ = datagen.load_datasets(p)
    np.testing.assert_array_equal(t2.vectors, table.vectors)
    for k, ds in names.items():
        np.testing.assert_array_equal(back[k].images, ds.images)
        np.testing.assert_array_equal(back[k].image_seeds, ds.image_seeds)
        assert back[k].scenes == ds.scenes
