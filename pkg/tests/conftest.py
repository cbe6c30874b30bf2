from __future__ import annotations

import numpy as np
import pytest

from trojanlab import datagen
from trojanlab import model as mdl
from trojanlab.neurons import select_perturbation_neurons
from trojanlab.numcore import Rng

IMAGE_DIMS = (8, 8, 3)


@pytest.fixture(scope="session")
def table():
    return datagen.build_embeddings(datagen.default_vocab(24), 8, Rng(11))


@pytest.fixture(scope="session")
def splits(table):
    return datagen.generate((60, 40, 30), IMAGE_DIMS, table, Rng(3))


@pytest.fixture(scope="session")
def topology(table):
    return mdl.ModelTopology(
        image_dims=IMAGE_DIMS, vision_hidden=[16], embed_dim=8, text_hidden=[8], repr_dim=4,
        head_widths=[8], vocab_size=len(table),
    )


@pytest.fixture(scope="session")
def trained(topology, table, splits):
    """A tiny model pretrained for a few epochs; treat as read-only."""
    m = mdl.init_model(topology, table, Rng(5))
    mdl.pretrain(m, splits[0], epochs=3, batch_size=16, lr=1e-2, rng=Rng(6))
    mdl.round_to_float32(m)
    return m


@pytest.fixture
def model(trained):
    return trained.copy()


@pytest.fixture(scope="session")
def neurons(trained):
    return select_perturbation_neurons(trained)


def assert_close(a, b, tol):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-8)
    assert np.abs(a - b).max(initial=0.0) <= tol * scale, (a, b)


@pytest.fixture(scope="session")
def bench(trained, neurons, splits, table):
    from trojanlab.finetune import AttackBench
    from trojanlab.trojan import AttackConfig, gen_trojan_batch

    cfg = AttackConfig(alpha_i=0.05, E_i=8, alpha_q=0.1, E_q=8)
    pool = gen_trojan_batch(trained, neurons, splits[0].subset(np.arange(12)), table, cfg)
    tests = gen_trojan_batch(trained, neurons, splits[2], table, cfg)
    return AttackBench(trained, splits[1], pool, splits[2], tests)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
