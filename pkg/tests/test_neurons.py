import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trojanlab import neurons as nsel
from trojanlab.model import Layer

from oracles import brute_force_select


def with_head_weight(model, w):
    m = model.copy()
    m.head[0] = Layer("head.0", w, np.zeros(w.shape[1]))
    return m


@pytest.mark.parametrize("seed", range(50))
def test_selection_matches_brute_force(model, seed):
    r = np.random.default_rng(seed)
    w = r.normal(size=(model.topology.perturbation_width, 8))
    sel = nsel.select_perturbation_neurons(with_head_weight(model, w))
    assert (sel.u_text, sel.u_vision) == brute_force_select(w)


def test_ties_go_to_lowest_index():
    sigma = np.array([1.0, 3.0, 3.0, 0.0, 2.0, 2.0, 2.0, -1.0])
    sel = nsel.select_from_strength(sigma)
    assert (sel.u_text, sel.u_vision) == (1, 4)


def test_absolute_variant(model):
    w = np.zeros((8, 2))
    w[0] = [-5.0, -5.0]
    w[1] = [1.0, 1.0]
    m = with_head_weight(model, w)
    assert nsel.select_perturbation_neurons(m).u_text == 1
    assert nsel.select_perturbation_neurons(m, absolute=True).u_text == 0


def test_selection_errors(model):
    with pytest.raises(ValueError):
        nsel.select_from_strength(np.zeros(3))
    m = model.copy()
    m.head = []
    with pytest.raises(ValueError):
        nsel.connection_strength(m)


def test_json_round_trip():
    sel = nsel.select_from_strength(np.arange(6.0))
    back = nsel.PerturbationNeurons.from_json(sel.to_json())
    assert (back.u_text, back.u_vision) == (2, 5)
    np.testing.assert_array_equal(back.sigma_all, sel.sigma_all)


def test_profile_grid_and_csv(tmp_path, trained, splits):
    prof = nsel.profile_activations(trained, splits[0].images, splits[0].questions)
    assert prof.mean_activation.shape == (8,)
    assert prof.grid().shape == (3, 3)
    assert prof.grid().ravel()[8] == 0.0
    p = tmp_path / "p.csv"
    nsel.write_profile_csv(prof, p)
    rows = list(csv.DictReader(p.open()))
    assert [int(r["neuron_index"]) for r in rows] == list(range(8))
    with pytest.raises(ValueError):
        nsel.profile_from_activations(np.zeros((0, 8)))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(-5, 5), min_size=2, max_size=20).filter(lambda v: len(v) % 2 == 0))
def test_selected_neuron_has_maximal_strength(values):
    sigma = np.asarray(values, dtype=np.float64)
    d = sigma.size // 2
    sel = nsel.select_from_strength(sigma)
    assert sigma[sel.u_text] == sigma[:d].max()
    assert sigma[sel.u_vision] == sigma[d:].max()
    assert 0 <= sel.u_text < d <= sel.u_vision < 2 * d
