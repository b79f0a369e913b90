import math
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from docfsl.dataset import DatasetIndex, DocumentSample, Label
from docfsl.errors import InsufficientSamplesError
from docfsl.fsl import (
    EpisodeResult,
    Mode,
    PrototypePair,
    class_distances,
    classify_queries,
    compute_prototypes,
    distance_loss,
    episode_loss,
    sample_episode,
)

from conftest import fake_index

G, F = Label.GENUINE, Label.FAKE


def check_episode(ep, k, q, side):
    ids_s = {s.id for s in ep.support}
    ids_q = {s.id for s in ep.query}
    assert len(ids_s) == 2 * k and len(ids_q) == 2 * q and not ids_s & ids_q
    assert ep.support_labels.count(G) == k and ep.support_labels.count(F) == k
    assert ep.query_labels.count(G) == q and ep.query_labels.count(F) == q
    assert {s.meta_class for s in ep.support + ep.query} <= set(side)


def test_conditional_episode_one_meta_class():
    index = fake_index(10)
    rng = np.random.default_rng(0)
    ep = sample_episode(index, ["C00", "C03"], "c-fsl", 5, 5, rng)
    check_episode(ep, 5, 5, ["C00", "C03"])
    assert len(ep.support) + len(ep.query) == 20
    assert {s.meta_class for s in ep.support + ep.query} == {ep.meta_class}


def test_unconditional_episode_mixes():
    index = fake_index(10)
    ep = sample_episode(index, index.meta_classes, Mode.UNCONDITIONAL, 10, 10, np.random.default_rng(1))
    check_episode(ep, 10, 10, index.meta_classes)
    assert ep.meta_class is None
    assert len({s.meta_class for s in ep.support + ep.query}) > 1


def test_insufficient_fakes_named():
    samples = [DocumentSample(f"g{i}", Path("x"), G, "ESP", "d") for i in range(12)]
    samples += [DocumentSample(f"f{i}", Path("x"), F, "ESP", "d") for i in range(4)]
    index = DatasetIndex(tuple(samples))
    with pytest.raises(InsufficientSamplesError, match="ESP.*4 fake"):
        sample_episode(index, ["ESP"], "conditional", 5, 1, np.random.default_rng(0))
    with pytest.raises(InsufficientSamplesError, match="4 fake"):
        sample_episode(index, ["ESP"], "unconditional", 5, 1, np.random.default_rng(0))


def test_episode_rng_determinism_and_block_shuffle():
    index = fake_index(4)
    a = [sample_episode(index, index.meta_classes, "c", 3, 2, np.random.default_rng(9)) for _ in range(2)]
    assert a[0] == a[1] and a[0].to_dict() == a[1].to_dict()
    rng = np.random.default_rng(3)
    firsts = {sample_episode(index, index.meta_classes, "u", 2, 2, rng).support[0].label for _ in range(40)}
    assert firsts == {G, F}


def test_single_meta_class_modes_coincide():
    index = fake_index(1, per_label=15)
    for seed in range(20):
        c = sample_episode(index, index.meta_classes, "conditional", 5, 5, np.random.default_rng(seed))
        u = sample_episode(index, index.meta_classes, "unconditional", 5, 5, np.random.default_rng(seed))
        assert [s.id for s in c.support] == [s.id for s in u.support]
        assert [s.id for s in c.query] == [s.id for s in u.query]


def test_invalid_k_q_and_mode():
    index = fake_index(2)
    with pytest.raises(ValueError):
        sample_episode(index, index.meta_classes, "u", 0, 1, np.random.default_rng(0))
    with pytest.raises(ValueError):
        Mode.parse("semi")


def test_prototypes_examples():
    pair = compute_prototypes([((1, 1), F), ((3, 3), F), ((0, 5), G)])
    assert np.array_equal(pair.fake_prototype, [2, 2])
    assert np.array_equal(pair.genuine_prototype, [0, 5])
    with pytest.raises(ValueError, match="fake"):
        compute_prototypes([((1, 1), G)])


def test_prototypes_permutation_invariant():
    rng = np.random.default_rng(0)
    items = [(rng.standard_normal(3), lab) for lab in (G, F) for _ in range(5)]
    a = compute_prototypes(items)
    order = rng.permutation(len(items))
    b = compute_prototypes([items[i] for i in order])
    np.testing.assert_allclose(a.genuine_prototype, b.genuine_prototype, atol=1e-15)
    np.testing.assert_allclose(a.fake_prototype, b.fake_prototype, atol=1e-15)


def pair(g, f):
    return compute_prototypes([(g, G), (f, F)])


def test_classify_worked_example():
    res = classify_queries(pair((0, 0), (4, 0)), [(1, 0)])
    assert np.array_equal(res.distances, [[1, 9]])
    assert res.probabilities[0, 0] == pytest.approx(1 / (1 + math.exp(-8)), abs=1e-12)
    assert res.probabilities[0, 0] == pytest.approx(0.99966, abs=1e-5)
    assert res.predictions == (G,)


def test_classify_tie_and_self():
    res = classify_queries(pair((0, 0), (4, 0)), [(2, 0), (2, 7), (4, 0)])
    np.testing.assert_allclose(res.probabilities[:2], 0.5, atol=1e-15)
    assert res.predictions == (G, G, F)


def test_conditional_lookup():
    per = {"A": pair((0, 0), (1, 0)), "B": pair((10, 0), (11, 0))}
    res = classify_queries(None, [(0.9, 0), (10.1, 0)], "conditional", per, ["A", "B"])
    assert res.predictions == (F, G)
    with pytest.raises(KeyError, match="'C'"):
        classify_queries(None, [(0, 0)], "conditional", per, ["C"])


def test_nearest_support_head():
    pr = compute_prototypes([((0, 0), G), ((10, 0), G), ((4, 0), F)])
    # mean rule: genuine prototype (5,0) at 16, fake (4,0) at 9 -> fake
    # nearest-support: genuine point (0,0) at 1, fake at 9 -> genuine
    q = [(1, 0)]
    assert classify_queries(pr, q).distances.tolist() == [[16, 9]]
    res = classify_queries(pr, q, head="nearest_support")
    assert res.distances.tolist() == [[1, 9]] and res.predictions == (G,)


@pytest.mark.parametrize("probs, expected", [
    ([[0.5, 0.5], [0.5, 0.5]], math.log(2)),
    ([[0.9, 0.1], [0.2, 0.8]], -(math.log(0.9) + math.log(0.8)) / 2),
    ([[1.0, 0.0], [0.0, 1.0]], 0.0),
])
def test_loss_examples(probs, expected):
    res = EpisodeResult(np.zeros((2, 2)), np.array(probs), (G, F))
    assert episode_loss(res, [G, F]) == pytest.approx(expected, abs=1e-11)


def test_loss_values_by_hand():
    assert -(math.log(0.9) + math.log(0.8)) / 2 == pytest.approx(0.1643, abs=5e-5)
    res = EpisodeResult(np.zeros((1, 2)), np.array([[0.0, 1.0]]), (F,))
    assert math.isfinite(episode_loss(res, [G]))
    with pytest.raises(ValueError):
        episode_loss(res, [G, F])


def test_torch_loss_matches_numpy_loss():
    rng = np.random.default_rng(0)
    d = rng.uniform(0, 5, (6, 2))
    y = np.array([0, 1, 1, 0, 1, 0])
    t = distance_loss(torch.as_tensor(d), torch.as_tensor(y)).item()
    p = np.exp(-d) / np.exp(-d).sum(axis=1, keepdims=True)
    assert t == pytest.approx(-np.log(p[np.arange(6), y]).mean(), abs=1e-12)


vectors = st.lists(st.tuples(st.floats(-50, 50), st.floats(-50, 50)), min_size=1, max_size=6)


@settings(max_examples=200, deadline=None)
@given(vectors, vectors, vectors, st.floats(-100, 100))
def test_probability_properties(gs, fs, qs, shift):
    pr = compute_prototypes([(v, G) for v in gs] + [(v, F) for v in fs])
    res = classify_queries(pr, qs)
    np.testing.assert_allclose(res.probabilities.sum(axis=1), 1.0, atol=1e-9)
    shifted = torch.softmax(-(torch.as_tensor(res.distances) + shift), dim=1).numpy()
    np.testing.assert_allclose(shifted, res.probabilities, atol=1e-9)
    for d, p, pred in zip(res.distances, res.probabilities, res.predictions):
        if d[0] != d[1]:
            assert pred.index == int(np.argmin(d))
            if p[0] != p[1]:
                assert pred.index == int(np.argmax(p))


def test_class_distances_rejects_unknown_head():
    with pytest.raises(ValueError):
        class_distances(torch.zeros(1, 2), torch.zeros(2, 2), torch.tensor([0, 1]), head="cosine")
