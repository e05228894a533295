import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from prwn import protonet as pn
from prwn.autodiff import Tensor
from prwn.episodes import Episode
from prwn.errors import ConfigError
from prwn.inference import (filter_distractors, median_keep, predict_episode, return_scores,
                            semi_supervised_predict)
from prwn.prw import build_walk_graph


def identity_net(d):
    return pn.EmbeddingNet([d, d], [np.eye(d), np.zeros((1, d))])


def make_episode(sup, sup_y, unl, qry, qry_y, distract=None):
    unl = np.asarray(unl, float).reshape(-1, np.asarray(sup).shape[1])
    flags = np.zeros(len(unl), bool) if distract is None else np.asarray(distract, bool)
    return Episode(
        class_ids=tuple(range(int(max(sup_y)) + 1)),
        support_x=np.asarray(sup, float), support_y=np.asarray(sup_y),
        unlabeled_x=unl, query_x=np.asarray(qry, float), query_y=np.asarray(qry_y),
        unlabeled_distractor=flags, unlabeled_source=np.zeros((len(unl), 2), np.int64),
        support_source=np.zeros((len(sup_y), 2), np.int64),
        query_source=np.zeros((len(qry_y), 2), np.int64))


def test_median_rule_even_count():
    assert median_keep(np.array([0.9, 0.8, 0.2, 0.1])).tolist() == [0, 1]


def test_median_rule_all_equal_keeps_everything():
    assert median_keep(np.full(7, 0.3)).tolist() == list(range(7))


def test_empty_filter():
    res = filter_distractors(None)
    assert res.scores.size == 0 and res.kept.size == 0


def test_far_point_is_filtered():
    protos = np.array([[0.0, 0.0], [4.0, 0.0]])
    rng = np.random.default_rng(0)
    unl = np.vstack([protos[0] + 0.1 * rng.normal(size=(3, 2)),
                     protos[1] + 0.1 * rng.normal(size=(3, 2)),
                     [[2.0, 50.0]]])
    g = build_walk_graph(Tensor(protos), Tensor(unl), tau=0)
    res = filter_distractors(g)
    assert res.scores[6] < np.median(res.scores)
    assert 6 not in res.kept
    # scores equal the Hadamard-sum computed by hand
    manual = [sum(g.p2x.data[c, j] * g.x2p.data[j, c] for c in range(2)) for j in range(7)]
    np.testing.assert_allclose(res.scores, manual, atol=1e-15)


@given(st.integers(2, 5), st.integers(1, 9), st.integers(0, 10_000))
def test_score_bounds_and_translation_invariance(n_c, m, seed):
    rng = np.random.default_rng(seed)
    protos, unl = rng.normal(size=(n_c, 3)), rng.normal(size=(m, 3))
    g = build_walk_graph(Tensor(protos), Tensor(unl), tau=0)
    s = return_scores(g.p2x.data, g.x2p.data)
    assert np.all(s >= 0) and np.all(s <= 1 + 1e-12)
    assert s.sum() <= n_c + 1e-9
    shift = rng.normal(scale=20, size=(1, 3))
    g2 = build_walk_graph(Tensor(protos + shift), Tensor(unl + shift), tau=0)
    np.testing.assert_allclose(return_scores(g2.p2x.data, g2.x2p.data), s, atol=1e-9)


def separable_episode(distract=False):
    rng = np.random.default_rng(1)
    centers = np.array([[0.0, 0.0], [6.0, 0.0], [0.0, 6.0]])
    sup = centers + 0.2 * rng.normal(size=(3, 2))
    unl = np.repeat(centers, 3, axis=0) + 0.3 * rng.normal(size=(9, 2))
    flags = [False] * 9
    if distract:
        unl = np.vstack([unl, [[30.0, 30.0], [-25.0, 28.0], [31.0, -24.0]]])
        flags += [True] * 3
    qry = np.repeat(centers, 4, axis=0) + 0.5 * rng.normal(size=(12, 2))
    return make_episode(sup, [0, 1, 2], unl, qry, np.repeat([0, 1, 2], 4), flags)


def test_no_unlabeled_equals_plain_classification():
    ep = separable_episode().without_unlabeled()
    net = pn.EmbeddingNet([2, 8, 3], seed=0)
    pred_plain, p_plain = predict_episode(net, ep, "plain")
    for mode in ("ssinfer", "ssinfer-filter"):
        pred, p = predict_episode(net, ep, mode)
        assert np.array_equal(p.data, p_plain.data)
        assert np.array_equal(pred, pred_plain)


def test_filter_does_not_change_separable_predictions():
    ep = separable_episode()
    a, _ = semi_supervised_predict(ep, identity_net(2), use_filter=False)
    b, _ = semi_supervised_predict(ep, identity_net(2), use_filter=True)
    assert np.array_equal(a, b)
    assert np.mean(a == ep.query_y) == 1.0


def test_filter_drops_far_distractors_before_refinement():
    ep = separable_episode(distract=True)
    net = identity_net(2)
    support = pn.embed(net, ep.support_x)
    protos = pn.compute_prototypes(support, ep.support_y, 3)
    g = build_walk_graph(protos, pn.embed(net, ep.unlabeled_x), tau=0)
    dropped = set(filter_distractors(g).discarded.tolist())
    assert {9, 10, 11} <= dropped


def test_five_unlabeled_per_class_accepted():
    rng = np.random.default_rng(3)
    sup = rng.normal(size=(5, 4))
    unl = rng.normal(size=(25, 4))  # N_u = 5 per class
    ep = make_episode(sup, np.arange(5), unl, rng.normal(size=(5, 4)), np.arange(5))
    for mode in ("plain", "ssinfer", "ssinfer-filter"):
        pred, probs = predict_episode(pn.EmbeddingNet([4, 6, 3], seed=1), ep, mode)
        assert pred.shape == (5,)
        np.testing.assert_allclose(probs.data.sum(1), 1.0, atol=1e-6)


def test_unknown_mode():
    with pytest.raises(ConfigError):
        predict_episode(identity_net(2), separable_episode(), "transductive")
