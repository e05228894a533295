import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from prwn import protonet as pn
from prwn.autodiff import Tensor
from prwn.errors import ConfigError, ContractError, DataError, DimensionError


def test_zero_net_embeds_to_zero():
    net = pn.EmbeddingNet([3, 4, 2], [np.zeros(s) for s in pn.EmbeddingNet([3, 4, 2]).param_shapes()])
    out = pn.embed(net, np.random.default_rng(0).normal(size=(5, 3)))
    assert np.all(out.data == 0)


def test_identity_linear_layer():
    net = pn.EmbeddingNet([3, 3], [np.eye(3), np.zeros((1, 3))])
    x = np.random.default_rng(1).normal(size=(4, 3))
    assert np.array_equal(pn.embed(net, x).data, x)


def test_embed_matches_numpy_reimplementation():
    net = pn.EmbeddingNet([5, 7, 6, 3], seed=4, dtype=np.float64)
    net.params[1] += 0.3  # nonzero biases
    x = np.random.default_rng(2).normal(size=(9, 5))
    h = x
    for k in range(3):
        h = h @ net.params[2 * k] + net.params[2 * k + 1]
        if k < 2:
            h = np.maximum(h, 0)
    np.testing.assert_allclose(pn.embed(net, x).data, h, atol=1e-10, rtol=0)


def test_embed_shape_error():
    with pytest.raises(DimensionError):
        pn.embed(pn.EmbeddingNet([3, 2]), np.zeros((2, 4)))


def test_net_validation():
    with pytest.raises(ConfigError):
        pn.EmbeddingNet([3, 1])
    with pytest.raises(DimensionError):
        pn.EmbeddingNet([3, 2], [np.zeros((3, 2))])


def test_glorot_bounds():
    net = pn.EmbeddingNet([10, 30], seed=0)
    bound = math.sqrt(6 / 40)
    assert np.abs(net.params[0]).max() <= bound
    assert net.n_params == 10 * 30 + 30


def test_prototypes_one_shot_and_midpoint():
    pts = np.array([[1.0, 2.0], [3.0, -1.0]])
    assert np.array_equal(pn.compute_prototypes(Tensor(pts), [0, 1]).data, pts)
    out = pn.compute_prototypes(Tensor(np.array([[0.0, 0.0], [2.0, 2.0]])), [0, 0])
    assert out.data.tolist() == [[1.0, 1.0]]


def test_prototypes_match_loop_mean():
    rng = np.random.default_rng(5)
    emb = rng.normal(size=(15, 4))
    labels = np.repeat(np.arange(3), 5)
    out = pn.compute_prototypes(Tensor(emb), labels, 3).data
    for c in range(3):
        acc = np.zeros(4)
        for i in range(15):
            if labels[i] == c:
                acc += emb[i]
        np.testing.assert_allclose(out[c], acc / 5, atol=1e-12, rtol=0)


def test_prototypes_missing_class():
    with pytest.raises(ContractError):
        pn.compute_prototypes(Tensor(np.zeros((2, 2))), [0, 0], n_classes=2)


@given(st.integers(0, 10_000))
def test_prototypes_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    emb = rng.normal(size=(12, 3))
    labels = rng.permutation(np.repeat(np.arange(4), 3))
    perm = rng.permutation(12)
    a = pn.compute_prototypes(Tensor(emb), labels, 4).data
    b = pn.compute_prototypes(Tensor(emb[perm]), labels[perm], 4).data
    np.testing.assert_allclose(a, b, atol=1e-12, rtol=0)


def test_classify_symmetric_cases():
    protos = Tensor(np.array([[-1.0, 0.0], [1.0, 0.0]]))
    assert pn.classify(Tensor(np.array([[0.0, 5.0]])), protos).data.tolist() == [[0.5, 0.5]]
    ang = 2 * np.pi * np.arange(3) / 3
    three = Tensor(np.column_stack([np.cos(ang), np.sin(ang)]))
    np.testing.assert_allclose(pn.classify(Tensor(np.zeros((1, 2))), three).data,
                               [[1 / 3] * 3], atol=1e-12)


def test_classify_log3_distance():
    # squared distances 0 and ln 3
    protos = Tensor(np.array([[0.0], [math.sqrt(math.log(3))]]))
    np.testing.assert_allclose(pn.classify(Tensor(np.zeros((1, 1))), protos).data,
                               [[0.75, 0.25]], atol=1e-12)


@given(st.integers(0, 10_000))
def test_classify_rows_and_translation(seed):
    rng = np.random.default_rng(seed)
    emb, protos = rng.normal(size=(6, 3)), rng.normal(size=(4, 3))
    shift = rng.normal(scale=50, size=(1, 3))
    p = pn.classify(Tensor(emb), Tensor(protos)).data
    q = pn.classify(Tensor(emb + shift), Tensor(protos + shift)).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
    assert np.array_equal(p.argmax(1), q.argmax(1))


def test_supervised_loss_values():
    assert pn.supervised_loss(Tensor(np.eye(3)), [0, 1, 2]).item() == 0.0
    uniform = Tensor(np.full((4, 5), 0.2))
    assert pn.supervised_loss(uniform, [0, 1, 2, 3]).item() == pytest.approx(math.log(5), abs=1e-12)
    single = Tensor(np.array([[0.75, 0.25]]))
    assert pn.supervised_loss(single, [0]).item() == pytest.approx(-math.log(0.75), abs=1e-12)


def test_supervised_loss_clamp_counter():
    c = Counter()
    loss = pn.supervised_loss(Tensor(np.array([[1.0, 0.0]])), [1], c)
    assert loss.item() == pytest.approx(-math.log(1e-12))
    assert c["supervised"] == 1


def test_supervised_loss_monotone_in_true_prob():
    losses = []
    for p in np.linspace(0.05, 0.95, 19):
        rest = (1 - p) * np.array([0.5, 0.3, 0.2])
        losses.append(pn.supervised_loss(Tensor(np.array([[p, *rest]])), [0]).item())
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_supervised_loss_label_range():
    with pytest.raises(ContractError):
        pn.supervised_loss(Tensor(np.full((1, 2), 0.5)), [2])


def test_refine_without_unlabeled_is_identity():
    rng = np.random.default_rng(0)
    emb = rng.normal(size=(6, 3))
    labels = np.array([0, 0, 1, 1, 2, 2])
    protos = pn.compute_prototypes(Tensor(emb), labels, 3)
    out = pn.refine_prototypes(protos, Tensor(emb), labels, Tensor(np.zeros((0, 3))))
    assert np.array_equal(out.data, protos.data)


def test_refine_equidistant_point_matches_weighted_mean():
    lab = np.array([[-1.0, 0.0], [1.0, 0.0]])
    u = np.array([[0.0, 2.0]])
    protos = pn.compute_prototypes(Tensor(lab), [0, 1], 2)
    out = pn.refine_prototypes(protos, Tensor(lab), [0, 1], Tensor(u)).data
    expected = np.array([(lab[0] + 0.5 * u[0]) / 1.5, (lab[1] + 0.5 * u[0]) / 1.5])
    np.testing.assert_allclose(out, expected, atol=1e-10, rtol=0)


def test_refine_point_at_prototype_barely_moves_it():
    lab = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    protos = pn.compute_prototypes(Tensor(lab), [0, 1, 2], 3)
    out = pn.refine_prototypes(protos, Tensor(lab), [0, 1, 2], Tensor(lab[:1].copy())).data
    assert np.linalg.norm(out[0] - lab[0]) < 1e-3


def test_refine_full_soft_kmeans_step_oracle():
    rng = np.random.default_rng(11)
    lab, unl = rng.normal(size=(6, 2)), rng.normal(size=(5, 2))
    labels = np.array([0, 1, 2, 0, 1, 2])
    protos = pn.compute_prototypes(Tensor(lab), labels, 3)
    out = pn.refine_prototypes(protos, Tensor(lab), labels, Tensor(unl)).data
    P = protos.data
    for c in range(3):
        num, den = np.zeros(2), 0.0
        for i in range(6):
            if labels[i] == c:
                num += lab[i]
                den += 1
        for i in range(5):
            w = np.exp(-((unl[i] - P) ** 2).sum(1))
            z = w[c] / w.sum()
            num += z * unl[i]
            den += z
        np.testing.assert_allclose(out[c], num / den, atol=1e-12)


def test_checkpoint_roundtrip(tmp_path):
    net = pn.EmbeddingNet([4, 6, 3], seed=2)
    path = pn.save_checkpoint(net, tmp_path / "m.ckpt", {"a": 1}, {"note": "x"})
    back, header = pn.load_checkpoint(path)
    assert back.sizes == net.sizes
    assert all(np.array_equal(a, b) for a, b in zip(net.params, back.params))
    assert header["config_digest"] == pn.config_digest({"a": 1})
    assert header["meta"] == {"note": "x"}
    assert path.read_bytes()[:8] == b"PRWNCKPT"


def test_checkpoint_rejects_garbage(tmp_path):
    blob = pn.checkpoint_bytes(pn.EmbeddingNet([2, 2]))
    with pytest.raises(DataError):
        pn.parse_checkpoint(b"NOTACKPT" + blob[8:])
    with pytest.raises(DataError):
        pn.parse_checkpoint(blob[:-4])
