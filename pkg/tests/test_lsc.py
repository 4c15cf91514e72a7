import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gsfda.errors import ConfigError, ShapeError, UsageError
from gsfda.lsc import (Banks, LscConfig, balance_term, init_banks, knn, lsc_loss,
                       lsc_loss_and_dlogits, update_banks, write_banks_csv)
from gsfda.nn import forward, init_params, softmax
from gsfda.numerics import cosine_similarity, finite_diff_grad, make_rng, max_relative_error
from gsfda.sda import DomainAttention


def brute_knn(features, queries, exclude, K):
    """Scalar cosine, full stable sort on (-similarity, id)."""
    out = []
    for i, q in enumerate(queries):
        cands = [(-cosine_similarity(q, f), j) for j, f in enumerate(features)
                 if exclude is None or j != exclude[i]]
        out.append([j for _, j in sorted(cands)[:K]])
    return np.array(out)


def small_net(seed=0):
    rng = make_rng(seed)
    return init_params(2, 8, 4, 3, rng), rng


def test_init_banks_shapes_and_determinism():
    p, rng = small_net()
    x = rng.standard_normal((10, 2))
    att = DomainAttention(1, rng.uniform(-0.05, 0.05, 4))
    b1 = init_banks(p, x, att)
    b2 = init_banks(p, x, att)
    assert b1.features.shape == (10, 4) and b1.scores.shape == (10, 3) and b1.size == 10
    assert np.array_equal(b1.features, b2.features) and np.array_equal(b1.scores, b2.scores)
    assert np.array_equal(b1.sample_ids, np.arange(10))


def test_bank_scores_match_single_sample_forward():
    p, rng = small_net(1)
    x = rng.standard_normal((7, 2))
    att = DomainAttention(1, rng.uniform(-0.05, 0.05, 4))
    banks = init_banks(p, x, att, batch_size=3)
    for i in range(7):
        c = forward(p, x[i:i + 1], att, training=False)
        np.testing.assert_allclose(banks.scores[i], c.probs[0], rtol=1e-13, atol=1e-15)
        np.testing.assert_allclose(banks.features[i], c.masked[0], rtol=1e-13, atol=1e-15)


def test_init_banks_empty():
    p, _ = small_net()
    with pytest.raises(ConfigError):
        init_banks(p, np.zeros((0, 2)), None)


def random_banks(rng, n=8, d=3, C=2):
    return Banks(rng.standard_normal((n, d)), softmax(rng.standard_normal((n, C))), np.arange(n))


def test_update_with_itself_is_noop():
    b = random_banks(make_rng(0))
    ref = b.copy()
    update_banks(b, [1, 4], b.features[[1, 4]].copy(), b.scores[[1, 4]].copy())
    assert np.array_equal(b.features, ref.features) and np.array_equal(b.scores, ref.scores)


def test_disjoint_updates_commute_and_leave_other_rows():
    rng = make_rng(1)
    base = random_banks(rng)
    f1, s1 = rng.standard_normal((2, 3)), softmax(rng.standard_normal((2, 2)))
    f2, s2 = rng.standard_normal((1, 3)), softmax(rng.standard_normal((1, 2)))
    a = update_banks(update_banks(base.copy(), [2, 5], f1, s1), [7], f2, s2)
    b = update_banks(update_banks(base.copy(), [7], f2, s2), [2, 5], f1, s1)
    assert np.array_equal(a.features, b.features) and np.array_equal(a.scores, b.scores)
    for r in (0, 1, 3, 4, 6):
        assert np.array_equal(a.features[r], base.features[r])
        assert np.array_equal(a.scores[r], base.scores[r])


def test_update_errors():
    b = random_banks(make_rng(2))
    with pytest.raises(UsageError):
        update_banks(b, [8], np.zeros((1, 3)), np.zeros((1, 2)))
    with pytest.raises(ShapeError):
        update_banks(b, [0], np.zeros((1, 4)), np.zeros((1, 2)))


def test_knn_tie_break_on_orthonormal_basis():
    b = Banks(np.eye(5), np.full((5, 2), 0.5), np.arange(5))
    assert knn(b, np.eye(5)[:1], [0], 1).tolist() == [[1]]
    # with self excluded, every other basis row ties at 0 and comes back in id order
    assert knn(b, np.eye(5)[:1], [0], 4).tolist() == [[1, 2, 3, 4]]


def test_knn_self_match_when_not_excluded():
    rng = make_rng(3)
    b = random_banks(rng, n=12)
    for j in (0, 5, 11):
        assert knn(b, b.features[j:j + 1], None, 1)[0, 0] == j


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(4, 30), st.integers(1, 6), st.booleans())
def test_knn_matches_brute_force(seed, n, d, integer_valued):
    rng = make_rng(seed)
    feats = rng.integers(-2, 3, (n, d)).astype(float) if integer_valued else rng.standard_normal((n, d))
    b = Banks(feats, np.full((n, 2), 0.5), np.arange(n))
    K = int(rng.integers(1, n - 1))
    q_ids = rng.choice(n, size=min(5, n), replace=False)
    got = knn(b, feats[q_ids], q_ids, K)
    assert np.array_equal(got, brute_knn(feats, feats[q_ids], q_ids, K))


def test_knn_k_validation():
    b = random_banks(make_rng(4), n=5)
    for K in (0, 5, 6):
        with pytest.raises(ConfigError):
            knn(b, b.features[:1], [0], K)
    with pytest.raises(ShapeError):
        knn(b, b.features[:2], [0], 2)


def test_loss_perfect_consistency_and_balance_is_zero():
    p = np.array([[1.0, 0.0], [0.0, 1.0]])
    s = np.array([[[1.0, 0.0]], [[0.0, 1.0]]])
    assert lsc_loss(p, s, 1.0) == 0.0


def test_loss_hand_value():
    p = np.array([[0.5, 0.5]])
    s = np.array([[[0.5, 0.5]]])
    assert lsc_loss(p, s, 0.0) == pytest.approx(math.log(2.0), rel=1e-15)
    assert balance_term(p) == 0.0
    assert lsc_loss(p, s, 1.0) == pytest.approx(0.6931, abs=1e-4)


def test_loss_clamps_zero_dot():
    p = np.array([[1.0, 0.0]])
    s = np.array([[[0.0, 1.0]]])
    assert lsc_loss(p, s, 0.0) == pytest.approx(-math.log(1e-8))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0.0, 2.0))
def test_dlogits_matches_finite_differences(seed, bw):
    rng = make_rng(seed)
    p, _ = small_net(seed % 97)
    x = rng.standard_normal((6, 2))
    c = forward(p, x, None, training=True, update_stats=False)
    banks = Banks(rng.standard_normal((9, 4)), softmax(2 * rng.standard_normal((9, 3))), np.arange(9))
    nb = np.stack([rng.choice(9, 3, replace=False) for _ in range(6)])
    loss, dl = lsc_loss_and_dlogits(c, banks, nb, LscConfig(3, bw))
    assert loss == pytest.approx(lsc_loss(c.probs, banks.scores[nb], bw), rel=1e-12)
    fd = finite_diff_grad(lambda z: lsc_loss(softmax(z), banks.scores[nb], bw), c.logits)
    assert max_relative_error(dl, fd) < 1e-4


def test_dlogits_rejects_bad_neighbors():
    p, rng = small_net()
    c = forward(p, rng.standard_normal((4, 2)), None, update_stats=False)
    b = random_banks(rng, n=6, d=4, C=3)
    with pytest.raises(UsageError):
        lsc_loss_and_dlogits(c, b, np.zeros((3, 2), np.int64), LscConfig(2))
    with pytest.raises(UsageError):
        lsc_loss_and_dlogits(c, b, np.zeros((4, 0), np.int64), LscConfig(2))


def test_write_banks_csv(tmp_path):
    b = random_banks(make_rng(5), n=3)
    write_banks_csv(b, tmp_path / "b.csv", labels=np.array([0, 1, 0]))
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert lines[0] == "id,f0,f1,f2,s0,s1,pred,label" and len(lines) == 4
