import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cascade_lid import lid
from cascade_lid.nn import Tensor, grad, precision
from cascade_lid.verify import pooling_equivalence, pooling_oracle


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 60), st.integers(1, 8), st.floats(-50, 50), st.integers(0, 2**31 - 1))
def test_streaming_pool_matches_two_pass(T, D, offset, seed):
    h = np.random.default_rng(seed).normal(size=(T, D)) + offset
    st_ = lid.PoolState.empty(D)
    for t in range(T):
        st_ = lid.pool_update(st_, h[t])
        np.testing.assert_allclose(lid.pool_stats(st_), pooling_oracle(h[:t + 1])[-1], atol=1e-8)


def test_pool_first_frame_has_zero_sigma():
    st_ = lid.pool_update(lid.PoolState.empty(3), np.array([1.5, -2.0, 7.0]))
    np.testing.assert_array_equal(lid.pool_stats(st_), [1.5, -2.0, 7.0, 0.0, 0.0, 0.0])


def test_constant_sequence_variance_clamped():
    st_ = lid.PoolState.empty(2)
    for _ in range(7):
        st_ = lid.pool_update(st_, np.array([0.1, 1e8 / 3]))
    assert np.all(lid.pool_stats(st_)[2:] >= 0)
    assert np.all(lid.pool_variance_raw(st_) <= 1e-3)


def test_pool_errors():
    with pytest.raises(ValueError):
        lid.pool_stats(lid.PoolState.empty(2))
    with pytest.raises(ValueError):
        lid.pool_update(lid.PoolState.empty(2), np.zeros(3))


def test_pool_state_is_immutable():
    s0 = lid.PoolState.empty(2)
    s1 = lid.pool_update(s0, np.ones(2))
    assert s0.frame_count == 0 and s1.frame_count == 1
    with pytest.raises(Exception):
        s1.frame_count = 5


@pytest.mark.parametrize("bits", [32, 64])
def test_pooling_suite(bits):
    res = pooling_equivalence(bits=bits, n=10)
    assert res.passed, res.line()


def test_differentiable_pooling_matches_streaming():
    with precision(64):
        h = np.random.default_rng(0).normal(size=(2, 9, 3))
        out = lid.streaming_stats(Tensor(h)).data
        for b in range(2):
            np.testing.assert_allclose(out[b], pooling_oracle(h[b]), atol=1e-12)


def test_pooled_output_is_causal():
    h = np.random.default_rng(1).normal(size=(1, 10, 2))
    a = lid.streaming_stats(Tensor(h)).data
    h2 = h.copy()
    h2[:, 6:] += 5.0
    np.testing.assert_array_equal(lid.streaming_stats(Tensor(h2)).data[:, :6], a[:, :6])


def test_lid_head_shapes_and_streaming_forward():
    with precision(64):
        head = lid.LidHead(4, 8, 5, np.random.default_rng(0))
        h = np.random.default_rng(1).normal(size=(1, 6, 4))
        logits = head(Tensor(h)).data[0]
        st_ = lid.PoolState.empty(4)
        for t in range(6):
            st_ = lid.pool_update(st_, h[0, t])
            z = head.lid_forward(lid.pool_stats(st_))
            np.testing.assert_allclose(z.sum(), 1.0)
            np.testing.assert_allclose(np.log(z) - np.log(z).mean(), logits[t] - logits[t].mean(), atol=1e-10)
        with pytest.raises(ValueError):
            head.lid_forward(np.zeros(4))


def test_lid_head_without_pooling_is_framewise():
    head = lid.LidHead(3, 6, 4, np.random.default_rng(0), pooling=False)
    h = np.random.default_rng(1).normal(size=(1, 5, 3))
    full = head(Tensor(h)).data
    np.testing.assert_allclose(head(Tensor(h[:, 2:3])).data[0, 0], full[0, 2], atol=1e-6)


def test_one_hot_and_cluster_matrix():
    np.testing.assert_array_equal(lid.one_hot(np.array([2, 0]), 3), [[0, 0, 1], [1, 0, 0]])
    M = lid.cluster_matrix({"a": "x", "b": "x"}, ["a", "b", "c"], ["x", "c"])
    np.testing.assert_array_equal(M, [[1, 0], [1, 0], [0, 1]])


def test_feature_modes_forward():
    z = np.array([[0.2, 0.5, 0.3], [0.4, 0.4, 0.2]])
    np.testing.assert_allclose(lid.lid_feature(z, "z").data, z, rtol=1e-6)
    # ties go to the lowest index
    np.testing.assert_array_equal(lid.lid_feature(z, "argmax").data, [[0, 1, 0], [1, 0, 0]])
    np.testing.assert_array_equal(lid.lid_feature(z, "sg").data, [[0, 1, 0], [1, 0, 0]])
    M = np.array([[1, 0], [1, 0], [0, 1]])
    np.testing.assert_array_equal(lid.lid_feature(z, "cluster", M).data, [[1, 0], [1, 0]])
    with pytest.raises(ValueError):
        lid.lid_feature(z, "cluster")
    with pytest.raises(ValueError):
        lid.lid_feature(z, "soft")


def test_feature_mode_gradients():
    z = Tensor(np.array([[0.2, 0.5, 0.3]]), requires_grad=True)
    w = Tensor(np.array([[1.0, 2.0, 3.0]]))
    (g_st,) = grad((lid.lid_feature(z, "argmax") * w).sum() + (z * 0.0).sum(), [z])
    (g_sg,) = grad((lid.lid_feature(z, "sg") * w).sum() + (z * 0.0).sum(), [z])
    np.testing.assert_array_equal(g_st, w.data)
    assert np.all(g_sg == 0)


def test_lid_loss_values():
    z = np.array([[0.5, 0.5], [0.25, 0.75]])
    assert lid.lid_loss(z, [0, 1]) == pytest.approx(-(np.log(0.5) + np.log(0.75)) / 2)
    assert lid.lid_loss(np.array([[1.0, 0.0]]), [1]) == np.inf
    with pytest.raises(ValueError):
        lid.lid_loss(z, [0, 2])


def test_lid_loss_from_logits_is_frame_mean():
    logits = np.random.default_rng(0).normal(size=(2, 3, 4))
    mask = np.array([[True, True, True], [True, False, False]])
    labels = np.array([1, 3])
    got = lid.lid_loss_from_logits(Tensor(logits), labels, mask).item()
    logp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
    want = -(logp[0, :, 1].sum() + logp[1, 0, 3]) / 4
    assert got == pytest.approx(want, rel=1e-6)
