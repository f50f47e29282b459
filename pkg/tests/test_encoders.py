import numpy as np
import pytest

from cascade_lid.encoders import Encoder, EncoderConfig, EncoderStream, attention_mask, even_split
from cascade_lid.nn import Tensor, precision


def _enc(rc=(0, 0, 0), reduce=1, left=None, pos=64, seed=0, d_in=6):
    cfg = EncoderConfig(input_dim=d_in, num_blocks=len(rc), model_dim=8, num_heads=2, conv_kernel=3,
                        per_layer_right_context=rc, left_context=left, time_reduction_after=reduce,
                        max_positions=pos)
    return Encoder(cfg, np.random.default_rng(seed))


def test_even_split():
    assert even_split(15, 5) == (3, 3, 3, 3, 3)
    assert even_split(4, 3) == (2, 1, 1)
    assert sum(even_split(7, 4)) == 7


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(input_dim=4, num_blocks=2, per_layer_right_context=(0,))
    with pytest.raises(ValueError):
        EncoderConfig(input_dim=4, num_blocks=2, per_layer_right_context=(0, -1))
    with pytest.raises(ValueError):
        EncoderConfig(input_dim=4, num_blocks=2, model_dim=6, num_heads=4, per_layer_right_context=(0, 0))
    with pytest.raises(ValueError):
        EncoderConfig(input_dim=4, num_blocks=3, per_layer_right_context=(0, 0, 0), time_reduction_after=2,
                      tap_block=1)


def test_tap_defaults_to_block_after_reduction():
    cfg = EncoderConfig(input_dim=4, num_blocks=4, per_layer_right_context=(0,) * 4, time_reduction_after=2)
    assert cfg.tap_block == 3 and cfg.reduction == 2
    assert EncoderConfig(input_dim=4, num_blocks=2, per_layer_right_context=(1, 2)).total_right_context == 3


def test_attention_mask_window_and_padding():
    m = attention_mask(5, np.array([5, 3]), right_context=1, left_context=2)[:, 0]
    assert m.shape == (2, 5, 5)
    assert m[0, 2].tolist() == [True, True, True, True, False]
    assert m[0, 4].tolist() == [False, False, True, True, True]
    assert not m[1, :, 3:].any()


def test_output_shapes_with_reduction():
    enc = _enc(rc=(0, 0, 0), reduce=1)
    out, tap, lens = enc(np.random.default_rng(1).normal(size=(2, 9, 6)), np.array([9, 6]))
    assert out.shape == (2, 5, 8) and tap.shape == (2, 5, 8)
    assert lens.tolist() == [5, 3]


def test_single_utterance_input():
    enc = _enc(rc=(0, 1), reduce=None)
    out, tap, lens = enc(np.random.default_rng(1).normal(size=(7, 6)))
    assert out.shape == (7, 8) and lens.tolist() == [7]


def test_padding_does_not_change_valid_frames():
    enc = _enc(rc=(1, 1, 0), reduce=1)
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1, 7, 6))
    padded = np.concatenate([x, rng.normal(size=(1, 4, 6))], axis=1)
    a, _, la = enc(x)
    b, _, lb = enc(padded, np.array([7]))
    assert la.tolist() == lb.tolist() == [4]
    np.testing.assert_allclose(a.data[0], b.data[0, :4], atol=1e-5)


@pytest.mark.parametrize("rc", [(0, 0, 0), (1, 0, 2), (2, 2, 2)])
def test_lookahead_is_exact(rc):
    enc = _enc(rc=rc, reduce=None, pos=None)
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 20, 6)).astype(np.float32)
    base = enc(x)[0].data
    R = sum(rc)
    for t in [0, 5, 11]:
        y = x.copy()
        y[:, t + R + 1:] += 3.0
        np.testing.assert_array_equal(enc(y)[0].data[:, :t + 1], base[:, :t + 1])
        if R:
            z = x.copy()
            z[:, t + 1:t + R + 1] += 3.0
            assert not np.array_equal(enc(z)[0].data[:, t], base[:, t])


def test_positions_limit():
    enc = _enc(pos=8)
    with pytest.raises(ValueError):
        enc(np.zeros((1, 9, 6)))


def test_input_dim_checked():
    with pytest.raises(ValueError):
        _enc()(np.zeros((1, 4, 5)))


@pytest.mark.parametrize("rc,reduce,left", [((0, 0, 0), 1, None), ((1, 2), None, None), ((0, 1, 1), 2, 3)])
@pytest.mark.parametrize("T", [1, 2, 9, 16])
def test_streaming_matches_offline(rc, reduce, left, T):
    with precision(64):
        enc = _enc(rc=rc, reduce=reduce, left=left)
        x = np.random.default_rng(T).normal(size=(T, 6))
        out, tap, _ = enc(x)
        stream = EncoderStream(enc)
        got = []
        for f in x:
            got += stream.push(f)
        got += stream.flush()
    assert len(got) == out.shape[0]
    np.testing.assert_allclose(np.array([g[0] for g in got]), out.data, atol=1e-10)
    np.testing.assert_allclose(np.array([g[1] for g in got]), tap.data, atol=1e-10)


def test_stream_emits_after_right_context():
    enc = _enc(rc=(1, 2), reduce=None)
    stream = EncoderStream(enc)
    counts = [len(stream.push(f)) for f in np.random.default_rng(0).normal(size=(6, 6))]
    assert counts == [0, 0, 0, 1, 1, 1]
    assert len(stream.flush()) == 3
    with pytest.raises(RuntimeError):
        stream.push(np.zeros(6))


def test_gradients_flow_to_all_parameters():
    from cascade_lid.nn import grad
    enc = _enc(rc=(0, 1, 0), reduce=1)
    out, tap, _ = enc(Tensor(np.random.default_rng(0).normal(size=(2, 6, 6))))
    gs = grad((out * out).sum() + tap.sum(), enc.parameters())
    assert all(np.any(g != 0) for g in gs)
