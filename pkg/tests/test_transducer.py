import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cascade_lid.nn import Tensor, grad, precision
from cascade_lid.nn.gradcheck import check_op
from cascade_lid.transducer import (BLANK, DecoderConfig, GreedyStream, TransducerDecoder, beam_decode,
                                    count_alignments, exhaustive_decode, greedy_decode, lattice, rnnt_loss,
                                    rnnt_loss_bruteforce)


@pytest.fixture(autouse=True)
def _fp64():
    with precision(64):
        yield


def _decoder(vocab=3, seed=0, enc_dim=4, cap=4):
    cfg = DecoderConfig(vocab_size=vocab, embed_dim=4, hidden_dim=5, num_layers=2, pred_dim=4, joint_dim=6,
                        max_symbols_per_frame=cap)
    return TransducerDecoder(enc_dim, cfg, np.random.default_rng(seed))


def test_alignment_count():
    assert count_alignments(1, 0) == 1
    assert count_alignments(2, 2) == 3
    assert count_alignments(4, 3) == math.comb(6, 3)


def test_uniform_logits_closed_form():
    # every alignment has probability (1/(V+1))^(T+U)
    T, U, V1 = 3, 2, 4
    loss = rnnt_loss(Tensor(np.zeros((T, U + 1, V1))), np.array([1, 2])).item()
    expected = -(math.log(count_alignments(T, U)) - (T + U) * math.log(V1))
    assert loss == pytest.approx(expected, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 4), st.integers(0, 3), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_dp_matches_enumeration(T, U, V, seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(scale=3.0, size=(T, U + 1, V + 1))
    y = rng.integers(1, V + 1, size=U)
    assert abs(rnnt_loss(Tensor(logits), y).item() - rnnt_loss_bruteforce(logits, y)) <= 1e-9


def test_alpha_beta_consistency():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(4, 3, 3))
    lat = lattice(logits, [1, 2])
    assert lat.alpha.shape == (4, 3)
    logp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
    assert lat.alpha[3, 2] + logp[3, 2, BLANK] == pytest.approx(lat.log_likelihood, abs=1e-12)
    assert lat.beta[0, 0] == pytest.approx(lat.log_likelihood, abs=1e-12)


def test_batch_padding_matches_individual_losses():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(3, 2, 4))
    b = rng.normal(size=(5, 3, 4))
    padded = np.full((2, 5, 3, 4), 7.0)
    padded[0, :3, :2] = a
    padded[1] = b
    targets = np.array([[2, 0], [1, 3]])
    targets_a = np.array([2])
    batch = rnnt_loss(Tensor(padded), targets, np.array([3, 5]), np.array([1, 2])).item()
    single = (rnnt_loss(Tensor(a), targets_a).item() + rnnt_loss(Tensor(b), targets[1]).item()) / 2
    assert batch == pytest.approx(single, abs=1e-12)


def test_padded_cells_get_zero_gradient():
    rng = np.random.default_rng(2)
    logits = Tensor(rng.normal(size=(2, 4, 3, 4)), requires_grad=True)
    loss = rnnt_loss(logits, np.array([[1, 2], [3, 0]]), np.array([4, 2]), np.array([2, 1]))
    (g,) = grad(loss, [logits])
    assert np.all(g[1, 2:] == 0) and np.all(g[1, :, 2] == 0)


@pytest.mark.parametrize("T,U", [(1, 0), (2, 3), (4, 1)])
def test_logit_gradient(T, U):
    rng = np.random.default_rng(T * 10 + U)
    y = rng.integers(1, 4, size=U)
    assert check_op(lambda l: rnnt_loss(l, y), [rng.normal(size=(T, U + 1, 4))]) <= 1e-6


def test_loss_errors():
    with pytest.raises(ValueError):
        rnnt_loss(Tensor(np.zeros((0, 2, 3))), np.array([1]))
    with pytest.raises(ValueError):
        rnnt_loss(Tensor(np.zeros((2, 2, 3))), np.array([3]))
    with pytest.raises(ValueError):
        rnnt_loss(Tensor(np.zeros((2, 2, 3))), np.array([0]))
    with pytest.raises(ValueError):
        rnnt_loss_bruteforce(np.zeros((8, 4, 3)), [1, 1, 1])


def test_prediction_state_unchanged_on_blank():
    dec = _decoder()
    s0 = dec.predictor.initial_state()
    assert dec.predictor.step(s0, BLANK) is s0
    assert dec.predictor.step(s0, 2) is not s0


def test_prediction_net_matches_stepwise():
    dec = _decoder()
    y = np.array([[2, 1, 3]])
    full = dec.predictor(y).data[0]
    s = dec.predictor.initial_state()
    np.testing.assert_allclose(s.out, full[0], atol=1e-12)
    for u, tok in enumerate(y[0], start=1):
        s = dec.predictor.step(s, int(tok))
        np.testing.assert_allclose(s.out, full[u], atol=1e-12)


def test_greedy_respects_symbol_cap():
    dec = _decoder(cap=2)
    dec.joint.out.bias.data[:] = 0.0
    dec.joint.out.bias.data[1] = 100.0  # token 1 always wins
    hyp = greedy_decode(dec, np.zeros((3, 4)))
    assert hyp.tokens == [1] * 6
    assert hyp.blanks == 3


def test_greedy_stream_equals_batch_greedy():
    dec = _decoder(seed=4)
    frames = np.random.default_rng(4).normal(size=(6, 4))
    gs = GreedyStream(dec)
    toks = []
    for f in frames:
        toks += gs.push(f)
    assert toks == greedy_decode(dec, frames).tokens


@pytest.mark.parametrize("seed", range(5))
def test_beam_width_one_is_greedy(seed):
    dec = _decoder(seed=seed)
    frames = np.random.default_rng(seed).normal(scale=2.0, size=(5, 4))
    g = greedy_decode(dec, frames)
    b = beam_decode(dec, frames, 1)
    assert b.tokens == g.tokens and b.score == pytest.approx(g.score)


@pytest.mark.parametrize("seed", range(4))
def test_wide_beam_finds_exhaustive_best(seed):
    dec = _decoder(vocab=2, seed=seed, cap=2)
    frames = np.random.default_rng(seed).normal(scale=2.0, size=(3, 4))
    ex = exhaustive_decode(dec, frames)
    b = beam_decode(dec, frames, 10_000)
    assert b.score == pytest.approx(ex.score, abs=1e-10) and b.tokens == ex.tokens


def test_beam_never_beats_exhaustive():
    for seed in range(6):
        dec = _decoder(vocab=2, seed=seed, cap=2)
        frames = np.random.default_rng(seed + 100).normal(scale=2.0, size=(3, 4))
        best = exhaustive_decode(dec, frames).score
        for k in (1, 2, 4):
            assert beam_decode(dec, frames, k).score <= best + 1e-12


def test_beam_width_validated():
    with pytest.raises(ValueError):
        beam_decode(_decoder(), np.zeros((1, 4)), 0)


def test_decoder_logit_shape():
    dec = _decoder(vocab=5)
    out = dec(Tensor(np.zeros((2, 3, 4))), np.array([[1, 2], [3, 0]]))
    assert out.shape == (2, 3, 3, 6)
