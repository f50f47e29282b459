"""RNN-T prediction network, joint network, alignment-lattice loss and decoding.

Output index 0 is the blank symbol; tokens are ``1..vocab_size``.

Termination convention: an alignment of ``T`` frames and ``U`` tokens has
length ``T + U`` and its last symbol is the blank emitted from cell
``(T-1, U)``. So ``log P(y|x) = alpha[T-1, U] + log p(blank | T-1, U)`` and
there are ``C(T+U-1, U)`` alignments. The loss returned is ``-log P(y|x)``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_softmax as _np_log_softmax

from .nn import Embedding, Linear, LSTMCell, Module, Tensor, custom_op, no_grad, ops

BLANK = 0


# ---------------------------------------------------------------- networks

@dataclass
class DecoderConfig:
    vocab_size: int = 32
    embed_dim: int = 32
    hidden_dim: int = 64
    num_layers: int = 2
    pred_dim: int = 32
    joint_dim: int = 64
    max_symbols_per_frame: int = 4

    @property
    def num_outputs(self) -> int:
        return self.vocab_size + 1


@dataclass(frozen=True)
class PredState:
    """Prediction-network state after the tokens emitted so far."""
    h: tuple
    c: tuple
    out: np.ndarray


class PredictionNet(Module):
    """Token embedding, stacked LSTM layers and an output projection.

    The blank embedding doubles as the start-of-sequence input.
    """

    def __init__(self, cfg: DecoderConfig, rng):
        self.cfg = cfg
        self.embed = Embedding(cfg.num_outputs, cfg.embed_dim, rng)
        dims = [cfg.embed_dim] + [cfg.hidden_dim] * (cfg.num_layers - 1)
        self.layers = [LSTMCell(d, cfg.hidden_dim, rng) for d in dims]
        self.proj = Linear(cfg.hidden_dim, cfg.pred_dim, rng)

    def __call__(self, targets):
        """Teacher-forced outputs ``(B, U+1, pred_dim)`` for padded ``targets`` ``(B, U)``."""
        targets = np.asarray(targets, dtype=np.int64)
        B, U = targets.shape
        inputs = np.concatenate([np.full((B, 1), BLANK), targets], axis=1)
        x = self.embed(inputs)
        H = self.cfg.hidden_dim
        for layer in self.layers:
            xw = layer.project_inputs(x)
            h = c = Tensor(np.zeros((B, H)))
            outs = []
            for u in range(U + 1):
                h, c = layer.step(xw[:, u], h, c)
                outs.append(h.reshape(B, 1, H))
            x = ops.concat(outs, axis=1)
        return self.proj(x)

    def initial_state(self) -> PredState:
        H = self.cfg.hidden_dim
        zeros = tuple(np.zeros((1, H), dtype=self.proj.weight.dtype) for _ in self.layers)
        return self._advance(zeros, zeros, BLANK)

    def step(self, state: PredState, token: int) -> PredState:
        """Advance on an emitted token; blank leaves the state untouched."""
        if token == BLANK:
            return state
        return self._advance(state.h, state.c, token)

    def _advance(self, hs, cs, token):
        with no_grad():
            x = self.embed(np.array([token]))
            new_h, new_c = [], []
            for layer, h, c in zip(self.layers, hs, cs):
                h, c = layer.step(layer.project_inputs(x), Tensor(h), Tensor(c))
                new_h.append(h.data)
                new_c.append(c.data)
                x = h
            out = self.proj(x).data[0]
        return PredState(tuple(new_h), tuple(new_c), out)


class Joint(Module):
    """``logits = W_out tanh(W_enc h + W_pred g) + b``."""

    def __init__(self, enc_dim, pred_dim, joint_dim, num_outputs, rng):
        self.enc_proj = Linear(enc_dim, joint_dim, rng, bias=False)
        self.pred_proj = Linear(pred_dim, joint_dim, rng, bias=False)
        self.out = Linear(joint_dim, num_outputs, rng)

    def __call__(self, h, g):
        """``h`` ``(B, T, d)`` and ``g`` ``(B, U+1, p)`` -> logits ``(B, T, U+1, V+1)``."""
        a = self.enc_proj(h)
        b = self.pred_proj(g)
        B, T, J = a.shape
        z = a.reshape(B, T, 1, J) + b.reshape(B, 1, b.shape[1], J)
        return self.out(ops.tanh(z))

    def logits(self, enc_proj_t, pred_out):
        """Single-cell logits given a precomputed encoder projection."""
        b = self.pred_proj(Tensor(pred_out[None])).data[0]
        z = np.tanh(enc_proj_t + b)
        return z @ self.out.weight.data + self.out.bias.data

    def project_frames(self, h):
        with no_grad():
            return self.enc_proj(Tensor(np.atleast_2d(h))).data


class TransducerDecoder(Module):
    """One decoding pass: its own prediction network and joint network."""

    def __init__(self, enc_dim, cfg: DecoderConfig, rng):
        self.cfg = cfg
        self.predictor = PredictionNet(cfg, rng)
        self.joint = Joint(enc_dim, cfg.pred_dim, cfg.joint_dim, cfg.num_outputs, rng)

    def __call__(self, h, targets):
        return self.joint(h, self.predictor(targets))


# ---------------------------------------------------------------- loss

@dataclass
class Lattice:
    """Forward/backward log-domain tables over ``(t, u)`` for one utterance."""
    alpha: np.ndarray
    beta: np.ndarray
    log_likelihood: float


def _check_targets(targets, num_outputs):
    t = np.asarray(targets)
    if t.size and (t.min() < 1 or t.max() >= num_outputs):
        raise ValueError(f"rnnt_loss: token out of vocabulary (valid 1..{num_outputs - 1})")


def _forward_backward(logp, targets, T_lens, U_lens):
    """Vectorised anti-diagonal alpha/beta recursions over a padded batch."""
    B, T, U1, _ = logp.shape
    U = U1 - 1
    lp_blank = logp[..., BLANK]
    lp_label = np.full((B, T, U1), -np.inf)
    if U:
        idx = np.broadcast_to(targets[:, None, :], (B, T, U))
        lp_label[:, :, :U] = np.take_along_axis(logp[:, :, :U, :], idx[..., None], axis=-1)[..., 0]
    t_idx = np.arange(T)[None, :, None]
    u_idx = np.arange(U1)[None, None, :]
    valid = (t_idx < T_lens[:, None, None]) & (u_idx <= U_lens[:, None, None])
    lp_label = np.where(u_idx < U_lens[:, None, None], lp_label, -np.inf)

    alpha = np.full((B, T, U1), -np.inf)
    alpha[:, 0, 0] = 0.0
    for n in range(1, T + U):
        ts = np.arange(max(0, n - U), min(n, T - 1) + 1)
        us = n - ts
        from_t = np.full((B, len(ts)), -np.inf)
        m = ts > 0
        from_t[:, m] = alpha[:, ts[m] - 1, us[m]] + lp_blank[:, ts[m] - 1, us[m]]
        from_u = np.full((B, len(ts)), -np.inf)
        m = us > 0
        from_u[:, m] = alpha[:, ts[m], us[m] - 1] + lp_label[:, ts[m], us[m] - 1]
        alpha[:, ts, us] = np.logaddexp(from_t, from_u)
    alpha = np.where(valid, alpha, -np.inf)

    bidx = np.arange(B)
    beta = np.full((B, T, U1), -np.inf)
    last_t, last_u = T_lens - 1, U_lens
    for n in range(T + U - 1, -1, -1):
        ts = np.arange(max(0, n - U), min(n, T - 1) + 1)
        us = n - ts
        nxt_t = np.full((B, len(ts)), -np.inf)
        m = ts + 1 < T
        nxt_t[:, m] = beta[:, ts[m] + 1, us[m]]
        nxt_u = np.full((B, len(ts)), -np.inf)
        m = us + 1 <= U
        nxt_u[:, m] = beta[:, ts[m], us[m] + 1]
        val = np.logaddexp(nxt_t + lp_blank[:, ts, us], nxt_u + lp_label[:, ts, us])
        term = (ts[None, :] == last_t[:, None]) & (us[None, :] == last_u[:, None])
        val = np.where(term, lp_blank[:, ts, us], val)
        beta[:, ts, us] = np.where(valid[:, ts, us], val, -np.inf)
    log_like = beta[:, 0, 0]
    check = alpha[bidx, last_t, last_u] + lp_blank[bidx, last_t, last_u]
    return alpha, beta, log_like, lp_blank, lp_label, check


def lattice(logits, targets) -> Lattice:
    """Alpha/beta tables for a single ``(T, U+1, V+1)`` logit array."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64).reshape(1, -1)
    _check_targets(targets, logits.shape[-1])
    logp = _np_log_softmax(logits, axis=-1)[None]
    T, U1 = logits.shape[:2]
    a, b, ll, *_ = _forward_backward(logp, targets, np.array([T]), np.array([U1 - 1]))
    return Lattice(a[0], b[0], float(ll[0]))


def rnnt_loss(logits, targets, T_lens=None, U_lens=None):
    """Mean negative log-likelihood ``-log P(y|x)`` with an analytic gradient.

    ``logits`` is ``(T, U+1, V+1)`` or a padded batch ``(B, T, U+1, V+1)``;
    ``targets`` is ``(U,)`` or ``(B, U)`` padded; lengths default to full.
    The DP runs in float64 whatever the tensor precision.
    """
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    single = logits.ndim == 3
    targets = np.asarray(targets, dtype=np.int64)
    if single:
        targets = targets.reshape(1, -1)
    B, T, U1, V1 = (1,) + logits.shape if single else logits.shape
    if T < 1:
        raise ValueError("rnnt_loss: T must be >= 1")
    if targets.shape != (B, U1 - 1):
        raise ValueError(f"rnnt_loss: targets shape {targets.shape} does not match logits {logits.shape}")
    T_lens = np.full(B, T) if T_lens is None else np.asarray(T_lens, dtype=np.int64)
    U_lens = np.full(B, U1 - 1) if U_lens is None else np.asarray(U_lens, dtype=np.int64)
    if np.any(T_lens < 1):
        raise ValueError("rnnt_loss: T must be >= 1")
    for b in range(B):
        _check_targets(targets[b, :U_lens[b]], V1)
    safe_targets = np.where(np.arange(U1 - 1)[None] < U_lens[:, None], targets, 1)

    x = logits.data.astype(np.float64).reshape(B, T, U1, V1)
    logp = _np_log_softmax(x, axis=-1)
    with np.errstate(invalid="ignore"):
        alpha, beta, log_like, lp_blank, lp_label, _ = _forward_backward(logp, safe_targets, T_lens, U_lens)
    if not np.all(np.isfinite(log_like)):
        raise FloatingPointError("rnnt_loss: non-finite log-likelihood")
    loss = -float(log_like.mean())

    def backward(g):
        ll = log_like[:, None, None]
        with np.errstate(invalid="ignore", over="ignore"):
            beta_t = np.full_like(beta, -np.inf)
            beta_t[:, :-1] = beta[:, 1:]
            term = np.zeros_like(beta, dtype=bool)
            term[np.arange(B), T_lens - 1, U_lens] = True
            beta_t = np.where(term, 0.0, beta_t)
            beta_u = np.full_like(beta, -np.inf)
            beta_u[:, :, :-1] = beta[:, :, 1:]
            occ_blank = np.exp(alpha + lp_blank + beta_t - ll)
            occ_label = np.exp(alpha + lp_label + beta_u - ll)
        occ_blank = np.nan_to_num(occ_blank)
        occ_label = np.nan_to_num(occ_label)
        cell = occ_blank + occ_label
        grad = np.exp(logp) * cell[..., None]
        grad[..., BLANK] -= occ_blank
        if U1 > 1:
            bi, ti, ui = np.meshgrid(np.arange(B), np.arange(T), np.arange(U1 - 1), indexing="ij")
            np.add.at(grad, (bi, ti, ui, safe_targets[bi, ui]), -occ_label[:, :, :U1 - 1])
        grad *= float(g) / B
        return (grad.reshape(logits.shape).astype(logits.data.dtype),)

    return custom_op(np.asarray(loss, dtype=logits.data.dtype), [logits], backward, "rnnt_loss")


def count_alignments(T: int, U: int) -> int:
    from math import comb
    return comb(T + U - 1, U)


def rnnt_loss_bruteforce(logits, targets, max_size=10):
    """Reference ``-log P(y|x)`` by explicit enumeration of every alignment."""
    logits = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    targets = [int(t) for t in np.asarray(targets).reshape(-1)]
    T, U1, V1 = logits.shape
    U = U1 - 1
    if T < 1:
        raise ValueError("bruteforce: T must be >= 1")
    if len(targets) != U:
        raise ValueError("bruteforce: targets do not match logits")
    if T + U > max_size:
        raise ValueError(f"bruteforce: T+U={T + U} exceeds {max_size}")
    _check_targets(targets, V1)
    logp = logits - np.log(np.sum(np.exp(logits - logits.max(-1, keepdims=True)), -1, keepdims=True)) \
        - logits.max(-1, keepdims=True)
    scores = []
    # choose which of the first T+U-1 steps emit labels; the final step is blank
    for label_steps in itertools.combinations(range(T + U - 1), U):
        t = u = 0
        s = 0.0
        chosen = set(label_steps)
        for i in range(T + U):
            if i in chosen:
                s += logp[t, u, targets[u]]
                u += 1
            else:
                s += logp[t, u, BLANK]
                t += 1
        scores.append(s)
    scores = np.array(scores)
    m = scores.max()
    return -float(m + np.log(np.sum(np.exp(scores - m))))


# ---------------------------------------------------------------- decoding

@dataclass
class DecodeHyp:
    tokens: list = field(default_factory=list)
    score: float = 0.0
    state: PredState | None = None
    blanks: int = 0


def _log_softmax(z):
    z = z - z.max()
    return z - np.log(np.exp(z).sum())


class GreedyStream:
    """Frame-synchronous greedy decoding, one encoder frame at a time.

    At most ``max_symbols`` tokens are emitted per frame; hitting the cap
    forces a blank (its log-probability is still scored).
    """

    def __init__(self, decoder: TransducerDecoder, max_symbols=None):
        self.decoder = decoder
        self.max_symbols = decoder.cfg.max_symbols_per_frame if max_symbols is None else max_symbols
        self.hyp = DecodeHyp(state=decoder.predictor.initial_state())
        self.steps = 0

    def push(self, h_t):
        """Consume one frame; returns the tokens newly emitted on it."""
        joint = self.decoder.joint
        enc = joint.project_frames(h_t)[0]
        hyp = self.hyp
        new = []
        for k in range(self.max_symbols + 1):
            self.steps += 1
            logp = _log_softmax(joint.logits(enc, hyp.state.out))
            best = int(np.argmax(logp))
            if best == BLANK or k == self.max_symbols:
                hyp.score += float(logp[BLANK])
                hyp.blanks += 1
                break
            hyp.score += float(logp[best])
            hyp.tokens.append(best)
            hyp.state = self.decoder.predictor.step(hyp.state, best)
            new.append(best)
        return new


def greedy_decode(decoder: TransducerDecoder, frames, max_symbols=None) -> DecodeHyp:
    stream = GreedyStream(decoder, max_symbols)
    for h_t in np.asarray(frames):
        stream.push(h_t)
    return stream.hyp


def beam_decode(decoder: TransducerDecoder, frames, beam_width: int, max_symbols=None) -> DecodeHyp:
    """Frame-synchronous beam search over alignment paths (no prefix merging).

    Per frame, up to ``max_symbols + 1`` expansion rounds; each round keeps
    the ``beam_width`` best among finished-for-this-frame and still-emitting
    hypotheses. Ties prefer earlier candidates, with blank enumerated before
    tokens, so width 1 reproduces greedy decoding exactly.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    cap = decoder.cfg.max_symbols_per_frame if max_symbols is None else max_symbols
    joint, pred = decoder.joint, decoder.predictor
    beam = [DecodeHyp(state=pred.initial_state())]
    for h_t in np.asarray(frames):
        enc = joint.project_frames(h_t)[0]
        pending, done = beam, []
        for k in range(cap + 1):
            cands = []
            for hyp in pending:
                logp = _log_softmax(joint.logits(enc, hyp.state.out))
                cands.append((hyp.score + float(logp[BLANK]), True, hyp, BLANK))
                if k < cap:
                    for tok in range(1, len(logp)):
                        cands.append((hyp.score + float(logp[tok]), False, hyp, tok))
            pool = [(h.score, True, h, None) for h in done] + cands
            order = sorted(range(len(pool)), key=lambda i: (-pool[i][0], i))[:beam_width]
            done, pending = [], []
            for i in order:
                score, finished, hyp, tok = pool[i]
                if tok is None:
                    done.append(hyp)
                elif finished:
                    done.append(DecodeHyp(list(hyp.tokens), score, hyp.state, hyp.blanks + 1))
                else:
                    pending.append(DecodeHyp(hyp.tokens + [tok], score, pred.step(hyp.state, tok), hyp.blanks))
            if not pending:
                break
        beam = done
    return max(beam, key=lambda h: h.score)


def exhaustive_decode(decoder: TransducerDecoder, frames, max_symbols=None) -> DecodeHyp:
    """Best path over every frame-synchronous emission sequence (tiny inputs only)."""
    cap = decoder.cfg.max_symbols_per_frame if max_symbols is None else max_symbols
    joint, pred = decoder.joint, decoder.predictor
    hyps = [DecodeHyp(state=pred.initial_state())]
    for h_t in np.asarray(frames):
        enc = joint.project_frames(h_t)[0]
        nxt = []
        frontier = hyps
        for k in range(cap + 1):
            grow = []
            for hyp in frontier:
                logp = _log_softmax(joint.logits(enc, hyp.state.out))
                nxt.append(DecodeHyp(list(hyp.tokens), hyp.score + float(logp[BLANK]), hyp.state, hyp.blanks + 1))
                if k < cap:
                    for tok in range(1, len(logp)):
                        grow.append(DecodeHyp(hyp.tokens + [tok], hyp.score + float(logp[tok]),
                                              pred.step(hyp.state, tok), hyp.blanks))
            frontier = grow
        hyps = nxt
        if len(hyps) > 200000:
            raise ValueError("exhaustive_decode: search space too large")
    return max(hyps, key=lambda h: h.score)
