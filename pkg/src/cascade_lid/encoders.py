"""Masked self-attention encoder stacks: causal and right-context.

Each block attends to frames ``[t - left_context, t + right_context]`` of
its own input, so a stack's lookahead is the sum of its blocks'
right-contexts. The streaming path (:class:`EncoderStream`) feeds one frame
at a time through per-block caches and reproduces the offline output.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import Embedding, LayerNorm, Linear, Module, Tensor, no_grad, ops, parameter
from .nn.layers import _init


@dataclass
class EncoderConfig:
    input_dim: int
    num_blocks: int = 4
    model_dim: int = 64
    num_heads: int = 4
    conv_kernel: int = 3
    per_layer_right_context: tuple = (0, 0, 0, 0)
    left_context: int | None = None
    time_reduction_after: int | None = None
    ff_mult: int = 4
    max_positions: int | None = None
    tap_block: int | None = None

    def __post_init__(self):
        self.per_layer_right_context = tuple(int(r) for r in self.per_layer_right_context)
        if len(self.per_layer_right_context) != self.num_blocks:
            raise ValueError("per_layer_right_context needs one entry per block")
        if any(r < 0 for r in self.per_layer_right_context):
            raise ValueError("right contexts must be nonnegative")
        if self.model_dim % self.num_heads:
            raise ValueError("model_dim must be divisible by num_heads")
        tr = self.time_reduction_after
        if tr is not None and not 1 <= tr < self.num_blocks:
            raise ValueError("time_reduction_after must name a block before the last")
        if self.tap_block is None:
            self.tap_block = tr + 1 if tr is not None else self.num_blocks
        if not 1 <= self.tap_block <= self.num_blocks:
            raise ValueError("tap_block out of range")
        if tr is not None and self.tap_block <= tr:
            raise ValueError("tap_block must come after the time reduction")

    @property
    def total_right_context(self) -> int:
        return sum(self.per_layer_right_context)

    @property
    def reduction(self) -> int:
        return 1 if self.time_reduction_after is None else 2


def even_split(total: int, num_blocks: int) -> tuple:
    """Distribute ``total`` lookahead frames over blocks as evenly as possible."""
    base, extra = divmod(total, num_blocks)
    return tuple(base + (1 if i < extra else 0) for i in range(num_blocks))


def attention_mask(num_frames, lengths, right_context, left_context=None):
    """Boolean ``(B, 1, T, T)`` mask: query i may see key j."""
    i = np.arange(num_frames)[:, None]
    j = np.arange(num_frames)[None, :]
    allowed = j <= i + right_context
    if left_context is not None:
        allowed &= j >= i - left_context
    valid = j[None] < np.asarray(lengths)[:, None, None]
    return (allowed[None] & valid)[:, None]


class EncoderBlock(Module):
    """Feed-forward, masked self-attention, causal depthwise conv, output norm."""

    def __init__(self, dim, heads, kernel, ff_mult, right_context, left_context, rng):
        self.heads = heads
        self.right_context = right_context
        self.left_context = left_context
        self.kernel = kernel
        self.ln_ff = LayerNorm(dim)
        self.ff1 = Linear(dim, ff_mult * dim, rng)
        self.ff2 = Linear(ff_mult * dim, dim, rng)
        self.ln_att = LayerNorm(dim)
        self.wq = Linear(dim, dim, rng, bias=False)
        self.wk = Linear(dim, dim, rng, bias=False)
        self.wv = Linear(dim, dim, rng, bias=False)
        self.wo = Linear(dim, dim, rng)
        self.ln_conv = LayerNorm(dim)
        self.conv_w = parameter(_init(rng, (kernel, dim), kernel))
        self.conv_b = parameter(np.zeros(dim))
        self.pointwise = Linear(dim, dim, rng)
        self.ln_out = LayerNorm(dim)

    def feed_forward(self, x):
        return x + self.ff2(ops.swish(self.ff1(self.ln_ff(x))))

    def _heads(self, x):
        B, T, D = x.shape
        return x.reshape(B, T, self.heads, D // self.heads).transpose(0, 2, 1, 3)

    def project_qkv(self, x1):
        h = self.ln_att(x1)
        return self._heads(self.wq(h)), self._heads(self.wk(h)), self._heads(self.wv(h))

    def attend(self, q, k, v, mask):
        scale = 1.0 / np.sqrt(q.shape[-1])
        scores = ops.matmul(q, k.transpose(0, 1, 3, 2)) * scale
        o = ops.matmul(ops.masked_softmax(scores, mask), v)
        B, H, T, dh = o.shape
        return self.wo(o.transpose(0, 2, 1, 3).reshape(B, T, H * dh))

    def convolve(self, x2):
        return self.conv_residual(x2, self.ln_conv(x2))

    def conv_residual(self, x2, normed):
        c = ops.depthwise_conv1d(normed, self.conv_w, self.conv_b)
        return x2 + self.pointwise(ops.swish(c))

    def __call__(self, x, lengths):
        x1 = self.feed_forward(x)
        q, k, v = self.project_qkv(x1)
        mask = attention_mask(x.shape[1], lengths, self.right_context, self.left_context)
        x2 = x1 + self.attend(q, k, v, mask)
        return self.ln_out(self.convolve(x2))


class Encoder(Module):
    """Input projection, optional learned positions, blocks, optional 2x time reduction."""

    def __init__(self, cfg: EncoderConfig, rng):
        self.cfg = cfg
        D = cfg.model_dim
        self.in_proj = Linear(cfg.input_dim, D, rng)
        self.positions = Embedding(cfg.max_positions, D, rng) if cfg.max_positions else None
        self.blocks = [
            EncoderBlock(D, cfg.num_heads, cfg.conv_kernel, cfg.ff_mult, rc, cfg.left_context, rng)
            for rc in cfg.per_layer_right_context
        ]
        self.reduce_proj = Linear(2 * D, D, rng) if cfg.time_reduction_after else None
        self.final_norm = LayerNorm(D)

    def embed(self, x, start=0):
        h = self.in_proj(x)
        if self.positions is not None:
            T = x.shape[-2]
            if start + T > self.cfg.max_positions:
                raise ValueError(f"sequence longer than max_positions={self.cfg.max_positions}")
            h = h + self.positions(np.arange(start, start + T))
        return h

    def reduce(self, h, lengths):
        """Concatenate frame pairs (zero-padding an odd tail) and project back."""
        B, T, D = h.shape
        valid = (np.arange(T)[None, :] < np.asarray(lengths)[:, None])[..., None]
        h = h * Tensor(valid)
        if T % 2:
            h = ops.concat([h, Tensor(np.zeros((B, 1, D)))], axis=1)
        h = h.reshape(B, (T + 1) // 2, 2 * D)
        return self.reduce_proj(h), (np.asarray(lengths) + 1) // 2

    def __call__(self, x, lengths=None):
        """Encode ``x`` of shape ``(B, T, d_in)`` (or ``(T, d_in)``).

        Returns ``(output, tap, out_lengths)``.
        """
        x = ops.as_tensor(x) if not isinstance(x, Tensor) else x
        single = x.ndim == 2
        if single:
            x = x.reshape(1, *x.shape)
        if x.shape[1] < 1:
            raise ValueError("encoder: empty input")
        if x.shape[-1] != self.cfg.input_dim:
            raise ValueError(f"encoder: input dim {x.shape[-1]} != {self.cfg.input_dim}")
        lengths = np.full(x.shape[0], x.shape[1]) if lengths is None else np.asarray(lengths)
        h = self.embed(x)
        tap = None
        for i, block in enumerate(self.blocks, start=1):
            h = block(h, lengths)
            if i == self.cfg.tap_block:
                tap = h
            if i == self.cfg.time_reduction_after:
                h, lengths = self.reduce(h, lengths)
        out = self.final_norm(h)
        if single:
            out, tap = out[0], tap[0]
        return out, tap, lengths


# ---------------------------------------------------------------- streaming

class _BlockCache:
    """Rolling state for one block: past x1/k/v, pending queries, conv history."""

    def __init__(self, block: EncoderBlock, dim):
        self.block = block
        self.x1, self.q, self.k, self.v = [], [], [], []
        self.conv_hist = [np.zeros((1, 1, dim), dtype=block.ln_out.gamma.data.dtype)] * (block.kernel - 1)
        self.emitted = 0

    def push(self, frame):
        b = self.block
        x1 = b.feed_forward(Tensor(frame[None, None]))
        q, k, v = b.project_qkv(x1)
        self.x1.append(x1.data)
        self.q.append(q.data)
        self.k.append(k.data)
        self.v.append(v.data)
        out = []
        while self.emitted + b.right_context < len(self.x1):
            out.append(self._finalize())
        return out

    def flush(self):
        return [self._finalize() for _ in range(len(self.x1) - self.emitted)]

    def _finalize(self):
        b = self.block
        t = self.emitted
        hi = min(t + b.right_context, len(self.k) - 1) + 1
        lo = 0 if b.left_context is None else max(0, t - b.left_context)
        k = np.concatenate(self.k[lo:hi], axis=2)
        v = np.concatenate(self.v[lo:hi], axis=2)
        mask = np.ones((1, 1, 1, hi - lo), dtype=bool)
        x2 = Tensor(self.x1[t]) + b.attend(Tensor(self.q[t]), Tensor(k), Tensor(v), mask)
        normed = b.ln_conv(x2).data
        window = Tensor(np.concatenate(self.conv_hist + [normed], axis=1))
        c = ops.depthwise_conv1d(window, b.conv_w, b.conv_b)[:, -1:]
        x3 = x2 + b.pointwise(ops.swish(c))
        if b.kernel > 1:
            self.conv_hist = self.conv_hist[1:] + [normed]
        if b.left_context is not None:
            drop = t - b.left_context
            if drop >= 0:
                self.x1[drop] = self.q[drop] = None
        self.emitted += 1
        return b.ln_out(x3).data[0, 0]


class EncoderStream:
    """Incremental encoder: ``push`` one input frame, get finalized outputs.

    Each call returns a list of ``(output, tap)`` frame pairs; after the last
    frame, ``flush`` drains every pending frame.
    """

    def __init__(self, encoder: Encoder):
        self.encoder = encoder
        D = encoder.cfg.model_dim
        self.caches = [_BlockCache(b, D) for b in encoder.blocks]
        self.position = 0
        self.pair = []
        self.taps = []
        self.flushed = False

    def push(self, frame):
        if self.flushed:
            raise RuntimeError("stream already flushed")
        with no_grad():
            h = self.encoder.embed(Tensor(np.asarray(frame)[None, None]), start=self.position).data[0, 0]
            self.position += 1
            return self._run(0, [h], final=False)

    def flush(self):
        if self.flushed:
            raise RuntimeError("stream already flushed")
        self.flushed = True
        with no_grad():
            return self._run(0, [], final=True)

    def _run(self, start, frames, final):
        cfg = self.encoder.cfg
        results = []
        for i in range(start, len(self.caches)):
            cache = self.caches[i]
            nxt = []
            for f in frames:
                nxt.extend(cache.push(f))
            if final:
                nxt.extend(cache.flush())
            idx = i + 1
            if idx == cfg.tap_block:
                self.taps.extend(nxt)
            if idx == cfg.time_reduction_after:
                nxt = self._reduce(nxt, final)
            frames = nxt
        for f in frames:
            out = self.encoder.final_norm(Tensor(f)).data
            results.append((out, self.taps.pop(0)))
        return results

    def _reduce(self, frames, final):
        out = []
        self.pair.extend(frames)
        while len(self.pair) >= 2:
            a, b = self.pair[0], self.pair[1]
            del self.pair[:2]
            out.append(self.encoder.reduce_proj(Tensor(np.concatenate([a, b])[None])).data[0])
        if final and self.pair:
            a = self.pair.pop()
            out.append(self.encoder.reduce_proj(Tensor(np.concatenate([a, np.zeros_like(a)])[None])).data[0])
        return out
