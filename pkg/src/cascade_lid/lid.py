"""Frame-synchronous language identification.

Streaming statistics pooling keeps float64 running sums of ``h`` and ``h**2``; at
frame ``t`` the mean is ``sum/t`` and the variance is
``(sum_sq - 2*mu*sum + t*mu**2) / t`` clamped at zero. The pooled
``[mu; sigma]`` goes through two ReLU FC layers and a softmax output layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Linear, Module, Tensor, custom_op, ops

LID_MODES = ("z", "argmax", "sg", "cluster")


@dataclass(frozen=True)
class PoolState:
    running_sum: np.ndarray
    running_sq_sum: np.ndarray
    frame_count: int = 0

    @classmethod
    def empty(cls, dim):
        return cls(np.zeros(dim), np.zeros(dim), 0)


def pool_update(state: PoolState, h_t) -> PoolState:
    h_t = np.asarray(h_t, dtype=np.float64)
    if h_t.shape != state.running_sum.shape:
        raise ValueError(f"pool_update: dimension mismatch {h_t.shape} vs {state.running_sum.shape}")
    return PoolState(state.running_sum + h_t, state.running_sq_sum + h_t * h_t, state.frame_count + 1)


def pool_variance_raw(state: PoolState) -> np.ndarray:
    """Unclamped variance from the running sums."""
    t = state.frame_count
    if t == 0:
        raise ValueError("pool_stats: no frames pooled yet")
    mu = state.running_sum / t
    return (state.running_sq_sum - 2.0 * mu * state.running_sum + t * mu * mu) / t


def pool_stats(state: PoolState) -> np.ndarray:
    """``[mu_t; sigma_t]`` for the frames pooled so far."""
    var = pool_variance_raw(state)
    mu = state.running_sum / state.frame_count
    return np.concatenate([mu, np.sqrt(np.maximum(var, 0.0))])


def _rev_cumsum(a, axis):
    return np.flip(np.cumsum(np.flip(a, axis), axis=axis), axis)


def streaming_stats(h):
    """Differentiable per-prefix pooling: ``(B, T, D) -> (B, T, 2D)``.

    Output frame ``t`` uses exactly ``h[:, :t+1]``. Sums are accumulated in
    float64 whatever the working precision, as in :class:`PoolState`.
    """
    h = h if isinstance(h, Tensor) else Tensor(h)
    x = h.data.astype(np.float64)
    T = x.shape[-2]
    count = np.arange(1, T + 1, dtype=np.float64)[:, None]
    s = np.cumsum(x, axis=-2)
    sq = np.cumsum(x * x, axis=-2)
    mu = s / count
    var = (sq - 2.0 * mu * s + count * mu * mu) / count
    sigma = np.sqrt(np.maximum(var, 0.0))

    def backward(g):
        g = g.astype(np.float64)
        D = x.shape[-1]
        g_mu, g_sigma = g[..., :D], g[..., D:]
        safe = np.where(sigma > 0, sigma, 1.0)
        g_var = np.where(sigma > 0, g_sigma / (2.0 * safe), 0.0)
        # d mu_t / d x_s = 1/t ; d var_t / d x_s = 2 (x_s - mu_t) / t   for s <= t
        a = _rev_cumsum(g_mu / count, -2)
        b = _rev_cumsum(g_var / count, -2)
        c = _rev_cumsum(g_var * mu / count, -2)
        return ((a + 2.0 * x * b - 2.0 * c).astype(h.dtype),)

    out = np.concatenate([mu, sigma], axis=-1).astype(h.dtype)
    return custom_op(out, (h,), backward, "streaming_stats")


class LidHead(Module):
    """Optional streaming pooling, two ReLU FC layers, softmax output over locales."""

    def __init__(self, feat_dim, hidden, num_classes, rng, pooling=True):
        self.pooling = pooling
        self.feat_dim = feat_dim
        d_in = 2 * feat_dim if pooling else feat_dim
        self.fc1 = Linear(d_in, hidden, rng)
        self.fc2 = Linear(hidden, hidden, rng)
        self.out = Linear(hidden, num_classes, rng)

    def logits(self, feats):
        """Per-frame logits for already-pooled (or raw, without pooling) features."""
        return self.out(ops.relu(self.fc2(ops.relu(self.fc1(feats)))))

    def __call__(self, h):
        """Frame-aligned logits ``(B, T, K)`` from a feature sequence ``(B, T, D)``."""
        feats = streaming_stats(h) if self.pooling else h
        return self.logits(feats)

    def lid_forward(self, stats) -> np.ndarray:
        """``z_t`` for one pooled stats vector (numpy in, numpy out)."""
        stats = np.asarray(stats)
        expected = 2 * self.feat_dim if self.pooling else self.feat_dim
        if stats.shape[-1] != expected:
            raise ValueError(f"lid_forward: stats dim {stats.shape[-1]} != {expected}")
        z = ops.softmax(self.logits(Tensor(np.atleast_2d(stats)))).data
        return z.reshape(stats.shape[:-1] + z.shape[-1:])


def one_hot(index, size, dtype=np.float64):
    out = np.zeros(np.shape(index) + (size,), dtype=dtype)
    np.put_along_axis(out, np.asarray(index)[..., None], 1.0, axis=-1)
    return out


def cluster_matrix(cluster_map, locales, clusters):
    """``(K, C)`` 0/1 matrix mapping locale index to cluster index."""
    M = np.zeros((len(locales), len(clusters)))
    for i, loc in enumerate(locales):
        M[i, clusters.index(cluster_map.get(loc, loc))] = 1.0
    return M


def lid_feature(z, mode, cluster_mat=None):
    """Vector fed downstream from the LID distribution ``z`` (``(..., K)``).

    ``z``        -- the distribution itself.
    ``argmax``   -- one-hot of argmax (lowest index wins ties), straight-through gradient.
    ``sg``       -- the same one-hot with no gradient into ``z``.
    ``cluster``  -- one-hot of the argmax locale's cluster, straight-through to cluster mass.
    """
    z = z if isinstance(z, Tensor) else Tensor(z)
    if mode == "z":
        return z
    if mode in ("argmax", "sg"):
        hard = one_hot(np.argmax(z.data, axis=-1), z.shape[-1], z.dtype)
        feat = ops.straight_through(hard, z)
        return ops.stop_gradient(feat) if mode == "sg" else feat
    if mode == "cluster":
        if cluster_mat is None:
            raise ValueError("cluster mode needs a cluster map")
        M = np.asarray(cluster_mat, dtype=z.dtype)
        hard = one_hot(np.argmax(z.data, axis=-1), z.shape[-1], z.dtype) @ M
        return ops.straight_through(hard, ops.matmul(z, Tensor(M)))
    raise ValueError(f"unknown LID mode {mode!r}")


def lid_loss(z, labels) -> float:
    """Mean over frames of ``-ln z_t[label]`` for probability rows ``z``."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels))
    if labels.min() < 0 or labels.max() >= z.shape[-1]:
        raise ValueError("lid_loss: label index out of range")
    picked = np.take_along_axis(z, labels[:, None], axis=-1)[:, 0]
    with np.errstate(divide="ignore"):
        return float(np.mean(-np.log(picked)))


def lid_loss_from_logits(logits, labels, mask):
    """Frame-mean cross-entropy over valid frames of a padded batch.

    ``logits`` ``(B, T, K)``, ``labels`` ``(B,)`` (one locale per utterance),
    ``mask`` ``(B, T)`` booleans.
    """
    labels = np.asarray(labels)
    K = logits.shape[-1]
    if labels.min() < 0 or labels.max() >= K:
        raise ValueError("lid_loss: label index out of range")
    logp = ops.log_softmax(logits)
    target = one_hot(np.broadcast_to(labels[:, None], mask.shape), K) * mask[..., None]
    return -(logp * Tensor(target)).sum() * (1.0 / mask.sum())
