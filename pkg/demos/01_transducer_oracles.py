"""Transducer loss and decoding against their exhaustive oracles.

Run: python demos/01_transducer_oracles.py
"""
import math

import numpy as np

from cascade_lid.nn import Tensor, grad, precision
from cascade_lid.transducer import (DecoderConfig, TransducerDecoder, beam_decode, count_alignments,
                                    exhaustive_decode, greedy_decode, rnnt_loss, rnnt_loss_bruteforce)

rng = np.random.default_rng(0)

# %% The forward-backward loss sums over every monotonic alignment.
# The last step is always a blank from frame T-1, so for T frames and U
# labels there are C(T-1+U, U) of them.
T, U, V = 4, 2, 3
print("alignments for T=4, U=2:", count_alignments(T, U), "=", math.comb(T - 1 + U, U))

with precision(64):
    logits = rng.normal(scale=2.0, size=(T, U + 1, V + 1))
    y = np.array([2, 1])
    dp = rnnt_loss(Tensor(logits), y).item()
    brute = rnnt_loss_bruteforce(logits, y)
    print(f"DP loss {dp:.12f}  enumeration {brute:.12f}  |diff| {abs(dp - brute):.1e}")

    # %% Analytic gradient vs central differences on one cell
    x = Tensor(logits, requires_grad=True)
    (g,) = grad(rnnt_loss(x, y), [x])
    eps = 1e-6
    bump = np.zeros_like(logits)
    bump[1, 1, 2] = eps
    fd = (rnnt_loss_bruteforce(logits + bump, y) - rnnt_loss_bruteforce(logits - bump, y)) / (2 * eps)
    print(f"d loss / d logits[1,1,2]: analytic {g[1, 1, 2]:.9f}  finite-diff {fd:.9f}")

# %% Decoding: width-1 beam is greedy; a very wide beam finds the exhaustive best
dec = TransducerDecoder(4, DecoderConfig(vocab_size=2, embed_dim=4, hidden_dim=5, num_layers=1, pred_dim=4,
                                         joint_dim=6, max_symbols_per_frame=2), rng)
frames = rng.normal(scale=2.0, size=(3, 4))
g = greedy_decode(dec, frames)
print("greedy     ", g.tokens, f"{g.score:.4f}")
for k in (1, 4, 1000):
    b = beam_decode(dec, frames, k)
    print(f"beam k={k:<5}", b.tokens, f"{b.score:.4f}")
ex = exhaustive_decode(dec, frames)
print("exhaustive ", ex.tokens, f"{ex.score:.4f}")
