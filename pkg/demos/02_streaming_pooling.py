"""Frame-synchronous statistics pooling: running mean and standard deviation.

Run: python demos/02_streaming_pooling.py
"""
import numpy as np

from cascade_lid.lid import PoolState, pool_stats, pool_update
from cascade_lid.verify import pooling_equivalence, pooling_oracle

rng = np.random.default_rng(1)
h = rng.normal(loc=3.0, size=(8, 2))

# %% One update per frame; only two running sums per dimension are kept
state = PoolState.empty(2)
batch = pooling_oracle(h)
print(" t   streaming [mu; sigma]                      two-pass oracle")
for t, frame in enumerate(h):
    state = pool_update(state, frame)
    print(f"{t:2d}  {np.array2string(pool_stats(state), precision=4)}  {np.array2string(batch[t], precision=4)}")

# %% The full equivalence suite at both precisions
for bits in (64, 32):
    print(pooling_equivalence(bits=bits).line())
