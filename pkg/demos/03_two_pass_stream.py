"""Two-pass streaming: the 1st pass emits with no lookahead, the 2nd pass
R_total encoder frames later, with a LID decision at every frame.

Run: python demos/03_two_pass_stream.py [checkpoint dataset]

Without arguments a random (untrained) model is used, which still shows
the emission timing.
"""
import sys

import numpy as np

from cascade_lid.cascade import CascadeModel
from cascade_lid.synthdata import Dataset, GeneratorConfig, generate
from cascade_lid.training import load_checkpoint
from cascade_lid.verify import probe_config

if len(sys.argv) == 3:
    model, _, _ = load_checkpoint(sys.argv[1])
    utt = Dataset.read(sys.argv[2]).utterances[0]
else:
    model = CascadeModel(probe_config("fig1a"), np.random.default_rng(0))
    utt = generate(GeneratorConfig(), 1, seed=0).utterances[0]

R = model.cfg.total_right_context
print(f"locale {utt.locale}, {len(utt.features)} raw frames, R_total = {R} encoder frames")

# %% Push raw frames one at a time and record when each encoder frame is finalized
sess = model.stream_session()
first_ready, second_ready = {}, {}
for i, frame in enumerate(utt.features):
    for ev in sess.push(frame):
        (first_ready if "first_pass" in ev else second_ready)[ev["frame"]] = i
sess.flush()

for t in sorted(second_ready)[:8]:
    print(f"enc frame {t:3d}: 1st pass at raw frame {first_ready[t]:3d}, "
          f"2nd pass at raw frame {second_ready[t]:3d} (= when enc frame {t + R} arrived)")

# %% Offline decoding gives the same tokens and the same LID trace
res = sess.result()
off = model.forward_two_pass(utt.features)
print("1st pass equal:", res.first_pass == off.first_pass, " 2nd pass equal:", res.second_pass == off.second_pass)
print("max |z_stream - z_offline|:", float(np.max(np.abs(res.z - off.z))))
locs = model.cfg.locales
print("LID at frames 0, mid, last:", [locs[int(np.argmax(res.z[k]))] for k in (0, len(res.z) // 2, -1)])
