"""
Frame-by-frame streaming
========================

Push 8-sample frames through a causal model and compare with the offline
forward pass.  The algorithmic latency is one encoder window.
"""

import numpy as np

from binsep.model import ModelConfig, SeparationModel
from binsep.stream import benchmark_stream, flush, open_stream, push_frame

model = SeparationModel(ModelConfig(variant="mask_and_sum", hidden_channels=64, bottleneck_channels=32,
                                    tcn_repeats=2, blocks_per_repeat=4), seed=0)
state = open_stream(model)
print("latency", state.latency_samples, "samples =", state.latency_ms, "ms")

rng = np.random.default_rng(0)
x = 0.1 * rng.standard_normal((2, 4000))
outs = []
for start in range(0, x.shape[1], state.hop):
    y = push_frame(state, x[0, start:start + state.hop], x[1, start:start + state.hop])
    if y is not None:
        outs.append(y)
outs.append(flush(state))
streamed = np.concatenate(outs, axis=2)

offline = model.forward_binaural_tensor(x[0], x[1]).data[0].transpose(1, 0, 2)
print("max |stream - offline|", np.max(np.abs(streamed - offline)))
print("state bytes", state.nbytes())

###############################################################################
# Wall-clock cost per frame against the 1 ms frame budget.

for k, v in benchmark_stream(model, duration_s=1.0).items():
    print(f"{k:30s} {v}")
