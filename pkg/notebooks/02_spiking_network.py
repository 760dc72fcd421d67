# %% [markdown]
# # The toy spike-driven network
#
# Four stages: downsampling convolutions, separable-conv blocks in stages 1-2,
# transformer blocks with spike-driven attention in stages 3-4. Every layer
# with weights is a quantization candidate.

# %%
import collections

import numpy as np

from spikequant import ModelConfig, build_toy_model, enumerate_quantizable_layers, forward, load_digits, param_count
from spikequant.checkpoint import from_bytes, to_bytes

model = build_toy_model(ModelConfig(channels=8, blocks_stage3=2, blocks_stage4=1), seed=0)
rows = enumerate_quantizable_layers(model)
print(len(rows), "layers,", param_count(model), "parameters")
for lid, kind, label, count in rows[:14]:
    print(f"{lid:3d} {kind.value:10s} {label:12s} {count:6d}")

# %% [markdown]
# Neurons are leaky integrate-and-fire units, unrolled over T timesteps. A
# probe sees every spike tensor; all of them are binary.

# %%
data = load_digits().subset(8, 0)
rates = collections.OrderedDict()
logits = forward(model, data.images, probe=lambda name, s: rates.setdefault(name, float(s.mean())))
print(logits.shape)
for name, rate in list(rates.items())[-8:]:
    print(f"{name:22s} firing rate {rate:.3f}")

# %% [markdown]
# Checkpoints are a small binary format: magic, version, a JSON header, then
# little-endian float32 weights in layer order.

# %%
blob = to_bytes(model)
print(blob[:4], len(blob), "bytes")
back = from_bytes(blob)
print(all(np.array_equal(a, b) for (_, a), (_, b) in zip(model.tensors(), back.tensors())))
