# %% [markdown]
# # Integer weight quantization
#
# A tensor is mapped to b-bit integer codes through one scale factor
# `S = (w_max - w_min) / (Q_max - Q_min)`. The model keeps the reconstruction
# `code * S` in float32, which is what "simulated quantization" means here.

# %%
import numpy as np

from spikequant import compute_scale, dequantize, quant_range, quantize_tensor

for b in (4, 8, 12, 16):
    print(b, "bits ->", quant_range(b))

# %% [markdown]
# The smallest worked example: three values spanning [-1, 1] at 8 bits.

# %%
q = quantize_tensor(np.array([-1.0, 0.0, 1.0]), 8)
print("scale", q.params.scale, "= 2/255:", np.isclose(q.params.scale, 2 / 255))
print("codes", q.q_data.tolist())
print("reconstruction", dequantize(q))

# %% [markdown]
# Fewer bits mean a coarser grid. With a symmetric range the rounding error
# never exceeds half a step.

# %%
rng = np.random.default_rng(0)
w = rng.normal(0, 0.1, size=10_000)
for b in (16, 12, 8, 4):
    q = quantize_tensor(w, b, mode="symmetric")
    err = np.abs(dequantize(q) - w)
    print(f"{b:2d} bits  S={q.params.scale:.2e}  max err={err.max():.2e}  S/2={q.params.scale / 2:.2e}")

# %% [markdown]
# A constant tensor has no range. It is flagged as degenerate and survives
# quantization exactly.

# %%
p = compute_scale(np.full(5, 0.3), 8)
print(p.degenerate, dequantize(quantize_tensor(np.full(5, 0.3), 8)))
