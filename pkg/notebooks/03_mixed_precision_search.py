# %% [markdown]
# # Searching for a mixed-precision setting
#
# 1. Sweep: quantize one layer at a time to each bit and measure accuracy.
# 2. Base settings: per layer, the highest and lowest bit that stay within
#    `delta` points of the baseline.
# 3. Guided exploration: walk each layer down from high to low in steps of 4.
# 4. Composite exploration: evaluate whole-network settings and keep, per
#    layer, the lowest bit seen in any setting that still qualifies.
#
# A small network on synthetic patterns keeps this to a couple of minutes.

# %%
from spikequant import (
    ModelConfig,
    ThresholdPolicy,
    build_quantized,
    build_toy_model,
    explore_composite,
    footprint_bytes,
    generate_synthetic,
    guided_explore,
    layerwise_sweep,
    select_base_settings,
    train_toy,
)
from spikequant.snn import Evaluator

cfg = ModelConfig(channels=8, image_size=(16, 16), blocks_stage3=1, blocks_stage4=0, num_classes=4)
data = generate_synthetic(seed=0, n=400, classes=4, image_size=(16, 16))
train, val = data.split(0.8, seed=0)
model = train_toy(build_toy_model(cfg, seed=0), train, epochs=5, seed=0, val_data=val, lr=5e-3, batch_size=32).model
evaluator = Evaluator(val)
policy = ThresholdPolicy(delta=5.0)

# %%
table = layerwise_sweep(model, evaluator, bits=(32, 16, 12, 8, 4))
print("baseline", table.baseline, "evaluations", evaluator.calls)
for u in table.units[:6]:
    print(table.labels[u], [round(table.acc(u, b), 1) for b in table.bits])

# %%
base = select_base_settings(table, policy)
print("high", list(base.high.values()))
print("low ", list(base.low.values()))

# %%
guided = guided_explore(model, evaluator, base, policy, baseline=table.baseline)
composite = explore_composite(model, evaluator, base, policy, guided=guided, baseline=table.baseline)
for c in composite.ranked[:5]:
    print(f"{c.name:14s} {c.accuracy:6.2f}%  {c.footprint_bytes:7d} B  qualifies={c.qualifies}")

# %%
final = build_quantized(model, composite.selected, evaluator, table.baseline, policy)
fp = footprint_bytes(final.model)
print(f"final accuracy {final.accuracy:.2f}% (baseline {table.baseline:.2f}%)")
print(f"footprint {fp.total_bytes} of {fp.reference_bytes} bytes, saving {fp.saving_percent:.1f}%")
