# %% [markdown]
# # Memory footprint accounting
#
# A layer at b bits costs `ceil(weights * b / 8)` bytes; biases and the
# classifier head stay at 32 bits. MB means MiB throughout.

# %%
from spikequant import QuantSpec, build_toy_model, footprint_bytes
from spikequant.metrics import MIB, footprint_from_counts, saving_percent

print(f"55.4M parameters at 32 bits: {55.4e6 * 4 / MIB:.1f} MiB")
print(f"211 MB -> 163 MB saves {saving_percent(211, 163):.2f}%")

# %%
fp = footprint_from_counts({"a": 1000, "b": 250}, {"a": 4, "b": 12}, extra_params=10)
for row in fp.rows:
    print(row)
print(fp.total_bytes, fp.reference_bytes, f"{fp.saving_percent:.1f}%")

# %% [markdown]
# On the toy network, by uniform precision and by a block-keyed setting.

# %%
model = build_toy_model(seed=0)
for b in (32, 16, 12, 8, 4):
    f = footprint_bytes(model, QuantSpec.uniform(model, b))
    print(f"{b:2d} bits  {f.total_bytes:8d} B  saving {f.saving_percent:5.1f}%")

blocks = {
    "DS_S1_B1": 8, "CONV_S1_B1": 4, "DS_S1_B2": 8, "CONV_S1_B2": 8,
    "DS_S2": 12, "CONV_S2_B1": 8, "CONV_S2_B2": 8,
    "DS_S3": 4, "TRAN_S3_Bx": 32, "DS_S4": 4, "TRAN_S4_Bx": 32,
}
f = footprint_bytes(model, QuantSpec.from_blocks(model, blocks))
print(f"block setting: {f.total_bytes} B, saving {f.saving_percent:.1f}%")
