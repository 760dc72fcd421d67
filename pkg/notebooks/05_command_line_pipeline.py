# %% [markdown]
# # The `spikequant` command line
#
# Each subcommand is one stage writing into a run directory. A manifest
# records what every artifact was computed from, so re-running a finished
# stage is a no-op and a stage whose inputs changed is reported as stale.
# The same calls work from a shell, e.g.
# `spikequant pipeline --config tiny.cfg --output-dir runs/tiny`.

# %%
import json
import tempfile
from pathlib import Path

from spikequant.cli import main

work = Path(tempfile.mkdtemp())
(work / "tiny.cfg").write_text("""
[model]
channels = 8
image_size = 16x16
blocks_stage3 = 1
blocks_stage4 = 0
timesteps = 4
[train]
epochs = 5
learning_rate = 0.005
batch_size = 32
[data]
source = synthetic
synthetic_samples = 200
synthetic_classes = 4
[search]
bits = 32,8,4
subset_size = 40
""")
args = ["--config", str(work / "tiny.cfg"), "--output-dir", str(work / "run"), "--quiet"]

# %%
print("base before sweep ->", main(["base", *args]))  # 3: missing input
print("pipeline ->", main(["pipeline", *args]))
print(sorted(p.name for p in (work / "run").iterdir()))

# %%
report = json.loads((work / "run" / "report.json").read_text())
print(report["baseline_accuracy_percent"], "->", report["final_accuracy_percent"])
print(report["footprint"])
print(report["evaluations"])
