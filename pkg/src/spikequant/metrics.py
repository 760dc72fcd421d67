"""Memory footprint accounting and report / plot-data emission.

Byte math is integer-only. A layer stored at ``b`` bits costs
``ceil(weights * b / 8)`` bytes for its weights; biases and the
classification head always stay at 32 bits. "MB" in every human-facing
output means MiB (2**20 bytes).
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .errors import IntegrityError, SpecError
from .model import FULL_PRECISION, NetworkModel

MIB = 2**20


def bits_to_bytes(count: int, bit: int) -> int:
    return -(-count * bit // 8)


def to_mib(n_bytes: int) -> float:
    return n_bytes / MIB


def saving_percent(reference: float, total: float) -> float:
    if reference <= 0:
        raise ValueError("reference footprint must be positive")
    return 100.0 * (reference - total) / reference


@dataclass(frozen=True)
class LayerFootprint:
    layer: object
    weight_params: int
    fixed_params: int
    bit: int
    bytes: int


@dataclass(frozen=True)
class FootprintBreakdown:
    rows: tuple
    fixed_bytes: int  # parameters outside any row (the head), always 32-bit
    total_bytes: int
    reference_bytes: int

    @property
    def saving_percent(self) -> float:
        if self.reference_bytes == 0:
            return 0.0
        return saving_percent(self.reference_bytes, self.total_bytes)

    @property
    def total_mib(self) -> float:
        return to_mib(self.total_bytes)

    @property
    def reference_mib(self) -> float:
        return to_mib(self.reference_bytes)

    def to_dict(self) -> dict:
        return {
            "unit": "bytes",
            "total_bytes": self.total_bytes,
            "reference_bytes": self.reference_bytes,
            "total_MiB": round(self.total_mib, 6),
            "reference_MiB": round(self.reference_mib, 6),
            "saving_percent": round(self.saving_percent, 6),
            "fixed_bytes": self.fixed_bytes,
            "layers": [
                {
                    "layer": r.layer,
                    "weight_params": r.weight_params,
                    "fixed_params": r.fixed_params,
                    "bit": r.bit,
                    "bytes": r.bytes,
                }
                for r in self.rows
            ],
        }


def footprint_from_counts(
    weight_counts: Mapping,
    bits: Mapping,
    fixed_counts: Mapping | None = None,
    extra_params: int = 0,
) -> FootprintBreakdown:
    """Footprint from raw parameter counts.

    ``weight_counts`` and ``bits`` are keyed alike; ``fixed_counts`` gives
    per-key parameters that stay at 32 bits (biases); ``extra_params`` are
    32-bit parameters outside every key (the head).
    """
    fixed_counts = fixed_counts or {}
    missing = [k for k in weight_counts if k not in bits]
    if missing:
        raise SpecError(f"no bit assignment for {missing}")
    rows = []
    for key, count in weight_counts.items():
        fixed = int(fixed_counts.get(key, 0))
        nbytes = bits_to_bytes(int(count), int(bits[key])) + fixed * 4
        rows.append(LayerFootprint(key, int(count), fixed, int(bits[key]), nbytes))
    fixed_bytes = int(extra_params) * 4
    total = sum(r.bytes for r in rows) + fixed_bytes
    reference = sum(bits_to_bytes(r.weight_params, FULL_PRECISION) + r.fixed_params * 4 for r in rows) + fixed_bytes
    return FootprintBreakdown(tuple(rows), fixed_bytes, total, reference)


def footprint_bytes(model: NetworkModel, spec=None) -> FootprintBreakdown:
    """Footprint of ``model`` under ``spec`` (default: its current precision map)."""
    bits = dict(model.precision_map) if spec is None else dict(getattr(spec, "assignment", spec))
    weights = {layer.id: layer.weight_count for layer in model.layers}
    fixed = {layer.id: (0 if layer.bias is None else int(layer.bias.size)) for layer in model.layers}
    head = sum(int(a.size) for a in (model.head_weight, model.head_bias) if a is not None)
    return footprint_from_counts(weights, bits, fixed, head)


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunReport:
    run_id: str
    seed: int
    config_digest: str
    quant_mode: str
    baseline_accuracy: float
    final_accuracy: float
    threshold_delta: float
    evaluation_subset: dict
    footprint: FootprintBreakdown
    artifacts: dict = field(default_factory=dict)  # name -> path relative to base_dir
    stages: dict = field(default_factory=dict)
    evaluations: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    base_dir: Path | None = None

    def resolve(self, rel) -> Path:
        return (self.base_dir or Path(".")) / rel

    def to_dict(self) -> dict:
        artifacts = {}
        for name, rel in self.artifacts.items():
            path = self.resolve(rel)
            if not path.exists():
                raise IntegrityError(f"report references missing artifact {name!r} at {path}")
            artifacts[name] = {"path": str(rel), "sha256": sha256_file(path)}
        fp = self.footprint
        return {
            "schema": "spikequant.report",
            "version": 1,
            "run_id": self.run_id,
            "seed": self.seed,
            "config_digest": self.config_digest,
            "quant_mode": self.quant_mode,
            "threshold_delta_points": self.threshold_delta,
            "evaluation_subset": self.evaluation_subset,
            "baseline_accuracy_percent": self.baseline_accuracy,
            "final_accuracy_percent": self.final_accuracy,
            "accuracy_drop_points": round(self.baseline_accuracy - self.final_accuracy, 6),
            "footprint": {
                "total_bytes": fp.total_bytes,
                "reference_bytes": fp.reference_bytes,
                "total_MiB": round(fp.total_mib, 6),
                "reference_MiB": round(fp.reference_mib, 6),
                "saving_percent": round(fp.saving_percent, 6),
            },
            "stages": self.stages,
            "evaluations": self.evaluations,
            "warnings": list(self.warnings),
            "artifacts": artifacts,
        }


def _write_text(path, text: str) -> Path:
    path = Path(path)
    try:
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(text, encoding="utf-8", newline="\n")
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path


def emit_report(report: RunReport, path) -> Path:
    return _write_text(path, json.dumps(report.to_dict(), indent=2) + "\n")


def verify_report(path) -> dict:
    """Reload a report and check every referenced artifact's hash."""
    path = Path(path)
    doc = json.loads(path.read_text())
    for name, entry in doc["artifacts"].items():
        target = path.parent / entry["path"]
        if not target.exists():
            raise IntegrityError(f"artifact {name!r} missing at {target}")
        if sha256_file(target) != entry["sha256"]:
            raise IntegrityError(f"artifact {name!r} at {target} does not match its recorded hash")
    return doc


def _csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def emit_plot_data(table, path) -> Path:
    """One row per (unit, bit): the per-block accuracy-vs-bit series."""
    rows = [
        (u, table.labels.get(u, u), b, f"{table.acc(u, b):.6f}")
        for u in table.units
        for b in table.bits
    ]
    return _write_text(path, _csv(rows, ["unit", "block_label", "bit [bit]", "accuracy [%]"]))


def emit_composite_plot_data(candidates, path) -> Path:
    """One row per evaluated composite setting."""
    rows = [(c.name, f"{c.accuracy:.6f}", c.footprint_bytes, int(c.qualifies)) for c in candidates]
    return _write_text(path, _csv(rows, ["setting", "accuracy [%]", "footprint [bytes]", "qualifies [bool]"]))
