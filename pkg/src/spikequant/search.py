"""Mixed-precision search: sensitivity sweep, base settings, guided and composite exploration.

The search runs over *units*: groups of layer ids that always share one bit
precision (see :func:`spikequant.model.group_layers`). With the default
``"layer"`` granularity a unit is a single layer keyed by its id.

Accuracy thresholds are absolute percentage points: a setting qualifies when
``accuracy >= baseline - delta``.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Hashable, Iterable, Mapping, Sequence

from .errors import EvaluationError, SpecError
from .metrics import footprint_bytes
from .model import FULL_PRECISION, NetworkModel, group_layers
from .quant import QuantSpec, apply_setting, check_bit, quantize_layer

log = logging.getLogger(__name__)

BIT_AXIS = (32, 16, 12, 8, 4)
GUIDED_STEP = 4

Evaluator = Callable[[NetworkModel], float]


@dataclass(frozen=True)
class ThresholdPolicy:
    delta: float = 5.0

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError(f"delta must be positive, got {self.delta}")

    def threshold(self, baseline: float) -> float:
        return baseline - self.delta

    def accepts(self, accuracy: float, baseline: float) -> bool:
        return accuracy >= baseline - self.delta


@dataclass
class SensitivityTable:
    units: tuple
    bits: tuple = BIT_AXIS
    records: dict = field(default_factory=dict)
    baseline: float | None = None
    labels: dict = field(default_factory=dict)

    def __post_init__(self):
        self.units = tuple(self.units)
        self.bits = tuple(self.bits)
        for b in self.bits:
            check_bit(b)

    def acc(self, unit, bit) -> float:
        return self.records[(unit, bit)]

    def missing(self) -> list:
        return [(u, b) for u in self.units for b in self.bits if (u, b) not in self.records]

    def is_complete(self) -> bool:
        return not self.missing() and self.baseline is not None

    def require_complete(self) -> None:
        miss = self.missing()
        if miss:
            raise SpecError(f"sensitivity table is missing {len(miss)} cells, first {miss[:3]}")
        if self.baseline is None:
            raise SpecError("sensitivity table has no baseline accuracy")

    def to_dict(self) -> dict:
        return {
            "schema": "spikequant.sensitivity",
            "version": 1,
            "baseline_accuracy": self.baseline,
            "bits": list(self.bits),
            "units": list(self.units),
            "labels": [self.labels.get(u, str(u)) for u in self.units],
            "records": [
                {"unit": u, "bit": b, "accuracy": self.records[(u, b)]}
                for u in self.units
                for b in self.bits
                if (u, b) in self.records
            ],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: Mapping) -> "SensitivityTable":
        if d.get("schema") != "spikequant.sensitivity" or d.get("version") != 1:
            raise SpecError("not a version-1 sensitivity table document")
        units = tuple(d["units"])
        return cls(
            units=units,
            bits=tuple(d["bits"]),
            records={(r["unit"], r["bit"]): r["accuracy"] for r in d["records"]},
            baseline=d["baseline_accuracy"],
            labels=dict(zip(units, d.get("labels", []))),
        )

    @classmethod
    def loads(cls, text: str) -> "SensitivityTable":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class BaseSettings:
    high: dict
    low: dict

    def __post_init__(self):
        if set(self.high) != set(self.low):
            raise SpecError("high and low settings cover different units")

    @property
    def units(self) -> tuple:
        return tuple(self.high)

    def to_dict(self) -> dict:
        return {
            "schema": "spikequant.base_settings",
            "version": 1,
            "units": [{"unit": u, "high": self.high[u], "low": self.low[u]} for u in self.high],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: Mapping) -> "BaseSettings":
        if d.get("schema") != "spikequant.base_settings" or d.get("version") != 1:
            raise SpecError("not a version-1 base settings document")
        return cls({e["unit"]: e["high"] for e in d["units"]}, {e["unit"]: e["low"] for e in d["units"]})

    @classmethod
    def loads(cls, text: str) -> "BaseSettings":
        return cls.from_dict(json.loads(text))


def quantize_unit(model: NetworkModel, layer_ids: Iterable[int], bit: int, mode: str = "faithful") -> NetworkModel:
    for lid in layer_ids:
        model = quantize_layer(model, lid, bit, mode)
    return model


def _resolve_groups(model: NetworkModel, groups) -> dict:
    if groups is None:
        return group_layers(model, "layer")
    if isinstance(groups, str):
        return group_layers(model, groups)
    return dict(groups)


def _unit_labels(model: NetworkModel, groups: Mapping) -> dict:
    labels = {}
    for unit, ids in groups.items():
        if isinstance(unit, str):
            labels[unit] = unit
        else:
            layer = model.layer(ids[0])
            labels[unit] = f"{layer.block_label}.{layer.name}"
    return labels


def _evaluate(evaluator: Evaluator, model: NetworkModel, context: str) -> float:
    try:
        return float(evaluator(model))
    except EvaluationError:
        raise
    except Exception as exc:
        raise EvaluationError(f"evaluator failed at {context}: {exc}") from exc


def _run_cells(cells: Sequence, work: Callable, workers: int) -> list:
    if workers <= 1 or len(cells) <= 1:
        return [work(c) for c in cells]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(work, cells))


def layerwise_sweep(
    model: NetworkModel,
    evaluator: Evaluator,
    bits: Sequence[int] = BIT_AXIS,
    groups=None,
    mode: str = "faithful",
    resume: Mapping | None = None,
    on_cell: Callable[[Hashable, int, float], None] | None = None,
    workers: int = 1,
) -> SensitivityTable:
    """Accuracy with exactly one unit quantized, for every (unit, bit) cell.

    Every cell starts again from the unquantized ``model``. The baseline is
    the accuracy of the 32-bit cells (all identical by construction); when
    the axis has no 32 the baseline costs one extra evaluation. ``resume``
    supplies already-known cells, which are not re-evaluated. Cells are
    independent and may run on a thread pool; results are merged in
    (unit, bit) order.
    """
    groups = _resolve_groups(model, groups)
    bits = tuple(bits)
    for b in bits:
        check_bit(b)
    table = SensitivityTable(tuple(groups), bits, labels=_unit_labels(model, groups))
    known = dict(resume or {})
    todo = [(u, b) for u in groups for b in bits if (u, b) not in known]

    def work(cell):
        unit, bit = cell
        candidate = quantize_unit(model, groups[unit], bit, mode)
        acc = _evaluate(evaluator, candidate, f"unit {unit!r}, bit {bit}")
        if on_cell is not None:
            on_cell(unit, bit, acc)
        return acc

    results = dict(zip(todo, _run_cells(todo, work, workers)))
    for cell in ((u, b) for u in groups for b in bits):
        table.records[cell] = known[cell] if cell in known else results[cell]

    full = [table.records[(u, FULL_PRECISION)] for u in groups] if FULL_PRECISION in bits else []
    if full:
        if len(set(full)) != 1:
            raise EvaluationError(f"32-bit cells disagree ({sorted(set(full))}); evaluator is not deterministic")
        table.baseline = full[0]
    else:
        table.baseline = _evaluate(evaluator, model, "baseline")
    return table


def select_base_settings(table: SensitivityTable, policy: ThresholdPolicy = ThresholdPolicy()) -> BaseSettings:
    """Highest and lowest qualifying bit per unit.

    ``high`` is the highest qualifying precision strictly below 32 bits, or 32
    when no reduced precision qualifies; ``low`` is the lowest qualifying
    precision. A unit where nothing qualifies gets 32 for both.
    """
    table.require_complete()
    high, low = {}, {}
    for unit in table.units:
        ok = [b for b in table.bits if policy.accepts(table.acc(unit, b), table.baseline)]
        reduced = [b for b in ok if b < FULL_PRECISION]
        high[unit] = max(reduced) if reduced else FULL_PRECISION
        low[unit] = min(ok) if ok else FULL_PRECISION
    return BaseSettings(high, low)


def guided_candidates(high: int, low: int, axis: Sequence[int] = BIT_AXIS) -> list[int]:
    """Bits from ``high`` down to ``low`` in steps of 4 that exist on the axis."""
    out, b = [], high
    while b > low - 1:
        if b in axis:
            out.append(b)
        b -= GUIDED_STEP
    return out


def guided_explore(
    model: NetworkModel,
    evaluator: Evaluator,
    base: BaseSettings,
    policy: ThresholdPolicy = ThresholdPolicy(),
    groups=None,
    baseline: float | None = None,
    mode: str = "faithful",
    axis: Sequence[int] = BIT_AXIS,
    workers: int = 1,
) -> QuantSpec:
    """Lowest qualifying bit per unit within its [low, high] range.

    Starts from ``base.high``. For each unit every candidate bit (see
    :func:`guided_candidates`) is evaluated with only that unit quantized,
    and the lowest qualifying one is kept. The accuracy of each kept bit is
    recorded in ``meta["accuracy"]``.
    """
    groups = _resolve_groups(model, groups)
    missing = [u for u in groups if u not in base.high]
    if missing:
        raise SpecError(f"base settings have no entry for units {missing}")
    if baseline is None:
        baseline = _evaluate(evaluator, model, "baseline")

    cells = [(u, b) for u in groups for b in guided_candidates(base.high[u], base.low[u], axis)]

    def work(cell):
        unit, bit = cell
        return _evaluate(evaluator, quantize_unit(model, groups[unit], bit, mode), f"unit {unit!r}, bit {bit}")

    results = dict(zip(cells, _run_cells(cells, work, workers)))
    chosen = dict(base.high)
    stored = {}
    for (unit, bit), acc in results.items():
        log.debug("guided unit=%s bit=%d acc=%.4f", unit, bit, acc)
        if policy.accepts(acc, baseline) and bit <= chosen[unit]:
            chosen[unit] = bit
            stored[unit] = acc
    meta = {
        "baseline_accuracy": baseline,
        "evaluations": len(cells),
        "units": [{"unit": u, "bit": chosen[u], "accuracy": stored.get(u)} for u in groups],
    }
    return QuantSpec.from_units(groups, chosen, "guided", meta)


def unit_bits(spec: QuantSpec, groups: Mapping) -> dict:
    out = {}
    for unit, ids in groups.items():
        bits = {spec[i] for i in ids}
        if len(bits) != 1:
            raise SpecError(f"unit {unit!r} has mixed bits {sorted(bits)}")
        out[unit] = bits.pop()
    return out


@dataclass(frozen=True)
class Candidate:
    name: str
    spec: QuantSpec
    accuracy: float
    footprint_bytes: int
    qualifies: bool

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "accuracy": self.accuracy,
            "footprint_bytes": self.footprint_bytes,
            "qualifies": self.qualifies,
            "bits": [[lid, b] for lid, b in self.spec.assignment.items()],
        }


@dataclass(frozen=True)
class CompositeResult:
    ranked: tuple
    selected: QuantSpec
    baseline: float

    def to_dict(self) -> dict:
        return {
            "schema": "spikequant.composite",
            "version": 1,
            "baseline_accuracy": self.baseline,
            "ranked": [c.to_dict() for c in self.ranked],
        }


def composite_candidates(
    base: BaseSettings,
    strategy: str = "perturb",
    guided: Mapping | None = None,
    extra: Iterable[tuple[str, Mapping]] = (),
    axis: Sequence[int] = BIT_AXIS,
) -> list[tuple[str, dict]]:
    """Whole-network unit assignments to evaluate, in a fixed order.

    Always the two endpoints ``high`` and ``low``. ``"perturb"`` adds, for
    each unit and each axis bit in ``[low, high)``, the ``high`` setting with
    just that unit lowered to that bit. The guided result and any ``extra``
    settings follow. Duplicate assignments keep their first name.
    """
    if strategy not in ("endpoints", "perturb"):
        raise ValueError(f"unknown composite strategy {strategy!r}")
    out = [("high", dict(base.high)), ("low", dict(base.low))]
    if strategy == "perturb":
        for unit in base.units:
            for b in axis:
                if base.low[unit] <= b < base.high[unit]:
                    setting = dict(base.high)
                    setting[unit] = b
                    out.append((f"high[{unit}={b}]", setting))
    if guided is not None:
        out.append(("guided", dict(guided)))
    out.extend((name, dict(s)) for name, s in extra)
    seen, unique = set(), []
    for name, setting in out:
        key = tuple(sorted(setting.items(), key=lambda kv: str(kv[0])))
        if key not in seen:
            seen.add(key)
            unique.append((name, setting))
    return unique


def explore_composite(
    model: NetworkModel,
    evaluator: Evaluator,
    base: BaseSettings,
    policy: ThresholdPolicy = ThresholdPolicy(),
    strategy: str = "perturb",
    groups=None,
    guided: QuantSpec | None = None,
    extra: Iterable[tuple[str, Mapping]] = (),
    baseline: float | None = None,
    mode: str = "faithful",
    workers: int = 1,
) -> CompositeResult:
    """Evaluate whole-network settings between ``base.high`` and ``base.low``.

    Candidates are ranked qualifying-first, then by footprint ascending, then
    by accuracy descending, then by generation order. The selected spec takes
    for each unit the lowest bit found in any qualifying candidate; a bit that
    only ever appears in failing candidates is thereby excluded. When nothing
    qualifies the selection falls back to ``base.high``.
    """
    groups = _resolve_groups(model, groups)
    if baseline is None:
        baseline = _evaluate(evaluator, model, "baseline")
    guided_units = unit_bits(guided, groups) if guided is not None else None
    settings = composite_candidates(base, strategy, guided_units, extra)

    def work(item):
        name, setting = item
        spec = QuantSpec.from_units(groups, setting, "composite")
        acc = _evaluate(evaluator, apply_setting(model, spec, mode), f"composite {name}")
        return Candidate(name, spec, acc, footprint_bytes(model, spec).total_bytes, policy.accepts(acc, baseline))

    evaluated = _run_cells(settings, work, workers)
    order = {c.name: i for i, c in enumerate(evaluated)}
    ranked = sorted(evaluated, key=lambda c: (not c.qualifies, c.footprint_bytes, -c.accuracy, order[c.name]))

    good = [dict(s) for (_, s), c in zip(settings, evaluated) if c.qualifies]
    if good:
        selection = {u: min(s[u] for s in good) for u in groups}
    else:
        selection = dict(base.high)
    meta = {"baseline_accuracy": baseline, "qualifying": len(good), "evaluations": len(settings)}
    return CompositeResult(tuple(ranked), QuantSpec.from_units(groups, selection, "composite", meta), baseline)


@dataclass(frozen=True)
class BuildResult:
    model: NetworkModel
    accuracy: float
    baseline: float | None
    warning: str | None = None


def build_quantized(
    model: NetworkModel,
    spec: QuantSpec,
    evaluator: Evaluator,
    baseline: float | None = None,
    policy: ThresholdPolicy = ThresholdPolicy(),
    mode: str = "faithful",
) -> BuildResult:
    """Apply ``spec`` and evaluate once; warn when accuracy falls below threshold."""
    qmodel = apply_setting(model, spec, mode)
    acc = _evaluate(evaluator, qmodel, "final build")
    warning = None
    if baseline is not None and not policy.accepts(acc, baseline):
        warning = (
            f"quantized accuracy {acc:.2f}% is more than {policy.delta} points below "
            f"the baseline {baseline:.2f}%"
        )
        log.warning(warning)
    return BuildResult(qmodel, acc, baseline, warning)
