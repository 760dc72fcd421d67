"""Integer weight quantization and its simulated (dequantized) application.

For a bit precision ``b`` the integer range is ``[-2**(b-1), 2**(b-1) - 1]``
and the scale is the observed weight range divided by the integer range::

    S = (w_max - w_min) / (Q_max - Q_min)
    q = clamp(round(w / S), Q_min, Q_max)

There is no zero point, so an asymmetric tensor clamps at one end; the
optional ``symmetric`` mode widens the observed range to ``±max|w|`` first.
Rounding is half away from zero. Quantized layers hold ``q * S`` as float32
(simulated quantization); the integer codes only feed footprint accounting.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import InvalidLayerError, QuantizationError, SpecError, UnsupportedBitError
from .model import FULL_PRECISION, NetworkModel, group_layers

QUANT_BITS = (4, 8, 12, 16)
SUPPORTED_BITS = (*QUANT_BITS, FULL_PRECISION)
MODES = ("faithful", "symmetric")

# |fractional part - 0.5| below this counts as a tie; absorbs float64 noise in w / S
_TIE_EPS = 1e-9


@dataclass(frozen=True)
class QuantParams:
    bit: int
    scale: float
    q_min: int
    q_max: int
    w_min: float
    w_max: float
    degenerate: bool = False
    mode: str = "faithful"


@dataclass(frozen=True)
class QuantizedTensor:
    shape: tuple
    q_data: np.ndarray
    params: QuantParams


def quant_range(b: int) -> tuple[int, int]:
    if b not in QUANT_BITS:
        raise UnsupportedBitError(f"unsupported bit precision {b!r}; expected one of {QUANT_BITS}")
    return -(2 ** (b - 1)), 2 ** (b - 1) - 1


def check_bit(b: int) -> int:
    if b not in SUPPORTED_BITS:
        raise UnsupportedBitError(f"unsupported bit precision {b!r}; expected one of {SUPPORTED_BITS}")
    return b


def compute_scale(t: np.ndarray, b: int, mode: str = "faithful") -> QuantParams:
    """Scale and integer range for quantizing ``t`` at ``b`` bits.

    A constant tensor has no range to divide; it gets ``scale = 1.0`` and
    ``degenerate=True`` and quantizes to all-zero codes.
    """
    q_min, q_max = quant_range(b)
    t = np.asarray(t)
    if t.size == 0:
        raise QuantizationError("cannot quantize an empty tensor")
    if mode not in MODES:
        raise QuantizationError(f"unknown quantization mode {mode!r}")
    if not np.all(np.isfinite(t)):
        raise QuantizationError("cannot quantize a tensor with non-finite values")
    if mode == "symmetric":
        m = float(np.max(np.abs(t)))
        w_min, w_max = -m, m
    else:
        w_min, w_max = float(np.min(t)), float(np.max(t))
    if w_max == w_min:
        return QuantParams(b, 1.0, q_min, q_max, w_min, w_max, degenerate=True, mode=mode)
    return QuantParams(b, (w_max - w_min) / (q_max - q_min), q_min, q_max, w_min, w_max, mode=mode)


def round_half_away(x: np.ndarray) -> np.ndarray:
    a = np.abs(x)
    fl = np.floor(a)
    frac = a - fl
    up = (frac > 0.5) | (np.abs(frac - 0.5) < _TIE_EPS)
    return np.sign(x) * (fl + up)


def quantize_tensor(t: np.ndarray, b: int, mode: str = "faithful") -> QuantizedTensor:
    t = np.asarray(t)
    params = compute_scale(t, b, mode)
    if params.degenerate:
        codes = np.zeros(t.shape, dtype=np.int32)
    else:
        codes = round_half_away(t.astype(np.float64) / params.scale)
        codes = np.clip(codes, params.q_min, params.q_max).astype(np.int32)
    return QuantizedTensor(tuple(t.shape), codes, params)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    """``code * S`` in float64; a degenerate tensor comes back as its constant."""
    if q.params.degenerate:
        return np.full(q.shape, q.params.w_min, dtype=np.float64)
    return q.q_data.astype(np.float64) * q.params.scale


def fake_quantize(t: np.ndarray, b: int, mode: str = "faithful") -> np.ndarray:
    """Simulated quantization: the reconstruction stored back as float32 weights."""
    if b == FULL_PRECISION:
        return t
    return dequantize(quantize_tensor(t, b, mode)).astype(np.float32)


def quantize_layer(model: NetworkModel, layer_id: int, b: int, mode: str = "faithful") -> NetworkModel:
    """Return ``model`` with one layer's weights replaced by their simulated quantization.

    SDSA layers quantize W_Q, W_K and W_V one after another, each with its
    own scale. At 32 bits the weights are left as they are and only the
    precision map changes. Biases are never touched.
    """
    check_bit(b)
    layer = model.layer(layer_id)
    if b == FULL_PRECISION:
        return model.with_precision({layer.id: b})
    new = layer.with_weights([fake_quantize(w, b, mode) for w in layer.weights])
    return model.replace_layers({layer.id: new}, {layer.id: b})


@dataclass(frozen=True)
class QuantSpec:
    """A bit precision for every layer of a model, plus where it came from."""

    assignment: Mapping[int, int]
    provenance: str = "manual"
    meta: Mapping = field(default_factory=dict)

    def __post_init__(self):
        a = {int(k): check_bit(int(v)) for k, v in self.assignment.items()}
        object.__setattr__(self, "assignment", dict(sorted(a.items())))

    def __getitem__(self, layer_id: int) -> int:
        return self.assignment[layer_id]

    def __len__(self) -> int:
        return len(self.assignment)

    @classmethod
    def uniform(cls, model: NetworkModel, b: int, provenance: str = "manual") -> "QuantSpec":
        return cls({layer.id: b for layer in model.layers}, provenance)

    @classmethod
    def from_units(cls, groups: Mapping, unit_bits: Mapping, provenance: str, meta=None) -> "QuantSpec":
        """Expand a per-unit assignment (see ``group_layers``) to layers."""
        missing = [u for u in groups if u not in unit_bits]
        if missing:
            raise SpecError(f"no bit for units {missing}")
        assignment = {lid: unit_bits[u] for u, ids in groups.items() for lid in ids}
        return cls(assignment, provenance, dict(meta or {}))

    @classmethod
    def from_blocks(cls, model: NetworkModel, block_bits: Mapping[str, int], provenance: str = "manual") -> "QuantSpec":
        """Bits keyed by block label; ``TRAN_Sm_Bx`` labels cover every transformer block of stage m."""
        for granularity in ("block", "coarse"):
            groups = group_layers(model, granularity)
            if set(block_bits) <= set(groups):
                unknown = set(groups) - set(block_bits)
                if unknown:
                    raise SpecError(f"spec is missing blocks {sorted(unknown)}")
                return cls.from_units(groups, block_bits, provenance)
        unknown = set(block_bits) - set(group_layers(model, "block")) - set(group_layers(model, "coarse"))
        raise SpecError(f"spec names unknown blocks {sorted(unknown)}")

    def validate_for(self, model: NetworkModel) -> None:
        ids = {layer.id for layer in model.layers}
        missing = sorted(ids - set(self.assignment))
        extra = sorted(set(self.assignment) - ids)
        if missing:
            raise SpecError(f"spec has no bit for layers {missing}")
        if extra:
            raise InvalidLayerError(f"spec names unknown layers {extra}")

    def to_dict(self, model: NetworkModel | None = None) -> dict:
        layers = []
        for lid, b in self.assignment.items():
            entry = {"id": lid, "bit": b}
            if model is not None:
                layer = model.layer(lid)
                entry = {"id": lid, "block_label": layer.block_label, "kind": layer.kind.value, "bit": b}
            layers.append(entry)
        return {
            "schema": "spikequant.quantspec",
            "version": 1,
            "provenance": self.provenance,
            "meta": dict(self.meta),
            "layers": layers,
        }

    def dumps(self, model: NetworkModel | None = None) -> str:
        return json.dumps(self.to_dict(model), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: Mapping, model: NetworkModel | None = None) -> "QuantSpec":
        if d.get("schema") != "spikequant.quantspec":
            raise SpecError("not a quant spec document")
        if d.get("version") != 1:
            raise SpecError(f"unsupported quant spec version {d.get('version')!r}")
        if "blocks" in d:
            if model is None:
                raise SpecError("a block-keyed spec needs the model to expand it")
            spec = cls.from_blocks(model, d["blocks"], d.get("provenance", "manual"))
            return cls(spec.assignment, spec.provenance, d.get("meta", {}))
        return cls({e["id"]: e["bit"] for e in d["layers"]}, d.get("provenance", "manual"), d.get("meta", {}))

    @classmethod
    def loads(cls, text: str, model: NetworkModel | None = None) -> "QuantSpec":
        return cls.from_dict(json.loads(text), model)


def apply_setting(model: NetworkModel, spec: QuantSpec | Mapping[int, int], mode: str = "faithful") -> NetworkModel:
    """Quantize every layer at its assigned bit, in forward order."""
    if not isinstance(spec, QuantSpec):
        spec = QuantSpec(spec)
    spec.validate_for(model)
    out = model
    for layer in model.layers:
        out = quantize_layer(out, layer.id, spec[layer.id], mode)
    return out
