"""Network representation for four-stage spike-driven transformers.

A :class:`NetworkModel` is an immutable, ordered list of quantizable layers
grouped into stages and blocks, plus an unquantized classification head.
Weights are plain ``float32`` numpy arrays marked read-only; every
transformation in the toolkit returns a new model that shares the arrays it
did not touch.
"""

from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import InvalidLayerError, ModelConfigError

FULL_PRECISION = 32

# total spatial reduction of the downsampling chain (stages 1-3 halve, stage 4 keeps)
DOWNSAMPLE_FACTOR = 16


class LayerKind(str, enum.Enum):
    CONV = "conv"
    DWCONV = "dwconv"
    PWCONV = "pwconv"
    REPCONV = "repconv"
    LINEAR = "linear"
    SDSA = "sdsa"


SDSA_TENSORS = ("W_Q", "W_K", "W_V")


def _frozen(a) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float32)
    if arr.flags.writeable or not arr.flags.c_contiguous:
        arr = np.array(arr, dtype=np.float32, order="C")
        arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class LayerDescriptor:
    """One quantizable layer.

    ``weights`` holds a single tensor for every kind except ``sdsa``, which
    carries the query/key/value projections in that order. ``name`` is the
    role of the layer inside its block (``"pw1"``, ``"rep_q"``, ...) and is
    what the runtime dispatches on.
    """

    id: int
    kind: LayerKind
    weights: tuple
    stage: int
    block_label: str
    name: str
    bias: np.ndarray | None = None
    stride: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kind", LayerKind(self.kind))
        object.__setattr__(self, "weights", tuple(_frozen(w) for w in self.weights))
        if self.bias is not None:
            object.__setattr__(self, "bias", _frozen(self.bias))
        expected = 3 if self.kind is LayerKind.SDSA else 1
        if len(self.weights) != expected:
            raise ModelConfigError(
                f"layer {self.id} ({self.kind.value}) needs {expected} weight tensor(s), "
                f"got {len(self.weights)}"
            )

    @property
    def weight_names(self) -> tuple[str, ...]:
        return SDSA_TENSORS if self.kind is LayerKind.SDSA else ("W",)

    @property
    def weight_count(self) -> int:
        return sum(int(w.size) for w in self.weights)

    @property
    def param_count(self) -> int:
        return self.weight_count + (0 if self.bias is None else int(self.bias.size))

    def with_weights(self, weights: Sequence[np.ndarray]) -> "LayerDescriptor":
        return replace(self, weights=tuple(weights))


@dataclass(frozen=True)
class ModelConfig:
    """Architecture parameters of the scaled-down four-stage network.

    Channel widths follow the reference progression C, 2C, 4C, 8C, 10C.
    Stage 1 holds two (downsampling, CONV block) pairs and stage 2 one
    downsampling layer plus two CONV blocks; only the transformer block
    counts of stages 3 and 4 are free.
    """

    channels: int = 8
    image_size: tuple = (32, 32)
    in_channels: int = 1
    blocks_stage3: int = 2
    blocks_stage4: int = 1
    num_classes: int = 10
    timesteps: int = 4
    mlp_ratio: int = 2
    conv_ratio: int = 2

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(s) for s in self.image_size))

    def validate(self) -> None:
        for name in ("channels", "in_channels", "num_classes", "timesteps", "mlp_ratio", "conv_ratio"):
            if getattr(self, name) <= 0:
                raise ModelConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("blocks_stage3", "blocks_stage4"):
            if getattr(self, name) < 0:
                raise ModelConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if len(self.image_size) != 2 or min(self.image_size) <= 0:
            raise ModelConfigError(f"image_size must be two positive ints, got {self.image_size}")
        h, w = self.image_size
        if h % DOWNSAMPLE_FACTOR or w % DOWNSAMPLE_FACTOR:
            raise ModelConfigError(
                f"input resolution {h}x{w} is not divisible by the downsampling factor {DOWNSAMPLE_FACTOR}"
            )

    @property
    def stage_channels(self) -> tuple[int, int, int, int, int]:
        c = self.channels
        return (c, 2 * c, 4 * c, 8 * c, 10 * c)

    def to_dict(self) -> dict:
        return {
            "channels": self.channels,
            "image_size": list(self.image_size),
            "in_channels": self.in_channels,
            "blocks_stage3": self.blocks_stage3,
            "blocks_stage4": self.blocks_stage4,
            "num_classes": self.num_classes,
            "timesteps": self.timesteps,
            "mlp_ratio": self.mlp_ratio,
            "conv_ratio": self.conv_ratio,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**{k: (tuple(v) if k == "image_size" else v) for k, v in d.items()})


@dataclass(frozen=True)
class NetworkModel:
    layers: tuple
    head_weight: np.ndarray | None = None
    head_bias: np.ndarray | None = None
    config: ModelConfig | None = None
    precision_map: Mapping[int, int] = field(default_factory=dict)
    dataset_tag: str = ""
    timesteps: int = 4

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        for pos, layer in enumerate(layers, start=1):
            if layer.id != pos:
                raise ModelConfigError(f"layer ids must be contiguous 1..L in order; position {pos} has id {layer.id}")
        if self.head_weight is not None:
            object.__setattr__(self, "head_weight", _frozen(self.head_weight))
        if self.head_bias is not None:
            object.__setattr__(self, "head_bias", _frozen(self.head_bias))
        pm = {int(k): int(v) for k, v in self.precision_map.items()} or {
            layer.id: FULL_PRECISION for layer in layers
        }
        if set(pm) != {layer.id for layer in layers}:
            raise ModelConfigError("precision_map must cover every layer id exactly once")
        object.__setattr__(self, "precision_map", MappingProxyType(dict(sorted(pm.items()))))
        if self.config is not None:
            object.__setattr__(self, "timesteps", self.config.timesteps)
        if self.timesteps < 1:
            raise ModelConfigError("timesteps must be >= 1")

    def __len__(self) -> int:
        return len(self.layers)

    def layer(self, layer_id: int) -> LayerDescriptor:
        if not isinstance(layer_id, (int, np.integer)) or not 1 <= layer_id <= len(self.layers):
            raise InvalidLayerError(f"no layer with id {layer_id!r} (model has {len(self.layers)})")
        return self.layers[layer_id - 1]

    @property
    def stages(self) -> dict[int, dict[str, list[int]]]:
        """``stage -> block_label -> [layer ids]`` in forward order."""
        out: dict[int, dict[str, list[int]]] = {}
        for layer in self.layers:
            out.setdefault(layer.stage, {}).setdefault(layer.block_label, []).append(layer.id)
        return out

    def blocks(self) -> list[tuple[str, list[LayerDescriptor]]]:
        out: list[tuple[str, list[LayerDescriptor]]] = []
        for layer in self.layers:
            if out and out[-1][0] == layer.block_label:
                out[-1][1].append(layer)
            else:
                out.append((layer.block_label, [layer]))
        return out

    def replace_layers(self, new_layers: Mapping[int, LayerDescriptor], precision: Mapping[int, int]) -> "NetworkModel":
        layers = tuple(new_layers.get(layer.id, layer) for layer in self.layers)
        pm = dict(self.precision_map)
        pm.update(precision)
        return replace(self, layers=layers, precision_map=pm)

    def with_precision(self, precision: Mapping[int, int]) -> "NetworkModel":
        return self.replace_layers({}, precision)

    def tensors(self) -> Iterable[tuple[str, np.ndarray]]:
        """Every stored array with a stable name, in payload order."""
        for layer in self.layers:
            for wname, w in zip(layer.weight_names, layer.weights):
                yield f"{layer.id}.{wname}", w
            if layer.bias is not None:
                yield f"{layer.id}.bias", layer.bias
        if self.head_weight is not None:
            yield "head.W", self.head_weight
        if self.head_bias is not None:
            yield "head.bias", self.head_bias


def enumerate_quantizable_layers(model: NetworkModel) -> list[tuple[int, LayerKind, str, int]]:
    """``(id, kind, block_label, param_count)`` for every layer in forward order.

    ``param_count`` counts weights only (all three projections for an SDSA
    layer); biases are never quantized.
    """
    return [(layer.id, layer.kind, layer.block_label, layer.weight_count) for layer in model.layers]


def param_count(model: NetworkModel) -> int:
    total = sum(layer.param_count for layer in model.layers)
    for arr in (model.head_weight, model.head_bias):
        if arr is not None:
            total += int(arr.size)
    return total


_TRAN_RE = re.compile(r"^TRAN_S(\d+)_B\d+$")


def group_layers(model: NetworkModel, granularity: str = "layer") -> dict:
    """Partition layer ids into search units.

    ``"layer"`` makes every layer its own unit keyed by id. ``"block"`` keys
    units by block label. ``"coarse"`` is ``"block"`` with all transformer
    blocks of a stage merged under ``TRAN_Sm_Bx``, the grouping the reference
    sensitivity study reports results in.
    """
    if granularity == "layer":
        return {layer.id: (layer.id,) for layer in model.layers}
    if granularity not in ("block", "coarse"):
        raise ValueError(f"unknown granularity {granularity!r}")
    groups: dict[str, list[int]] = {}
    for layer in model.layers:
        label = layer.block_label
        if granularity == "coarse":
            m = _TRAN_RE.match(label)
            if m:
                label = f"TRAN_S{m.group(1)}_Bx"
        groups.setdefault(label, []).append(layer.id)
    return {k: tuple(v) for k, v in groups.items()}


# --------------------------------------------------------------------------
# toy architecture
# --------------------------------------------------------------------------


class _Builder:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.layers: list[LayerDescriptor] = []

    def _uniform(self, shape, fan_in):
        bound = math.sqrt(6.0 / fan_in)
        return self.rng.uniform(-bound, bound, size=shape).astype(np.float32)

    def _bias(self, n, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return self.rng.uniform(-bound, bound, size=n).astype(np.float32)

    def add(self, kind, stage, label, name, shape, stride=1, bias=True):
        fan_in = int(np.prod(shape[1:]))
        w = self._uniform(shape, fan_in)
        b = self._bias(shape[0], fan_in) if bias else None
        self.layers.append(
            LayerDescriptor(
                id=len(self.layers) + 1,
                kind=kind,
                weights=(w,),
                bias=b,
                stage=stage,
                block_label=label,
                name=name,
                stride=stride,
            )
        )

    def add_sdsa(self, stage, label, dim):
        ws = tuple(self._uniform((dim, dim), dim) for _ in SDSA_TENSORS)
        self.layers.append(
            LayerDescriptor(
                id=len(self.layers) + 1,
                kind=LayerKind.SDSA,
                weights=ws,
                stage=stage,
                block_label=label,
                name="sdsa",
            )
        )

    def downsample(self, stage, label, cin, cout, stride):
        self.add(LayerKind.CONV, stage, label, "ds", (cout, cin, 3, 3), stride=stride)

    def conv_block(self, stage, label, dim, ratio):
        hidden = ratio * dim
        self.add(LayerKind.PWCONV, stage, label, "pw1", (hidden, dim, 1, 1))
        self.add(LayerKind.DWCONV, stage, label, "dw", (hidden, 1, 3, 3))
        self.add(LayerKind.PWCONV, stage, label, "pw2", (dim, hidden, 1, 1))
        self.add(LayerKind.CONV, stage, label, "conv1", (hidden, dim, 3, 3))
        self.add(LayerKind.CONV, stage, label, "conv2", (dim, hidden, 3, 3))

    def transformer_block(self, stage, label, dim, ratio):
        self.add(LayerKind.REPCONV, stage, label, "rep_q", (dim, 1, 3, 3))
        self.add(LayerKind.REPCONV, stage, label, "rep_k", (dim, 1, 3, 3))
        self.add(LayerKind.REPCONV, stage, label, "rep_v", (dim, 1, 3, 3))
        self.add_sdsa(stage, label, dim)
        self.add(LayerKind.REPCONV, stage, label, "rep_o", (dim, dim, 3, 3))
        self.add(LayerKind.LINEAR, stage, label, "fc1", (ratio * dim, dim))
        self.add(LayerKind.LINEAR, stage, label, "fc2", (dim, ratio * dim))


def build_toy_model(config: ModelConfig | None = None, seed: int = 0, **overrides) -> NetworkModel:
    """Build a randomly initialized network with the four-stage block layout.

    Weights use fan-in scaled uniform initialization drawn from a generator
    seeded with ``seed``.
    """
    config = replace(config or ModelConfig(), **overrides)
    config.validate()
    c1, c2, c3, c4, c5 = config.stage_channels
    b = _Builder(np.random.default_rng(seed))

    b.downsample(1, "DS_S1_B1", config.in_channels, c1, stride=2)
    b.conv_block(1, "CONV_S1_B1", c1, config.conv_ratio)
    b.downsample(1, "DS_S1_B2", c1, c2, stride=2)
    b.conv_block(1, "CONV_S1_B2", c2, config.conv_ratio)

    b.downsample(2, "DS_S2", c2, c3, stride=2)
    b.conv_block(2, "CONV_S2_B1", c3, config.conv_ratio)
    b.conv_block(2, "CONV_S2_B2", c3, config.conv_ratio)

    b.downsample(3, "DS_S3", c3, c4, stride=2)
    for i in range(config.blocks_stage3):
        b.transformer_block(3, f"TRAN_S3_B{i + 1}", c4, config.mlp_ratio)

    b.downsample(4, "DS_S4", c4, c5, stride=1)
    for i in range(config.blocks_stage4):
        b.transformer_block(4, f"TRAN_S4_B{i + 1}", c5, config.mlp_ratio)

    head_w = b._uniform((config.num_classes, c5), c5) / math.sqrt(6.0)
    head_b = np.zeros(config.num_classes, dtype=np.float32)
    return NetworkModel(layers=tuple(b.layers), head_weight=head_w, head_bias=head_b, config=config)

