"""Spiking forward pass and accuracy evaluation.

Every convolution, projection and linear layer past the first downsampling
layer consumes binary spikes. The residual stream between blocks carries
membrane-level (real valued) signals, as in membrane-shortcut spiking
transformers. The network is unrolled over ``T`` timesteps with direct
(analog) input encoding and the head logits are averaged over time.

Attention is spike-driven Hadamard attention: Q, K and V are spike maps,
``K * V`` is summed over tokens per channel and passed through a spiking
neuron, and the result gates Q elementwise. No softmax and no matrix of
token-to-token scores is formed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .data import Dataset
from .errors import DatasetError, ModelConfigError
from .model import NetworkModel


@dataclass(frozen=True)
class NeuronState:
    """Leaky integrate-and-fire dynamics with hard reset to zero.

    ``v[t] = decay * v[t-1] + I[t]``; a spike is emitted when
    ``v[t] >= threshold`` and the potential is then set to 0.
    """

    threshold: float = 1.0
    decay: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.decay <= 1.0:
            raise ValueError(f"decay must lie in (0, 1], got {self.decay}")


DEFAULT_NEURON = NeuronState()
SURROGATE_ALPHA = 4.0


class _SpikeFn(torch.autograd.Function):
    """Heaviside forward, sigmoid-derivative backward."""

    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return (x >= 0).to(x.dtype)

    @staticmethod
    def backward(ctx, grad_out):
        (x,) = ctx.saved_tensors
        sg = torch.sigmoid(SURROGATE_ALPHA * x)
        return grad_out * SURROGATE_ALPHA * sg * (1.0 - sg)


def _heaviside(x: torch.Tensor) -> torch.Tensor:
    if x.requires_grad:
        return _SpikeFn.apply(x)
    return (x >= 0).to(x.dtype)


def lif(current: torch.Tensor, timesteps: int, neuron: NeuronState = DEFAULT_NEURON) -> torch.Tensor:
    """Run LIF neurons over a time-major batch ``(T*B, ...)``."""
    seq = current.reshape(timesteps, -1, *current.shape[1:])
    v = torch.zeros_like(seq[0])
    out = []
    for t in range(timesteps):
        v = neuron.decay * v + seq[t]
        s = _heaviside(v - neuron.threshold)
        v = v * (1.0 - s)
        out.append(s)
    return torch.stack(out).reshape(current.shape)


class _Runner:
    def __init__(self, params, model: NetworkModel, neuron: NeuronState, probe: Callable | None):
        self.params = params
        self.model = model
        self.T = model.timesteps
        self.neuron = neuron
        self.probe = probe

    def spike(self, x: torch.Tensor, where: str) -> torch.Tensor:
        s = lif(x, self.T, self.neuron)
        if self.probe is not None:
            self.probe(where, s)
        return s

    def conv(self, layer, x, groups=1):
        w, *rest = self.params[layer.id]
        b = rest[0] if layer.bias is not None else None
        pad = w.shape[-1] // 2
        return F.conv2d(x, w, b, stride=layer.stride, padding=pad, groups=groups)

    def linear(self, layer, x):
        w, b = self.params[layer.id]
        return F.conv2d(x, w[:, :, None, None], b)

    def conv_block(self, label, layers, x):
        by = {layer.name: layer for layer in layers}
        h = self.conv(by["pw1"], self.spike(x, f"{label}.pw1"))
        h = self.conv(by["dw"], self.spike(h, f"{label}.dw"), groups=h.shape[1])
        h = self.conv(by["pw2"], self.spike(h, f"{label}.pw2"))
        x = x + h
        h = self.conv(by["conv1"], self.spike(x, f"{label}.conv1"))
        h = self.conv(by["conv2"], self.spike(h, f"{label}.conv2"))
        return x + h

    def transformer_block(self, label, layers, x):
        by = {layer.name: layer for layer in layers}
        dim = x.shape[1]
        s = self.spike(x, f"{label}.in")
        wq, wk, wv = self.params[by["sdsa"].id]

        def project(rep, w, tag):
            h = self.conv(by[rep], s, groups=dim)
            return self.spike(F.conv2d(h, w[:, :, None, None]), f"{label}.{tag}")

        q = project("rep_q", wq, "q")
        k = project("rep_k", wk, "k")
        v = project("rep_v", wv, "v")
        kv = (k * v).sum(dim=(2, 3), keepdim=True)
        gate = self.spike(kv, f"{label}.kv")
        x = x + self.conv(by["rep_o"], q * gate)

        h = self.linear(by["fc1"], self.spike(x, f"{label}.fc1"))
        h = self.linear(by["fc2"], self.spike(h, f"{label}.fc2"))
        return x + h

    def run(self, images: torch.Tensor) -> torch.Tensor:
        n = images.shape[0]
        x = images.unsqueeze(0).expand(self.T, *images.shape).reshape(self.T * n, *images.shape[1:])
        first = True
        for label, layers in self.model.blocks():
            if label.startswith("DS_"):
                (layer,) = layers
                inp = x if first else self.spike(x, f"{label}.ds")
                x = self.conv(layer, inp)
                first = False
            elif label.startswith("CONV_"):
                x = self.conv_block(label, layers, x)
            elif label.startswith("TRAN_"):
                x = self.transformer_block(label, layers, x)
            else:
                raise ModelConfigError(f"cannot run block {label!r}")
        s = self.spike(x, "head")
        feat = s.mean(dim=(2, 3))
        hw, hb = self.params["head"]
        logits = feat @ hw.T + hb
        return logits.reshape(self.T, n, -1).mean(dim=0)


def torch_params(model: NetworkModel, requires_grad: bool = False) -> dict:
    params = {}
    for layer in model.layers:
        arrs = list(layer.weights) + ([layer.bias] if layer.bias is not None else [])
        params[layer.id] = [torch.tensor(np.array(a), requires_grad=requires_grad) for a in arrs]
    params["head"] = [
        torch.tensor(np.array(model.head_weight), requires_grad=requires_grad),
        torch.tensor(np.array(model.head_bias), requires_grad=requires_grad),
    ]
    return params


def _check_batch(model: NetworkModel, images: np.ndarray) -> None:
    cfg = model.config
    if cfg is None:
        raise ModelConfigError("model has no architecture config; it cannot be run")
    expected = (cfg.in_channels, *cfg.image_size)
    if images.ndim != 4 or tuple(images.shape[1:]) != expected:
        raise ModelConfigError(f"batch shape {images.shape} does not match model input (n, {expected})")


def forward_torch(model, params, images: torch.Tensor, neuron=DEFAULT_NEURON, probe=None) -> torch.Tensor:
    return _Runner(params, model, neuron, probe).run(images)


def forward(
    model: NetworkModel,
    images: np.ndarray,
    neuron: NeuronState = DEFAULT_NEURON,
    probe: Callable[[str, torch.Tensor], None] | None = None,
) -> np.ndarray:
    """Logits ``(n, classes)`` averaged over the model's timesteps.

    ``probe(name, spikes)`` is called with every spike tensor produced.
    """
    images = np.asarray(images, dtype=np.float32)
    _check_batch(model, images)
    with torch.no_grad():
        out = forward_torch(model, torch_params(model), torch.from_numpy(images), neuron, probe)
    return out.numpy()


def predict(model: NetworkModel, images: np.ndarray, batch_size: int = 256, neuron=DEFAULT_NEURON) -> np.ndarray:
    images = np.asarray(images, dtype=np.float32)
    _check_batch(model, images)
    params = torch_params(model)
    preds = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            chunk = torch.from_numpy(images[start : start + batch_size])
            logits = forward_torch(model, params, chunk, neuron).numpy()
            # np.argmax resolves ties to the lowest class index
            preds.append(np.argmax(logits, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate(model: NetworkModel, data: Dataset, batch_size: int = 256, neuron=DEFAULT_NEURON) -> float:
    """Top-1 accuracy in percent over every sample of ``data``."""
    if len(data) == 0:
        raise DatasetError("cannot evaluate on an empty dataset")
    preds = predict(model, data.images, batch_size, neuron)
    return 100.0 * int(np.sum(preds == data.labels)) / len(data)


class Evaluator:
    """``evaluate`` bound to a dataset, counting its invocations."""

    def __init__(self, data: Dataset, batch_size: int = 256, neuron: NeuronState = DEFAULT_NEURON):
        if len(data) == 0:
            raise DatasetError("cannot evaluate on an empty dataset")
        self.data = data
        self.batch_size = batch_size
        self.neuron = neuron
        self.calls = 0

    def __call__(self, model: NetworkModel) -> float:
        self.calls += 1
        return evaluate(model, self.data, self.batch_size, self.neuron)
