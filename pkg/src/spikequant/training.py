"""Minimal surrogate-gradient trainer that produces the pre-trained network."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F

from .data import Dataset
from .errors import TrainingDivergedError
from .model import NetworkModel
from .snn import DEFAULT_NEURON, NeuronState, evaluate, forward_torch, torch_params

log = logging.getLogger(__name__)


@dataclass
class TrainResult:
    model: NetworkModel
    val_accuracy: float | None
    history: list = field(default_factory=list)


def train_toy(
    model: NetworkModel,
    train_data: Dataset,
    epochs: int,
    seed: int,
    val_data: Dataset | None = None,
    lr: float = 2e-3,
    batch_size: int = 64,
    neuron: NeuronState = DEFAULT_NEURON,
) -> TrainResult:
    """Adam on cross-entropy through the spiking forward pass.

    Spikes use a sigmoid surrogate derivative in the backward pass only.
    Shuffling comes from ``seed``; torch runs with deterministic algorithms,
    so identical arguments give bit-identical weights. ``epochs=0`` returns
    the input model untouched.
    """
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    if epochs == 0:
        acc = evaluate(model, val_data, neuron=neuron) if val_data is not None else None
        return TrainResult(model, acc)

    torch.use_deterministic_algorithms(True)
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    params = torch_params(model, requires_grad=True)
    leaves = [p for group in params.values() for p in group]
    opt = torch.optim.Adam(leaves, lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=epochs)
    images = torch.from_numpy(train_data.images)
    labels = torch.from_numpy(train_data.labels)
    history = []

    for epoch in range(epochs):
        order = torch.from_numpy(rng.permutation(len(train_data)))
        total, correct, seen = 0.0, 0, 0
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            logits = forward_torch(model, params, images[idx], neuron)
            loss = F.cross_entropy(logits, labels[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"loss became {loss.item()} at epoch {epoch}, batch starting at {start}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            correct += int((logits.argmax(1) == labels[idx]).sum())
            seen += len(idx)
        sched.step()
        record = {"epoch": epoch + 1, "loss": total / seen, "train_accuracy": 100.0 * correct / seen}
        history.append(record)
        log.info("epoch %d loss %.4f train acc %.2f%%", epoch + 1, record["loss"], record["train_accuracy"])

    trained = _export(model, params)
    for arr in (a for _, a in trained.tensors()):
        if not np.all(np.isfinite(arr)):
            raise TrainingDivergedError("trained weights contain non-finite values")
    acc = evaluate(trained, val_data, neuron=neuron) if val_data is not None else None
    return TrainResult(trained, acc, history)


def _export(model: NetworkModel, params: dict) -> NetworkModel:
    layers = []
    for layer in model.layers:
        arrs = [p.detach().numpy().copy() for p in params[layer.id]]
        nw = len(layer.weights)
        layers.append(replace(layer, weights=tuple(arrs[:nw]), bias=arrs[nw] if layer.bias is not None else None))
    hw, hb = (p.detach().numpy().copy() for p in params["head"])
    return replace(model, layers=tuple(layers), head_weight=hw, head_bias=hb)
