import numpy as np
import pytest
import torch
from scipy.stats import binom

from spikequant import Dataset, load_digits, NeuronState, build_toy_model, evaluate, forward
from spikequant.errors import DatasetError, ModelConfigError
from spikequant.model import ModelConfig
from spikequant.snn import Evaluator, lif, predict


def test_lif_dynamics_by_hand():
    # one neuron, T=4, constant input 0.6: v = 0.6, 0.9, 1.05 -> spike, reset, 0.6
    current = torch.full((4, 1), 0.6)
    assert lif(current, 4).flatten().tolist() == [0.0, 0.0, 1.0, 0.0]
    strong = torch.full((4, 1), 1.0)
    assert lif(strong, 4).flatten().tolist() == [1.0, 1.0, 1.0, 1.0]


def test_neuron_rejects_bad_decay():
    with pytest.raises(ValueError):
        NeuronState(decay=0.0)


def test_every_spike_tensor_is_binary(tiny_model, tiny_data):
    seen = []

    def probe(name, spikes):
        vals = torch.unique(spikes)
        assert set(vals.tolist()) <= {0.0, 1.0}, name
        seen.append(name)

    forward(tiny_model, tiny_data.images[:8], probe=probe)
    assert any(n.endswith(".q") for n in seen) and any(n.endswith(".kv") for n in seen)
    assert "head" in seen


def test_zero_weights_give_identical_logits_for_every_input(tiny_model, tiny_data):
    zeroed = tiny_model.replace_layers({l.id: l.with_weights([np.zeros_like(w) for w in l.weights]) for l in tiny_model.layers}, {})
    logits = forward(zeroed, tiny_data.images[:6])
    assert np.all(logits == logits[0])


@pytest.mark.parametrize("timesteps", [1, 4])
def test_logit_shape_does_not_depend_on_timesteps(timesteps, tiny_data):
    cfg = ModelConfig(channels=4, image_size=(16, 16), blocks_stage3=1, blocks_stage4=0, timesteps=timesteps)
    model = build_toy_model(cfg, seed=0)
    assert forward(model, tiny_data.images[:5]).shape == (5, 10)


def test_forward_is_deterministic(tiny_model, tiny_data):
    a = forward(tiny_model, tiny_data.images[:16])
    b = forward(tiny_model, tiny_data.images[:16])
    assert a.tobytes() == b.tobytes()


def test_accuracy_invariant_to_sample_order(tiny_model, tiny_data, rng):
    perm = rng.permutation(len(tiny_data))
    shuffled = Dataset(tiny_data.images[perm], tiny_data.labels[perm], tiny_data.num_classes, tiny_data.tag)
    assert evaluate(tiny_model, shuffled) == evaluate(tiny_model, tiny_data)


def test_batching_does_not_change_predictions(tiny_model, tiny_data):
    assert np.array_equal(predict(tiny_model, tiny_data.images, 7), predict(tiny_model, tiny_data.images, 256))


def test_untrained_model_is_near_chance():
    data = load_digits().subset(400, 0)
    lo, hi = (100 * binom.ppf(q, len(data), 0.1) / len(data) for q in (0.0005, 0.9995))
    for seed in range(3):
        assert lo <= evaluate(build_toy_model(seed=seed), data) <= hi


def test_batch_shape_is_checked(tiny_model):
    with pytest.raises(ModelConfigError):
        forward(tiny_model, np.zeros((2, 1, 32, 32), dtype=np.float32))


def test_evaluator_counts_calls(tiny_model, tiny_data):
    ev = Evaluator(tiny_data)
    ev(tiny_model)
    ev(tiny_model)
    assert ev.calls == 2
    with pytest.raises(DatasetError):
        Evaluator(tiny_data.take(slice(0, 0)))
