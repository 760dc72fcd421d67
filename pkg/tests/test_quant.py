import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from spikequant import (
    QuantSpec,
    apply_setting,
    compute_scale,
    dequantize,
    quant_range,
    quantize_layer,
    quantize_tensor,
)
from spikequant.errors import InvalidLayerError, QuantizationError, SpecError, UnsupportedBitError
from spikequant.model import LayerKind
from spikequant.quant import fake_quantize, round_half_away

BITS = (4, 8, 12, 16)

finite = st.floats(-1e3, 1e3, allow_nan=False, width=32)
tensors = arrays(np.float32, st.integers(1, 64), elements=finite)


@pytest.mark.parametrize("b,expected", [(4, (-8, 7)), (8, (-128, 127)), (12, (-2048, 2047)), (16, (-32768, 32767))])
def test_quant_range(b, expected):
    assert quant_range(b) == expected


@pytest.mark.parametrize("b", [0, 3, 5, 32, 64])
def test_quant_range_rejects_other_bits(b):
    with pytest.raises(UnsupportedBitError):
        quant_range(b)


def test_worked_example_8bit():
    q = quantize_tensor(np.array([-1.0, 0.0, 1.0]), 8)
    assert q.params.scale == pytest.approx(2 / 255, abs=0)
    assert q.q_data.tolist() == [-128, 0, 127]
    np.testing.assert_allclose(dequantize(q), np.array([-128, 0, 127]) * (2 / 255), atol=1e-6)


def test_worked_example_4bit_scale():
    p = compute_scale(np.array([-0.5, 0.25, 1.5]), 4)
    assert p.scale == pytest.approx(2 / 15)
    assert (p.q_min, p.q_max) == (-8, 7)


def test_ties_round_away_from_zero():
    assert round_half_away(np.array([0.5, -0.5, 1.5, -2.5, 0.49])).tolist() == [1, -1, 2, -3, 0]
    # 7.5 computed in floating point lands a hair below the tie
    q = quantize_tensor(np.array([-1.0, 1.0]), 4)
    assert q.q_data.tolist() == [-8, 7]


def test_constant_tensor_is_degenerate_but_exact():
    q = quantize_tensor(np.full((3, 2), 0.25), 8)
    assert q.params.degenerate
    assert q.params.scale == 1.0
    assert not q.q_data.any()
    np.testing.assert_array_equal(dequantize(q), np.full((3, 2), 0.25))


@pytest.mark.parametrize("bad", [np.array([]), np.array([0.0, np.nan]), np.array([np.inf, 1.0])])
def test_unquantizable_tensors(bad):
    with pytest.raises(QuantizationError):
        quantize_tensor(bad, 8)


def test_unknown_mode():
    with pytest.raises(QuantizationError):
        quantize_tensor(np.array([0.0, 1.0]), 8, mode="asymmetric")


@settings(max_examples=200, deadline=None)
@given(tensors, st.sampled_from(BITS))
def test_codes_in_range_and_shape_kept(t, b):
    q = quantize_tensor(t, b)
    lo, hi = quant_range(b)
    assert q.q_data.shape == t.shape
    assert q.q_data.min() >= lo and q.q_data.max() <= hi
    assert fake_quantize(t, b).dtype == np.float32


@settings(max_examples=200, deadline=None)
@given(tensors, st.sampled_from(BITS))
def test_symmetric_mode_error_bound(t, b):
    q = quantize_tensor(t, b, mode="symmetric")
    if q.params.degenerate:
        return
    err = np.abs(dequantize(q) - t)
    assert np.all(err <= q.params.scale / 2 + 1e-9 * max(1.0, float(np.max(np.abs(t)))))


def test_quantize_layer_touches_only_its_layer(toy_model):
    q = quantize_layer(toy_model, 7, 4)
    for a, b in zip(toy_model.layers, q.layers):
        same = all(x is y for x, y in zip(a.weights, b.weights))
        assert same == (a.id != 7)
        assert a.bias is b.bias
    assert q.precision_map[7] == 4
    assert sum(v != 32 for v in q.precision_map.values()) == 1
    assert toy_model.precision_map[7] == 32


def test_sdsa_tensors_get_their_own_scales(toy_model):
    layer = next(l for l in toy_model.layers if l.kind == LayerKind.SDSA)
    q = quantize_layer(toy_model, layer.id, 8).layer(layer.id)
    for w, wq in zip(layer.weights, q.weights):
        np.testing.assert_array_equal(wq, fake_quantize(w, 8))
    assert len({compute_scale(w, 8).scale for w in layer.weights}) == 3


def test_32_bits_is_identity(toy_model):
    q = quantize_layer(toy_model, 3, 32)
    assert all(x is y for x, y in zip(toy_model.layer(3).weights, q.layer(3).weights))
    with pytest.raises(UnsupportedBitError):
        quantize_layer(toy_model, 3, 6)
    with pytest.raises(InvalidLayerError):
        quantize_layer(toy_model, 99, 8)


def test_apply_setting_equals_layer_by_layer(tiny_model, rng):
    bits = {l.id: int(rng.choice([32, 16, 12, 8, 4])) for l in tiny_model.layers}
    via_spec = apply_setting(tiny_model, QuantSpec(bits))
    manual = tiny_model
    for lid, b in bits.items():
        manual = quantize_layer(manual, lid, b)
    for (_, x), (_, y) in zip(via_spec.tensors(), manual.tensors()):
        assert x.tobytes() == y.tobytes()
    assert dict(via_spec.precision_map) == bits


def test_apply_setting_requires_full_coverage(tiny_model):
    bits = {l.id: 8 for l in tiny_model.layers[1:]}
    with pytest.raises(SpecError):
        apply_setting(tiny_model, bits)
    with pytest.raises(InvalidLayerError):
        apply_setting(tiny_model, {**{l.id: 8 for l in tiny_model.layers}, 999: 8})


def test_block_keyed_spec_covers_the_coarse_grouping(toy_model):
    final = {
        "DS_S1_B1": 8, "CONV_S1_B1": 4, "DS_S1_B2": 8, "CONV_S1_B2": 8,
        "DS_S2": 12, "CONV_S2_B1": 8, "CONV_S2_B2": 8,
        "DS_S3": 4, "TRAN_S3_Bx": 32, "DS_S4": 4, "TRAN_S4_Bx": 32,
    }
    spec = QuantSpec.from_blocks(toy_model, final)
    assert len(spec) == 46
    for layer in toy_model.layers:
        key = layer.block_label if not layer.block_label.startswith("TRAN") else layer.block_label[:7] + "_Bx"
        assert spec[layer.id] == final[key]
    doc = {"schema": "spikequant.quantspec", "version": 1, "blocks": final}
    assert QuantSpec.from_dict(doc, toy_model).assignment == spec.assignment
    with pytest.raises(SpecError):
        QuantSpec.from_blocks(toy_model, {k: v for k, v in final.items() if k != "DS_S4"})


def test_spec_serialization_round_trip(toy_model):
    spec = QuantSpec({l.id: (8 if l.id % 2 else 16) for l in toy_model.layers}, "guided", {"note": "x"})
    back = QuantSpec.loads(spec.dumps(toy_model))
    assert back == spec
    with pytest.raises(SpecError):
        QuantSpec.from_dict({"schema": "spikequant.quantspec", "version": 2, "layers": []})


def test_tiny_symmetric_pair_clamps_at_4_bits():
    q = quantize_tensor(np.array([-0.004, 0.004]), 4)
    assert q.params.scale == pytest.approx(0.008 / 15)
    assert q.q_data.tolist() == [-8, 7]


def test_zero_tensor_scale_is_flagged():
    p = compute_scale(np.zeros(4), 8)
    assert p.degenerate and p.w_min == p.w_max == 0.0


def test_requantizing_on_an_unchanged_range_reproduces_codes(rng):
    for b in BITS:
        lo, hi = quant_range(b)
        s = 0.37 / (hi - lo)
        codes = np.concatenate([[lo, hi], rng.integers(lo, hi + 1, size=50)])
        first = quantize_tensor(codes * s, b)
        again = quantize_tensor(dequantize(first), b)
        assert np.array_equal(first.q_data, codes)
        assert np.array_equal(again.q_data, first.q_data)


@pytest.mark.parametrize("mode", ["faithful", "symmetric"])
def test_scale_shrinks_with_more_bits(mode, rng):
    t = rng.normal(size=100)
    scales = [compute_scale(t, b, mode).scale for b in BITS]
    assert scales == sorted(scales, reverse=True) and len(set(scales)) == 4
