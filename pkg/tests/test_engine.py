"""Integer engine tests: packing, the shift-add primitive against exact
rational arithmetic, route equality between the integer path and the
dictionary-float reference, overflow guarding, and the cost model."""

from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shiftquant.engine import (
    EngineOverflowError,
    FixedPointTensor,
    InferenceNet,
    QuantizedLayer,
    ReluQuantStep,
    cost_report,
    encode_layer,
    pack_codes,
    quantize_network_for_inference,
    relu_quant_int,
    shiftadd_dense,
    shiftadd_multiply,
    unpack_codes,
)
from shiftquant.nn import ShapeError
from shiftquant.quantizer import (
    FEASIBLE_Q,
    dictionary_for_exponents,
    quantize_activations,
    quantize_tensor,
)

ALL_DICTS = [dictionary_for_exponents(a, b) for (_, _, (a, b)) in FEASIBLE_Q]


class TestPacking:
    @given(st.lists(st.integers(0, 3), min_size=0, max_size=200))
    @settings(max_examples=200, deadline=None)
    def test_round_trip(self, codes):
        arr = np.array(codes, dtype=np.uint8)
        blob = pack_codes(arr)
        assert len(blob) == (len(codes) + 3) // 4
        np.testing.assert_array_equal(unpack_codes(blob, len(codes)), arr)

    def test_lsb_first_layout(self):
        # codes 1,2,3,0 -> 0b00_11_10_01 = 0x39
        assert pack_codes(np.array([1, 2, 3, 0], dtype=np.uint8)) == bytes([0x39])

    def test_bad_codes_rejected(self):
        with pytest.raises(ValueError):
            pack_codes(np.array([4], dtype=np.uint8))
        with pytest.raises(ValueError):
            unpack_codes(b"\x00", 5)


class TestFixedPoint:
    def test_round_trip_error_bounded(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(-2.0, 2.0, size=1000)
        for fb in (3, 8, 16):
            fp = FixedPointTensor.from_real(x, fb)
            assert np.max(np.abs(fp.to_real() - x)) <= 2.0 ** -(fb + 1)

    def test_rounds_to_nearest(self):
        fp = FixedPointTensor.from_real(np.array([0.4999, 0.5001]), 3)
        # grid is eighths: 0.4999 -> 4/8, 0.5001 -> 4/8
        np.testing.assert_array_equal(fp.data, [4, 4])

    def test_frac_bits_floor(self):
        with pytest.raises(ValueError):
            FixedPointTensor.from_real(np.zeros(1), 2)

    def test_int64_required(self):
        with pytest.raises(TypeError):
            FixedPointTensor(np.zeros(3, dtype=np.int32), 8)


class TestShiftAddPrimitive:
    @pytest.mark.parametrize("qdict", ALL_DICTS, ids=lambda d: f"q={d.q}")
    def test_exact_on_widened_activations(self, qdict):
        # against exact rational arithmetic: level * act with no rounding
        levels = {0: -1, 1: Fraction(-qdict.s, 8), 2: Fraction(qdict.s, 8), 3: 1}
        for code, level in levels.items():
            for act in range(-520, 521, 8):  # widened acts are multiples of 8
                want = level * act
                assert want.denominator == 1 if isinstance(want, Fraction) else True
                assert shiftadd_multiply(code, act, qdict) == int(want)

    def test_invalid_code(self):
        with pytest.raises(ValueError):
            shiftadd_multiply(7, 8, ALL_DICTS[0])

    @pytest.mark.parametrize("qdict", ALL_DICTS, ids=lambda d: f"q={d.q}")
    def test_dense_kernel_equals_elementwise_sums(self, qdict):
        # the vectorized integer matmul must agree with summing the scalar
        # primitive over widened activations
        rng = np.random.default_rng(17)
        codes = rng.integers(0, 4, size=(5, 9)).astype(np.uint8)
        acts = FixedPointTensor(rng.integers(0, 2 ** 8 + 1, size=(3, 9)), 8)
        layer = QuantizedLayer("dense", codes, qdict, out_scale=1.0)
        _, out = shiftadd_dense(acts, layer)
        for b in range(3):
            for o in range(5):
                acc = sum(
                    shiftadd_multiply(int(codes[o, i]), int(acts.data[b, i]) * 8, qdict)
                    for i in range(9)
                )
                pre = acc * 2.0 ** -(8 + 3)
                assert out.data[b, o] == int(np.rint(pre * 2 ** 8))


class TestEncodeLayer:
    def test_round_trip(self):
        qdict = ALL_DICTS[3]
        rng = np.random.default_rng(2)
        _, deq = quantize_tensor(rng.normal(size=(4, 6)), qdict)
        layer = encode_layer(deq, qdict, out_scale=0.5, bias=None, kind="dense")
        np.testing.assert_array_equal(layer.level_weights(), deq)

    def test_off_level_value_rejected(self):
        qdict = ALL_DICTS[3]
        w = np.array([[1.0, 0.3]])
        with pytest.raises(ValueError, match="not a dictionary level"):
            encode_layer(w, qdict, out_scale=1.0, bias=None, kind="dense")

    def test_layer_validation(self):
        qdict = ALL_DICTS[0]
        with pytest.raises(ValueError):
            QuantizedLayer("dense", np.zeros((2, 2), dtype=np.uint8), qdict, out_scale=0.0)
        with pytest.raises(ShapeError):
            QuantizedLayer("dense", np.zeros((2, 2, 2, 2), dtype=np.uint8), qdict, out_scale=1.0)
        with pytest.raises(ValueError):
            QuantizedLayer("pool", np.zeros((2, 2), dtype=np.uint8), qdict, out_scale=1.0)


class TestReluQuantInt:
    @pytest.mark.parametrize("qdict", ALL_DICTS, ids=lambda d: f"q={d.q}")
    def test_matches_float_rule_on_grid(self, qdict):
        for fb in (3, 8, 12):
            grid = np.arange(-(2 ** fb) - 5, 2 ** fb + 6, dtype=np.int64)
            fp = FixedPointTensor(grid, fb)
            got = relu_quant_int(fp, qdict).to_real()
            want = quantize_activations(np.maximum(fp.to_real(), 0.0), qdict)[1]
            np.testing.assert_array_equal(got, want)


def random_pipeline(rng, frac_bits=8):
    """A random dense/conv stack frozen to codes, plus matching input."""
    qdicts = [ALL_DICTS[rng.integers(0, len(ALL_DICTS))] for _ in range(3)]
    arch = rng.integers(0, 2)
    steps = []
    if arch == 0:  # conv then dense
        c, h = int(rng.integers(1, 3)), int(rng.integers(5, 9))
        oc = int(rng.integers(1, 5))
        shapes = [(oc, c, 3, 3)]
        _, w0 = quantize_tensor(rng.normal(size=shapes[0]), qdicts[0])
        steps.append(encode_layer(w0, qdicts[0], out_scale=float(rng.uniform(0.05, 1.5)),
                                  bias=rng.normal(size=oc) * 0.1, kind="conv2d"))
        steps.append(ReluQuantStep(qdicts[0]))
        flat = oc * (h - 2) * (h - 2)
        out = int(rng.integers(2, 6))
        _, w1 = quantize_tensor(rng.normal(size=(out, flat)), qdicts[1])
        steps.append(encode_layer(w1, qdicts[1], out_scale=float(rng.uniform(0.05, 1.5)),
                                  bias=rng.normal(size=out) * 0.1, kind="dense"))
        x = rng.uniform(0.0, 1.0, size=(int(rng.integers(1, 4)), c, h, h))
    else:  # two dense layers
        d0 = int(rng.integers(2, 33))
        d1 = int(rng.integers(2, 33))
        d2 = int(rng.integers(2, 8))
        _, w0 = quantize_tensor(rng.normal(size=(d1, d0)), qdicts[0])
        steps.append(encode_layer(w0, qdicts[0], out_scale=float(rng.uniform(0.05, 1.5)),
                                  bias=rng.normal(size=d1) * 0.1, kind="dense"))
        steps.append(ReluQuantStep(qdicts[0]))
        _, w1 = quantize_tensor(rng.normal(size=(d2, d1)), qdicts[1])
        steps.append(encode_layer(w1, qdicts[1], out_scale=float(rng.uniform(0.05, 1.5)),
                                  bias=rng.normal(size=d2) * 0.1, kind="dense"))
        x = rng.uniform(0.0, 1.0, size=(int(rng.integers(1, 4)), d0))
    return InferenceNet(steps, frac_bits=frac_bits), x


class TestRouteEquality:
    def test_shiftadd_matches_reference_bitwise(self):
        rng = np.random.default_rng(99)
        for _ in range(60):
            net, x = random_pipeline(rng)
            a = net.run_inference(x)
            b = net.run_reference(x)
            np.testing.assert_array_equal(a.logits, b.logits)
            assert len(a.trace) == len(b.trace)
            for ta, tb in zip(a.trace, b.trace):
                np.testing.assert_array_equal(ta.out_int, tb.out_int)

    def test_equality_holds_without_activation_snapping(self):
        rng = np.random.default_rng(4)
        net, x = random_pipeline(rng)
        net.quantize_activations = False
        a = net.run_inference(x)
        b = net.run_reference(x)
        np.testing.assert_array_equal(a.logits, b.logits)

    def test_input_clipped_to_unit_range(self):
        rng = np.random.default_rng(5)
        net, x = random_pipeline(rng)
        wild = x * 10.0 - 3.0
        a = net.run_inference(wild)
        b = net.run_inference(np.clip(wild, 0.0, 1.0))
        np.testing.assert_array_equal(a.logits, b.logits)

    def test_predictions_shape(self):
        rng = np.random.default_rng(6)
        net, x = random_pipeline(rng)
        preds = net.run_inference(x).predictions()
        assert preds.shape == (x.shape[0],)


class TestOverflowGuard:
    def test_wide_fan_in_with_huge_frac_bits(self):
        # worst case 4096 * 8 * 2^40 = 2^55 leaves the float-exact regime
        qdict = ALL_DICTS[4]
        n_in = 4096
        codes = np.full((2, n_in), 3, dtype=np.uint8)
        layer = QuantizedLayer("dense", codes, qdict, out_scale=1.0)
        acts = FixedPointTensor(np.full((1, n_in), 2 ** 40, dtype=np.int64), 40)
        with pytest.raises(EngineOverflowError):
            shiftadd_dense(acts, layer)

    def test_normal_sizes_fit(self):
        qdict = ALL_DICTS[0]
        codes = np.zeros((4, 512), dtype=np.uint8)
        layer = QuantizedLayer("dense", codes, qdict, out_scale=1.0)
        acts = FixedPointTensor(np.full((2, 512), 2 ** 8, dtype=np.int64), 8)
        shiftadd_dense(acts, layer)  # must not raise

    def test_pipeline_must_end_with_layer(self):
        with pytest.raises(ValueError):
            InferenceNet([ReluQuantStep(ALL_DICTS[0])], frac_bits=8)


class TestCostModel:
    def test_reference_counts(self):
        rng = np.random.default_rng(1)
        qdict = ALL_DICTS[4]
        _, wc = quantize_tensor(rng.normal(size=(4, 1, 3, 3)), qdict)
        _, w1 = quantize_tensor(rng.normal(size=(32, 144)), qdict)
        _, w2 = quantize_tensor(rng.normal(size=(2, 32)), qdict)
        steps = [
            encode_layer(wc, qdict, 1.0, None, "conv2d"),
            ReluQuantStep(qdict),
            encode_layer(w1, qdict, 1.0, None, "dense"),
            ReluQuantStep(qdict),
            encode_layer(w2, qdict, 1.0, None, "dense"),
        ]
        report = cost_report(InferenceNet(steps, 8), (1, 8, 8))
        # conv: 6*6*4*1*3*3 = 1296; dense: 32*144 = 4608; head: 2*32 = 64
        assert [c.macs_fp for c in report.per_layer] == [1296, 4608, 64]
        assert report.macs_fp == 5968
        assert report.shiftadd_ops == 5968
        assert report.fp_macs_remaining == 0

    def test_fully_quantized_speedup_is_exactly_four(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            net, x = random_pipeline(rng)
            report = cost_report(net, tuple(x.shape[1:]))
            assert report.modeled_speedup == 4.0  # exact, not approximate

    def test_empty_pipeline_reports_unity(self):
        report = cost_report([], (1, 8, 8))
        assert report.macs_fp == 0
        assert report.shiftadd_ops == 0
        assert report.modeled_speedup == 1.0

    def test_shape_mismatch_detected(self):
        qdict = ALL_DICTS[0]
        layer = QuantizedLayer("dense", np.zeros((2, 9), dtype=np.uint8), qdict, 1.0)
        with pytest.raises(ShapeError):
            cost_report([layer], (1, 8, 8))


class TestStudentConversion:
    def test_frozen_student_matches_quant_mode_closely(self):
        # the integer engine evaluates the same function the student's quant
        # mode computes, up to the input grid rounding
        from shiftquant.harness import build_network
        from shiftquant.student import QuantizedStudent

        rng = np.random.default_rng(10)
        net = build_network("mlp", (1, 4, 4), 3, rng)
        student = QuantizedStudent.from_network(net, dof=3.0, warmup_steps=10)
        inf = quantize_network_for_inference(student, frac_bits=12)
        x = rng.uniform(0.0, 1.0, size=(16, 1, 4, 4))
        got = inf.run_inference(x).logits
        want, _ = student.forward(x, mode="quant")
        assert np.max(np.abs(got - want)) <= 1e-2

    def test_codes_match_student_quantization(self):
        from shiftquant.harness import build_network
        from shiftquant.student import QuantizedStudent, _StudentWeighted

        rng = np.random.default_rng(11)
        net = build_network("mlp", (1, 4, 4), 2, rng)
        student = QuantizedStudent.from_network(net, dof=3.0, warmup_steps=10)
        inf = quantize_network_for_inference(student, frac_bits=8)
        weighted = [l for l in student.layers if isinstance(l, _StudentWeighted)]
        layers = [s for s in inf.steps if isinstance(s, QuantizedLayer)]
        assert len(weighted) == len(layers)
        for sl, ql in zip(weighted, layers):
            np.testing.assert_array_equal(sl.quantized_codes()[0], ql.codes)
            assert ql.out_scale == sl.scale
