"""Quantization rules: feasible level enumeration, dictionary selection,
code assignment and its tie rules, sign balance, the entropy objective
against brute force, and the straight-through machinery."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from shiftquant.quantizer import (
    CODE_NEG_INNER,
    CODE_NEG_OUTER,
    CODE_POS_INNER,
    CODE_POS_OUTER,
    FEASIBLE_Q,
    CutoffSchedule,
    QuantDictionary,
    binary_entropy,
    build_dictionary,
    cutoff_schedule_value,
    dictionary_for_exponents,
    entropy_objective,
    quantize_activations,
    quantize_tensor,
    select_balance_bias,
    sign_balance,
    ste_backward,
    surrogate_activations,
    surrogate_weights,
)
from shiftquant.tdist import inflection_points

ALL_DICTS = [dictionary_for_exponents(a, b) for (_, _, (a, b)) in FEASIBLE_Q]

finite_weights = hnp.arrays(
    np.float64,
    st.integers(1, 40),
    elements=st.floats(-2.0, 2.0, allow_nan=False, width=64),
)


class TestFeasibleLevels:
    def test_enumeration_is_exhaustive(self):
        # independent brute force over every exponent pair; a sum of 1.0
        # (a = b = -1) is not a valid inner level, it collapses into the
        # outer level
        sums = {2.0 ** a + 2.0 ** b for a in (-3, -2, -1) for b in (-3, -2, -1)}
        inner = {s for s in sums if 0.0 < s < 1.0}
        assert inner == {q for q, _, _ in FEASIBLE_Q}
        assert sorted(inner) == [0.25, 0.375, 0.5, 0.625, 0.75]

    def test_s_and_exponents_consistent(self):
        for q, s, (a, b) in FEASIBLE_Q:
            assert s == round(8 * q)
            assert 2.0 ** a + 2.0 ** b == q
            assert a >= b

    def test_dictionary_validation(self):
        with pytest.raises(ValueError):
            QuantDictionary(q=0.3, s=2, shift_exponents=(-3, -3))
        with pytest.raises(ValueError):
            QuantDictionary(q=0.25, s=3, shift_exponents=(-3, -3))
        with pytest.raises(ValueError):
            QuantDictionary(q=0.375, s=3, shift_exponents=(-3, -2))  # a < b
        with pytest.raises(ValueError):
            QuantDictionary(q=1.25, s=10, shift_exponents=(0, -2))

    def test_levels_and_code_table(self):
        d = dictionary_for_exponents(-1, -2)
        assert d.levels == (-1.0, -0.75, 0.75, 1.0)
        assert d.code_table == {0: -1.0, 1: -0.75, 2: 0.75, 3: 1.0}


class TestBuildDictionary:
    def test_reference_dof_values(self):
        assert build_dictionary(1.0).q == 0.625
        assert build_dictionary(3.0).q == 0.75
        assert build_dictionary(12.0).q == 0.75

    def test_matches_argmin_over_feasible(self):
        rng = np.random.default_rng(0)
        for n in rng.uniform(0.5, 80.0, size=200):
            got = build_dictionary(n).q
            x2 = inflection_points(n)[1]
            best = min((abs(q - x2), q) for q, _, _ in FEASIBLE_Q)[0]
            assert abs(got - x2) == pytest.approx(best, abs=1e-15)

    def test_tie_resolves_to_larger_q(self):
        # x2 = 0.3125 is equidistant from 0.25 and 0.375: n/(n+2) = 0.3125^2
        x2 = 0.3125
        n = 2.0 * x2 * x2 / (1.0 - x2 * x2)
        assert inflection_points(n)[1] == pytest.approx(x2, abs=1e-15)
        assert build_dictionary(n).q == 0.375

    def test_small_dof_gets_small_q(self):
        # tiny n: x2 -> 0, nearest feasible is the smallest
        assert build_dictionary(0.05).q == 0.25


class TestQuantizeTensor:
    @pytest.mark.parametrize("qdict", ALL_DICTS, ids=lambda d: f"q={d.q}")
    def test_level_values_and_codes(self, qdict):
        q = qdict.q
        x = np.array([-2.0, -1.0, -(1 + q) / 2 - 1e-9, -q, -1e-9, 0.0, q, (1 + q) / 2 + 1e-9, 1.0, 2.0])
        codes, deq = quantize_tensor(x, qdict)
        assert codes.dtype == np.uint8
        assert set(np.unique(deq)).issubset(set(qdict.levels))
        np.testing.assert_array_equal(
            deq, [-1.0, -1.0, -1.0, -q, -q, q, q, 1.0, 1.0, 1.0]
        )

    @pytest.mark.parametrize("qdict", ALL_DICTS, ids=lambda d: f"q={d.q}")
    def test_tie_rules(self, qdict):
        q = qdict.q
        mid = (1.0 + q) / 2.0
        codes, deq = quantize_tensor(np.array([mid, -mid, 0.0]), qdict)
        assert deq[0] == 1.0  # positive midpoint goes outward
        assert deq[1] == -q  # negative midpoint stays inward
        assert deq[2] == q  # zero with zero bias is positive inner
        assert list(codes) == [CODE_POS_OUTER, CODE_NEG_INNER, CODE_POS_INNER]

    @given(w=finite_weights)
    @settings(max_examples=200, deadline=None)
    def test_idempotent_at_zero_bias(self, w):
        qdict = ALL_DICTS[2]
        codes1, deq1 = quantize_tensor(w, qdict)
        codes2, deq2 = quantize_tensor(deq1, qdict)
        np.testing.assert_array_equal(codes1, codes2)
        np.testing.assert_array_equal(deq1, deq2)

    @given(w=finite_weights, bias=st.floats(-0.2, 0.2))
    @settings(max_examples=200, deadline=None)
    def test_biased_codes_respect_sign_split(self, w, bias):
        qdict = ALL_DICTS[4]
        codes, _ = quantize_tensor(w, qdict, balance_bias=bias)
        clipped = np.clip(w, -1.0, 1.0)
        positive = codes >= CODE_POS_INNER
        np.testing.assert_array_equal(positive, clipped >= bias)

    def test_bias_moves_threshold(self):
        qdict = ALL_DICTS[2]  # q = 0.5
        x = np.array([0.1, -0.1])
        _, deq0 = quantize_tensor(x, qdict, balance_bias=0.0)
        np.testing.assert_array_equal(deq0, [0.5, -0.5])
        _, deq_neg = quantize_tensor(x, qdict, balance_bias=-0.2)
        np.testing.assert_array_equal(deq_neg, [0.5, 0.5])


class TestBalance:
    def test_binary_entropy_extremes(self):
        assert binary_entropy(0.0) == 0.0
        assert binary_entropy(1.0) == 0.0
        assert binary_entropy(0.5) == pytest.approx(np.log(2.0), rel=1e-15)
        with pytest.raises(ValueError):
            binary_entropy(1.5)

    def test_sign_balance_counts_positive_codes(self):
        codes = np.array([CODE_NEG_OUTER, CODE_NEG_INNER, CODE_POS_INNER, CODE_POS_OUTER])
        bal = sign_balance(codes)
        assert bal.p == 0.5
        assert bal.entropy == pytest.approx(np.log(2.0), rel=1e-15)

    def test_empty_codes_rejected(self):
        with pytest.raises(ValueError):
            sign_balance(np.array([], dtype=np.uint8))

    def test_selected_bias_stays_in_window(self):
        rng = np.random.default_rng(11)
        for qdict in ALL_DICTS:
            w = rng.normal(loc=0.4, scale=0.5, size=500)
            assert abs(select_balance_bias(w, qdict)) <= qdict.q / 2.0

    def test_clamp_binds_when_optimum_is_outside(self):
        # the entropy-optimal split sits between 0.1 and 0.3, above q/2
        qdict = ALL_DICTS[0]  # q = 0.25
        w = np.concatenate([np.full(70, 0.3), np.full(30, 0.1)])
        assert select_balance_bias(w, qdict) == qdict.q / 2.0
        bias_neg = select_balance_bias(-w, qdict)
        assert -qdict.q / 2.0 <= bias_neg <= -0.1
        codes, _ = quantize_tensor(-w, qdict, bias_neg)
        assert sign_balance(codes).p == pytest.approx(0.3)

    def test_unfixable_tensor_gets_zero_bias(self):
        # every value sits beyond the window; no bias helps, zero is canonical
        qdict = ALL_DICTS[2]
        assert select_balance_bias(np.full(100, 0.9), qdict) == 0.0

    def test_selected_bias_balances_symmetric_tensor(self):
        rng = np.random.default_rng(5)
        qdict = ALL_DICTS[4]
        w = rng.standard_normal(10_000) * 0.6
        bias = select_balance_bias(w, qdict)
        codes, _ = quantize_tensor(w, qdict, bias)
        bal = sign_balance(codes)
        assert abs(bal.p - 0.5) <= 0.02
        assert bal.entropy >= 0.99 * np.log(2.0)

    @given(w=hnp.arrays(np.float64, st.integers(2, 120),
                        elements=st.floats(-1.5, 1.5, allow_nan=False, width=64)))
    @settings(max_examples=200, deadline=None)
    def test_selected_bias_never_hurts_balance(self, w):
        # zero bias is always among the candidates, so the chosen split's
        # entropy can never fall below the unbiased split's
        for qdict in (ALL_DICTS[0], ALL_DICTS[2], ALL_DICTS[4]):
            bias = select_balance_bias(w, qdict)
            h0 = sign_balance(quantize_tensor(w, qdict, 0.0)[0]).entropy
            hb = sign_balance(quantize_tensor(w, qdict, bias)[0]).entropy
            assert hb >= h0 - 1e-12


class TestEntropyObjective:
    def test_matches_brute_force_on_tiny_tensors(self):
        # exhaustively score every code assignment for every <= 8 element
        # tensor in a fixed bank; lambda 0 means pure squared error
        rng = np.random.default_rng(9)
        qdict = ALL_DICTS[1]
        levels = np.array(qdict.levels)
        for size in range(1, 9):
            w = rng.uniform(-1.3, 1.3, size=size)
            clipped = np.clip(w, -1.0, 1.0)
            best = min(
                float(np.sum((clipped - np.array(combo)) ** 2))
                for combo in itertools.product(levels, repeat=size)
            )
            assert entropy_objective(w, qdict, 0.0) == pytest.approx(best, abs=1e-12)

    def test_entropy_term_subtracts(self):
        qdict = ALL_DICTS[2]
        w = np.array([0.4, 0.5, -0.4, -0.5])
        base = entropy_objective(w, qdict, 0.0)
        full = entropy_objective(w, qdict, 2.0)
        assert full == pytest.approx(base - 2.0 * np.log(2.0), rel=1e-12)

    def test_negative_lambda_rejected(self):
        with pytest.raises(ValueError):
            entropy_objective(np.array([0.1]), ALL_DICTS[0], -1.0)


class TestActivationQuantization:
    @pytest.mark.parametrize("qdict", ALL_DICTS, ids=lambda d: f"q={d.q}")
    def test_three_level_grid_and_ties(self, qdict):
        q = qdict.q
        x = np.array([-0.5, 0.0, q / 2 - 1e-9, q / 2, q, (q + 1) / 2 - 1e-9, (q + 1) / 2, 1.0, 1.5])
        _, vals = quantize_activations(x, qdict)
        np.testing.assert_array_equal(vals, [0.0, 0.0, 0.0, q, q, q, 1.0, 1.0, 1.0])

    def test_idempotent(self):
        qdict = ALL_DICTS[3]
        rng = np.random.default_rng(3)
        a = rng.uniform(-0.5, 1.5, size=300)
        _, v1 = quantize_activations(a, qdict)
        codes2, v2 = quantize_activations(v1, qdict)
        np.testing.assert_array_equal(v1, v2)


class TestCutoffSchedule:
    def test_two_linear_phases(self):
        s = CutoffSchedule(c0=3.0, warmup_steps=100, terminal=0.75)
        assert s.value(0) == 3.0
        assert s.value(50) == pytest.approx(2.0)
        assert s.value(100) == 1.0
        assert s.value(150) == pytest.approx(0.875)
        assert s.value(200) == 0.75
        assert s.value(10_000) == 0.75

    def test_monotone_nonincreasing(self):
        s = CutoffSchedule(c0=5.0, warmup_steps=37, terminal=0.25)
        vals = [s.value(k) for k in range(0, 120)]
        assert np.all(np.diff(vals) <= 1e-12)

    def test_validation(self):
        with pytest.raises(ValueError):
            CutoffSchedule(c0=0.5, warmup_steps=10, terminal=0.5)
        with pytest.raises(ValueError):
            CutoffSchedule(c0=2.0, warmup_steps=0, terminal=0.5)
        with pytest.raises(ValueError):
            CutoffSchedule(c0=2.0, warmup_steps=10, terminal=0.0)
        with pytest.raises(ValueError):
            cutoff_schedule_value(CutoffSchedule(2.0, 10, 0.5), -1)


class TestStraightThrough:
    def test_window_boundary_inclusive_and_exact(self):
        latent = np.array([-1.1, -1.0, -0.5, 0.0, 0.5, 1.0, 1.1])
        up = np.ones_like(latent) * 7.0
        out = ste_backward(up, latent, cutoff=1.0)
        np.testing.assert_array_equal(out, [0.0, 7.0, 7.0, 7.0, 7.0, 7.0, 0.0])

    @given(
        latent=finite_weights,
        cutoff=st.floats(0.1, 3.0, allow_nan=False),
    )
    @settings(max_examples=200, deadline=None)
    def test_masked_identity(self, latent, cutoff):
        up = np.full_like(latent, 2.0)
        out = ste_backward(up, latent, cutoff)
        inside = np.abs(latent) <= cutoff
        np.testing.assert_array_equal(out[inside], 2.0)
        np.testing.assert_array_equal(out[~inside], 0.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ste_backward(np.ones(3), np.ones(4), 1.0)
        with pytest.raises(ValueError):
            ste_backward(np.ones(3), np.ones(3), 0.0)

    def test_surrogate_weights_split(self):
        qdict = ALL_DICTS[2]  # q = 0.5
        latent = np.array([0.3, -0.3, 1.2, -1.2])
        out = surrogate_weights(latent, qdict, cutoff=1.0)
        np.testing.assert_array_equal(out, [0.3, -0.3, 1.0, -1.0])
        out_tight = surrogate_weights(latent, qdict, cutoff=0.5)
        np.testing.assert_array_equal(out_tight, [0.3, -0.3, 1.0, -1.0])
        out_tighter = surrogate_weights(latent, qdict, cutoff=0.25)
        np.testing.assert_array_equal(out_tighter, [0.5, -0.5, 1.0, -1.0])

    def test_surrogate_activations_split(self):
        qdict = ALL_DICTS[2]
        acts = np.array([0.2, 0.6, 1.4])
        out = surrogate_activations(acts, qdict, cutoff=1.0)
        np.testing.assert_array_equal(out, [0.2, 0.6, 1.0])
        out_tight = surrogate_activations(acts, qdict, cutoff=0.5)
        np.testing.assert_array_equal(out_tight, [0.2, 0.5, 1.0])
