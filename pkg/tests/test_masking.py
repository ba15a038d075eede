import itertools
import warnings

import numpy as np
import pytest
from conftest import make_problem
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from amss.masking import (
    MaskMode,
    accumulate_fisher,
    build_mask,
    enumerate_mask_units,
    estimate_inclusion_probabilities,
    inclusion_probabilities,
    normalize_importance,
    parameter_fisher,
    sample_mask_plan,
    sample_without_replacement,
    scope_layers,
    select_units,
    selection_inclusion,
    subset_probabilities,
    uniform_importance,
    uniform_mask_plan,
    units_to_select,
)
from amss.model import LabeledBatch, ModelSpec, build_model


def ordered_draw_oracle(p, n):
    """Subset probabilities by brute force over every ordered draw sequence."""
    p = np.asarray(p, dtype=float) / np.sum(p)
    out = {}
    for seq in itertools.permutations(range(len(p)), n):
        prob, left = 1.0, 1.0
        for j in seq:
            prob *= p[j] / left
            left -= p[j]
        key = frozenset(seq)
        out[key] = out.get(key, 0.0) + prob
    return out


prob_vectors = st.integers(2, 7).flatmap(
    lambda L: arrays(np.float64, L, elements=st.floats(0.01, 1.0))
).map(lambda w: w / w.sum())


class TestUnits:
    def test_one_unit_per_output_neuron(self):
        model = build_model(ModelSpec((3, 2), ((8,), (4,)), 2), 0)
        units = enumerate_mask_units(model, 0)
        assert [u.index for u in units] == list(range(8))
        assert {u.layer for u in units} == {"enc0.0"}

    def test_spans_are_disjoint_and_cover_the_layer(self):
        model = build_model(ModelSpec((3, 2), ((8,), (4,)), 2), 0)
        W = np.zeros_like(model.params["enc0.0.weight"])
        b = np.zeros_like(model.params["enc0.0.bias"])
        for unit in enumerate_mask_units(model, 0):
            (wid, widx), (bid, bidx) = unit.span()
            W[widx] += 1
            b[bidx] += 1
        assert np.all(W == 1) and np.all(b == 1)

    def test_classifier_scope_on_concat_is_empty_with_warning(self):
        model, _ = make_problem()
        with pytest.warns(UserWarning, match="selects no layers"):
            assert enumerate_mask_units(model, 0, "classifier") == []

    def test_both_is_disjoint_union(self):
        model, _ = make_problem(fusion="sum")
        both = enumerate_mask_units(model, 1, "both")
        parts = enumerate_mask_units(model, 1, "backbone") + enumerate_mask_units(model, 1, "classifier")
        assert both == parts and len(set(both)) == len(both)

    def test_unknown_scope(self):
        model, _ = make_problem()
        with pytest.raises(ValueError):
            scope_layers(model, 0, "heads")


class TestFisher:
    def test_matches_per_sample_finite_differences(self):
        model, batch = make_problem(seed=4, B=3)
        imp = accumulate_fisher(model, batch, 1)
        eps = 1e-6
        oracle = {}
        for lid in imp:
            W, b = model.params[lid + ".weight"], model.params[lid + ".bias"]
            F = np.zeros(W.shape[0])
            for i in range(3):
                one = batch.subset([i])
                for arr in (W, b):
                    flat = arr.reshape(-1)
                    g = np.zeros_like(flat)
                    for j in range(flat.size):
                        orig = flat[j]
                        flat[j] = orig + eps
                        up = model.forward_unimodal(one, 1)[0]
                        flat[j] = orig - eps
                        down = model.forward_unimodal(one, 1)[0]
                        flat[j] = orig
                        g[j] = (up - down) / (2 * eps)
                    g = g.reshape(arr.shape)
                    F += (g ** 2).reshape(W.shape[0], -1).sum(axis=1) / 3
            oracle[lid] = F
        for lid, F in oracle.items():
            np.testing.assert_allclose(imp[lid].fisher, F, rtol=1e-5)

    def test_single_sample_equals_squared_gradient(self):
        model, batch = make_problem(seed=1, B=1)
        pf = parameter_fisher(model, batch, 0)
        _, cache = model.forward_unimodal(batch, 0)
        g = model.backward(cache)
        for name, F in pf.items():
            np.testing.assert_allclose(F, g[name] ** 2, rtol=1e-12, atol=1e-300)

    def test_unit_fisher_sums_parameter_fisher(self, problem):
        model, batch = problem
        pf = parameter_fisher(model, batch, 0)
        imp = accumulate_fisher(model, batch, 0)
        np.testing.assert_allclose(
            imp["enc0.0"].fisher, pf["enc0.0.weight"].sum(axis=1) + pf["enc0.0.bias"])

    def test_probabilities_normalised_per_layer(self, problem):
        model, batch = problem
        for imp in accumulate_fisher(model, batch, 1).values():
            assert abs(imp.p.sum() - 1) <= 1e-12 and np.all(imp.p >= 0)

    def test_zero_input_falls_back_to_uniform(self):
        model = build_model(ModelSpec((3, 2), ((4,), (4,)), 2), 0)
        # with zero inputs and zero biases every hidden pre-activation is 0, so ReLU kills the gradient
        batch = LabeledBatch([np.zeros((5, 3)), np.zeros((5, 2))], np.eye(2)[[0, 1, 0, 1, 0]])
        imp = accumulate_fisher(model, batch, 0)
        np.testing.assert_allclose(imp["enc0.0"].p, 0.25)

    def test_normalize_importance(self):
        np.testing.assert_allclose(normalize_importance([1.0, 3.0]), [0.25, 0.75])
        np.testing.assert_allclose(normalize_importance([0.0, 0.0]), [0.5, 0.5])

    def test_empty_batch(self, problem):
        model, batch = problem
        with pytest.raises(ValueError):
            accumulate_fisher(model, batch.subset([]), 0)


class TestSampling:
    def test_full_draw(self):
        np.testing.assert_array_equal(sample_without_replacement([0.2, 0.3, 0.5], 3, np.random.default_rng(0)),
                                      [0, 1, 2])

    def test_point_mass(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            np.testing.assert_array_equal(sample_without_replacement([1.0, 0.0, 0.0], 1, rng), [0])

    def test_too_many_for_positive_weights(self):
        with pytest.raises(ValueError):
            sample_without_replacement([1.0, 0.0, 0.0], 2, np.random.default_rng(0))

    @pytest.mark.parametrize("n", [0, 4])
    def test_count_bounds(self, n):
        with pytest.raises(ValueError):
            sample_without_replacement([0.2, 0.3, 0.5], n, np.random.default_rng(0))

    @given(prob_vectors, st.integers(1, 7), st.integers(0, 2**32 - 1))
    def test_distinct_sorted_indices(self, p, n, seed):
        n = min(n, p.size)
        idx = sample_without_replacement(p, n, np.random.default_rng(seed))
        assert idx.size == n and np.all(np.diff(idx) > 0)

    def test_deterministic_given_seed(self):
        p = [0.1, 0.2, 0.3, 0.4]
        a = [sample_without_replacement(p, 2, np.random.default_rng(5)).tolist() for _ in range(3)]
        assert a[0] == a[1] == a[2]

    def test_subset_frequencies_match_oracle(self):
        rng = np.random.default_rng(1)
        p = [0.5, 0.3, 0.2]
        draws = 30_000
        counts = {}
        for _ in range(draws):
            key = frozenset(sample_without_replacement(p, 2, rng).tolist())
            counts[key] = counts.get(key, 0) + 1
        for key, q in ordered_draw_oracle(p, 2).items():
            sigma = np.sqrt(q * (1 - q) / draws)
            assert abs(counts[key] / draws - q) <= 4 * sigma

    def test_uniform_weights_give_uniform_subsets(self):
        rng = np.random.default_rng(2)
        counts = {}
        for _ in range(20_000):
            key = frozenset(sample_without_replacement(np.full(5, 0.2), 2, rng).tolist())
            counts[key] = counts.get(key, 0) + 1
        assert len(counts) == 10
        assert stats.chisquare(list(counts.values())).pvalue > 0.01

    def test_select_units_fills_from_zero_weight_units(self):
        rng = np.random.default_rng(0)
        p = [0.6, 0.4, 0.0, 0.0, 0.0]
        for _ in range(20):
            idx = select_units(p, 3, rng)
            assert idx.size == 3 and {0, 1} <= set(idx.tolist())
        np.testing.assert_allclose(selection_inclusion(p, 3), [1, 1, 1 / 3, 1 / 3, 1 / 3])


class TestInclusion:
    def test_worked_example(self):
        subsets = subset_probabilities([0.5, 0.3, 0.2], 2)
        assert subsets[frozenset({0, 1})] == pytest.approx(0.5142857, abs=1e-7)
        assert subsets[frozenset({0, 2})] == pytest.approx(0.325, abs=1e-12)
        assert subsets[frozenset({1, 2})] == pytest.approx(0.1607143, abs=1e-7)
        np.testing.assert_allclose(inclusion_probabilities([0.5, 0.3, 0.2], 2),
                                   [0.8392857, 0.675, 0.4857143], atol=1e-7)

    @given(prob_vectors, st.integers(1, 7))
    def test_matches_brute_force_and_sums_to_n(self, p, n):
        n = min(n, p.size)
        dp = subset_probabilities(p, n)
        brute = ordered_draw_oracle(p, n)
        assert set(dp) == set(brute)
        for key in dp:
            assert dp[key] == pytest.approx(brute[key], abs=1e-12)
        assert inclusion_probabilities(p, n).sum() == pytest.approx(n)

    @pytest.mark.parametrize("L,n", [(4, 1), (6, 3), (5, 5)])
    def test_uniform_is_n_over_l(self, L, n):
        np.testing.assert_allclose(inclusion_probabilities(np.full(L, 1 / L), n), n / L)

    def test_too_large_for_enumeration(self):
        with pytest.raises(ValueError, match="Monte Carlo"):
            inclusion_probabilities(np.full(13, 1 / 13), 2)

    def test_monte_carlo_estimate(self):
        est = estimate_inclusion_probabilities([0.5, 0.3, 0.2], 2, np.random.default_rng(0), 20_000)
        np.testing.assert_allclose(est, [0.8392857, 0.675, 0.4857143], atol=0.02)


class TestCounts:
    @pytest.mark.parametrize("rho,L,n", [(0.4, 5, 2), (1e-9, 5, 1), (1.0, 7, 7), (0.5, 3, 2), (0.3, 10, 3)])
    def test_ceiling(self, rho, L, n):
        assert units_to_select(rho, L) == n

    @pytest.mark.parametrize("rho", [0.0, -0.1, 1.01])
    def test_out_of_range(self, rho):
        with pytest.raises(ValueError):
            units_to_select(rho, 4)


class TestBuildMask:
    def _setup(self, fusion="sum"):
        model, batch = make_problem(seed=3, fusion=fusion)
        return model, accumulate_fisher(model, batch, 1)

    def test_amss_is_binary_with_ceil_count(self):
        model, imp = self._setup()
        plan = sample_mask_plan(model, 1, imp, 0.4, MaskMode.AMSS, np.random.default_rng(0))
        for layer in scope_layers(model, 1, "both"):
            vals = plan.unit_values[layer.layer_id]
            assert set(np.unique(vals)) <= {0.0, 1.0}
            assert plan.selection_counts()[layer.layer_id] == units_to_select(0.4, layer.n_out)
            np.testing.assert_array_equal(plan.masks[layer.weight_id],
                                          np.repeat(vals[:, None], layer.n_in, axis=1))

    def test_amss_plus_value(self):
        model = build_model(ModelSpec((2, 2), ((4,), (4,)), 2), 0)
        from amss.masking import LayerImportance
        p = np.array([0.1, 0.2, 0.3, 0.4])
        imp = {"enc0.0": LayerImportance(p, p)}
        plan = build_mask(model, 0, {"enc0.0": np.array([0, 3])}, imp, 0.5, MaskMode.AMSS_PLUS)
        np.testing.assert_allclose(plan.unit_values["enc0.0"], [1 / 4.1, 0, 0, 1 / 4.4])
        assert 1 / 4.1 == pytest.approx(0.2439, abs=1e-4)

    def test_amss_plus_bounded_by_inverse_width(self):
        model, imp = self._setup()
        plan = sample_mask_plan(model, 1, imp, 0.6, MaskMode.AMSS_PLUS, np.random.default_rng(1))
        for lid, vals in plan.unit_values.items():
            L = vals.size
            sel = np.zeros(L, bool)
            sel[plan.selected[lid]] = True
            assert np.all(vals[~sel] == 0)
            assert np.all((vals[sel] > 0) & (vals[sel] <= 1 / L))

    def test_theoretical_uses_inverse_inclusion(self):
        model, imp = self._setup()
        plan = sample_mask_plan(model, 1, imp, 0.5, MaskMode.THEORETICAL_UNBIASED,
                                np.random.default_rng(2))
        for lid, vals in plan.unit_values.items():
            pi = inclusion_probabilities(imp[lid].p, units_to_select(0.5, vals.size))
            sel = plan.selected[lid]
            np.testing.assert_allclose(vals[sel], 1 / pi[sel])

    def test_ratio_one_is_all_ones(self):
        model, imp = self._setup()
        plan = sample_mask_plan(model, 1, imp, 1.0, MaskMode.AMSS, np.random.default_rng(0))
        assert all(np.all(m == 1) for m in plan.masks.values())

    def test_wrong_selection_count(self):
        model, imp = self._setup()
        with pytest.raises(ValueError, match="expected"):
            build_mask(model, 1, {"enc1.0": np.array([0]), "enc1.1": np.array([0]),
                                  "cls1": np.array([0])}, imp, 1.0, MaskMode.AMSS)

    def test_theoretical_without_inclusion(self):
        model, imp = self._setup()
        sel = {lid: np.arange(v.n_units) for lid, v in imp.items()}
        with pytest.raises(ValueError, match="inclusion"):
            build_mask(model, 1, sel, imp, 1.0, MaskMode.THEORETICAL_UNBIASED)

    def test_plans_are_deterministic(self):
        model, imp = self._setup()
        a = sample_mask_plan(model, 1, imp, 0.5, "amss_plus", np.random.default_rng(9))
        b = sample_mask_plan(model, 1, imp, 0.5, "amss_plus", np.random.default_rng(9))
        for name in a.masks:
            np.testing.assert_array_equal(a.masks[name], b.masks[name])


class TestUniformPlan:
    def test_ratio_one_all_ones(self, problem):
        model, _ = problem
        plan = uniform_mask_plan(model, 0, 1.0, "both", np.random.default_rng(0))
        assert all(np.all(m == 1) for m in plan.masks.values())

    def test_tiny_ratio_keeps_one_unit(self):
        model = build_model(ModelSpec((2, 2), ((5,), (5,)), 2), 0)
        plan = uniform_mask_plan(model, 0, 1e-6, "backbone", np.random.default_rng(0))
        assert plan.selection_counts() == {"enc0.0": 1}

    def test_unit_frequencies_are_uniform(self):
        model = build_model(ModelSpec((2, 2), ((5,), (5,)), 2), 0)
        rng = np.random.default_rng(3)
        draws = 20_000
        counts = np.zeros(5)
        for _ in range(draws):
            counts[uniform_mask_plan(model, 0, 0.4, "backbone", rng).selected["enc0.0"]] += 1
        expected = draws * 2 / 5
        sigma = np.sqrt(draws * 0.4 * 0.6)
        assert np.all(np.abs(counts - expected) <= 3 * sigma)

    def test_uniform_importance(self, problem):
        model, _ = problem
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            imp = uniform_importance(model, 1)
        np.testing.assert_allclose(imp["enc1.1"].p, 1 / 3)
