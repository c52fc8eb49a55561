import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from powerlab.bandit import BanditInstance, PreferenceDataset, SoftmaxPolicy
from powerlab.hard_instances import force_event, make_bundle
from powerlab.objectives import (
    METHODS,
    REQUIRED,
    LossContext,
    MethodSpec,
    MissingHyperparameterError,
    TiePreferenceError,
    canonical_method,
    grad,
    grad_batch,
    loss,
    loss_and_grad,
    loss_batch,
    stationary_label,
    stationary_targets,
    update_labels,
)
from powerlab.oracle import grid_search_optimum, random_context, random_spec

LOG2 = math.log(2)


def _log_sigmoid(x):
    return -math.log1p(math.exp(-x)) if x >= 0 else x - math.log1p(math.exp(x))


def three_arm_ctx(theta, theta0=(1, 1, 1), samples=((2, 0, 1),), lengths=(1, 1, 1), mask=None):
    inst = BanditInstance((1, 0, 0), lengths, {(0, 1): 0.9, (0, 2): 0.1})
    a, b, lab = zip(*samples)
    return LossContext(theta, theta0, PreferenceDataset(3, a, b, lab), inst, mask)


class TestSpec:
    def test_aliases(self):
        assert canonical_method("SimPO") == "simpo"
        assert canonical_method("xpo") == "chipo"
        with pytest.raises(ValueError):
            canonical_method("nope")

    def test_missing_hyperparameter(self):
        ctx = three_arm_ctx((1, 1, 1))
        with pytest.raises(MissingHyperparameterError):
            loss(MethodSpec("dpo"), ctx)
        with pytest.raises(MissingHyperparameterError):
            MethodSpec("power", beta=1.0).validate()

    @pytest.mark.parametrize("kwargs", [dict(tau=0.0), dict(c_flip=1.0), dict(beta=-1.0), dict(dyn_gamma=1.5)])
    def test_out_of_range_hyperparameters(self, kwargs):
        with pytest.raises(ValueError):
            MethodSpec("dpo", **kwargs)

    @pytest.mark.parametrize("method", METHODS)
    def test_dict_roundtrip(self, method):
        spec = random_spec(method, np.random.default_rng(3))
        assert MethodSpec.from_dict(spec.to_dict()) == spec
        assert spec.label.startswith(spec.display_name + "(")


class TestLossExamples:
    @pytest.mark.parametrize("beta", [0.01, 0.1, 1.0, 7.0])
    def test_dpo_at_reference(self, beta):
        ctx = three_arm_ctx((0.3, 0.6, 0.9), (0.3, 0.6, 0.9), samples=((2, 0, 1), (1, 0, 0), (2, 1, 1)))
        assert loss(MethodSpec("dpo", beta=beta), ctx) == pytest.approx(LOG2, abs=1e-15)

    def test_simpo_equal_parameters(self):
        ctx = three_arm_ctx((0.5, 0.2, 0.5), samples=((2, 0, 1),))
        assert loss(MethodSpec("simpo", beta=2.0, gamma_margin=0.0), ctx) == pytest.approx(LOG2, abs=1e-15)

    def test_power_equal_parameters(self):
        ctx = three_arm_ctx((1, 1, 1))
        assert loss(MethodSpec("power", beta=1.0, eta=0.0), ctx) == pytest.approx(LOG2, abs=1e-15)

    def test_ipo_at_reference(self):
        ctx = three_arm_ctx((0.4, 0.1, 0.8), (0.4, 0.1, 0.8))
        assert loss(MethodSpec("ipo", tau=1.0), ctx) == pytest.approx(0.25, abs=1e-15)

    def test_chipo_at_reference(self):
        ctx = three_arm_ctx((0.4, 0.1, 0.8), (0.4, 0.1, 0.8))
        assert loss(MethodSpec("chipo", beta=0.3, clip_radius=1.0), ctx) == pytest.approx(LOG2, abs=1e-15)

    def test_loss_is_a_mean(self):
        spec = MethodSpec("dpo", beta=0.5)
        one = three_arm_ctx((0.2, 0.9, 0.5), samples=((2, 0, 1),))
        two = three_arm_ctx((0.2, 0.9, 0.5), samples=((1, 0, 0),))
        both = three_arm_ctx((0.2, 0.9, 0.5), samples=((2, 0, 1), (1, 0, 0)))
        assert loss(spec, both) == pytest.approx((loss(spec, one) + loss(spec, two)) / 2, abs=1e-15)

    def test_dpo_matches_scalar_reimplementation(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            ctx = random_context(rng)
            beta = rng.uniform(0.1, 3)
            lp, lp0 = SoftmaxPolicy(ctx.theta).log_probs, SoftmaxPolicy(ctx.theta0).log_probs
            total = 0.0
            for s in ctx.dataset:
                w, l = (s.arm_a, s.arm_b) if s.label == 1 else (s.arm_b, s.arm_a)
                total += -_log_sigmoid(beta * ((lp[w] - lp0[w]) - (lp[l] - lp0[l])))
            assert loss(MethodSpec("dpo", beta=beta), ctx) == pytest.approx(total / ctx.dataset.n, rel=1e-12)


def power_by_composition(beta, eta, ctx, weights):
    """Bradley-Terry loss on rewards beta * (w log pi + w), plus the weighted SFT term."""
    lp = SoftmaxPolicy(ctx.theta).log_probs
    reward = beta * (weights * lp + weights)
    total = 0.0
    for s in ctx.dataset:
        w, l = (s.arm_a, s.arm_b) if s.label == 1 else (s.arm_b, s.arm_a)
        total += -_log_sigmoid(reward[w] - reward[l]) - eta * beta * weights[w] * lp[w]
    return total / ctx.dataset.n


class TestIdentities:
    def test_power_composes_bt_loss_with_implied_rewards(self):
        rng = np.random.default_rng(21)
        for _ in range(100):
            ctx = random_context(rng)
            beta, eta = rng.uniform(0.1, 5), rng.choice([0.0, rng.uniform(0, 2)])
            spec = MethodSpec("power", beta=beta, eta=eta)
            w = 1.0 / ctx.instance.lengths
            assert abs(loss(spec, ctx) - power_by_composition(beta, eta, ctx, w)) <= 1e-10

    def test_cdpo_without_flips_is_dpo(self):
        rng = np.random.default_rng(22)
        for _ in range(100):
            ctx, beta = random_context(rng), rng.uniform(0.1, 5)
            a, b = MethodSpec("cdpo", beta=beta, c_flip=0.0), MethodSpec("dpo", beta=beta)
            assert abs(loss(a, ctx) - loss(b, ctx)) <= 1e-10
            np.testing.assert_allclose(grad(a, ctx), grad(b, ctx), atol=1e-10, rtol=0)

    def test_power_dl_with_unit_labels_is_power(self):
        rng = np.random.default_rng(23)
        for _ in range(100):
            ctx = random_context(rng)
            ctx = ctx.with_labels(np.ones(ctx.dataset.n))
            beta, eta = rng.uniform(0.1, 5), rng.uniform(0, 2)
            a = MethodSpec("power-dl", beta=beta, eta=eta, dyn_gamma=0.3)
            b = MethodSpec("power", beta=beta, eta=eta)
            assert abs(loss(a, ctx) - loss(b, ctx)) <= 1e-10
            np.testing.assert_allclose(grad(a, ctx), grad(b, ctx), atol=1e-10, rtol=0)

    def test_power_dl_with_zero_labels_swaps_roles(self):
        ctx = three_arm_ctx((0.1, 0.7, 0.4), samples=((2, 0, 1),))
        flipped = three_arm_ctx((0.1, 0.7, 0.4), samples=((2, 0, 0),))
        a = MethodSpec("power-dl", beta=1.3, eta=0.4, dyn_gamma=0.1)
        b = MethodSpec("power", beta=1.3, eta=0.4)
        assert loss(a, ctx.with_labels([0.0])) == pytest.approx(loss(b, flipped), abs=1e-12)

    def test_dpo_and_simpo_agree_on_unit_lengths_and_uniform_reference(self):
        ctx = three_arm_ctx((0.2, 0.8, 0.5), (0.0, 0.0, 0.0), samples=((2, 0, 1), (2, 1, 0)))
        dpo = MethodSpec("dpo", beta=1.7)
        simpo = MethodSpec("simpo", beta=1.7, gamma_margin=0.0)
        assert loss(dpo, ctx) == pytest.approx(loss(simpo, ctx), abs=1e-12)

    def test_chipo_saturates_beyond_clip(self):
        spec = MethodSpec("chipo", beta=1.0, clip_radius=0.25)
        ctx = three_arm_ctx((0.0, 0.0, 1.0), (0.0, 0.5, 0.0))
        assert loss(spec, ctx) == pytest.approx(-_log_sigmoid(0.5), abs=1e-15)
        np.testing.assert_array_equal(grad(spec, ctx), 0.0)


class TestGradients:
    @pytest.mark.parametrize("method", METHODS)
    def test_masked_coordinates_are_exactly_zero(self, method):
        spec = random_spec(method, np.random.default_rng(5))
        ctx = three_arm_ctx((0.3, 0.6, 0.2), (0.5, 0.5, 0.5), samples=((2, 0, 1), (1, 0, 0)),
                            lengths=(1, 2, 3), mask=(True, False, True))
        g = grad(spec, ctx)
        assert g[0] == 0.0 and g[2] == 0.0

    @pytest.mark.parametrize("method", METHODS)
    def test_batched_matches_single(self, method):
        rng = np.random.default_rng(6)
        spec, ctx = random_spec(method, rng), random_context(rng)
        thetas = rng.uniform(0.05, 0.95, (7, ctx.instance.arm_count))
        batch_g, batch_l = grad_batch(spec, ctx, thetas), loss_batch(spec, ctx, thetas)
        for row, g, value in zip(thetas, batch_g, batch_l):
            single_l, single_g = loss_and_grad(spec, ctx, row)
            assert value == pytest.approx(single_l, rel=1e-12, abs=1e-14)
            np.testing.assert_allclose(g, single_g, rtol=1e-10, atol=1e-13)

    @pytest.mark.parametrize("setup, tau, optimum", [("instance2", 1.0, 0.5), ("instance2", 0.625, 0.8),
                                                      ("type2", 0.625, 0.2)])
    def test_vanishes_at_grid_search_stationary_point(self, setup, tau, optimum):
        bundle = make_bundle(setup, 10)
        ctx = bundle.context(force_event(bundle, seed=4))
        spec = MethodSpec("ipo", tau=tau)
        theta, _ = grid_search_optimum(spec, ctx, 1e-4)
        assert theta[2] == pytest.approx(optimum, abs=1e-12)
        assert np.max(np.abs(grad(spec, ctx.with_theta(theta))[ctx.free])) <= 1e-6

    def test_grad_has_zero_sum_without_mask(self):
        rng = np.random.default_rng(9)
        for method in METHODS:
            spec, ctx = random_spec(method, rng), random_context(rng)
            ctx = LossContext(ctx.theta, ctx.theta0, ctx.dataset, ctx.instance)
            assert abs(grad(spec, ctx).sum()) <= 1e-10


class TestLabels:
    def test_stationary_label_examples(self):
        assert stationary_label(math.log(3), 0.75, 0.25) == pytest.approx(1.0, abs=1e-15)
        assert stationary_label(-math.log(3), 0.75, 0.25) == pytest.approx(0.0, abs=1e-15)
        assert stationary_label(0.0, 0.75, 0.25) == pytest.approx(0.5, abs=1e-15)

    def test_stationary_label_rejects_ties_and_bad_pairs(self):
        with pytest.raises(TiePreferenceError):
            stationary_label(0.3, 0.5, 0.5)
        with pytest.raises(ValueError):
            stationary_label(0.3, 0.7, 0.7)

    def test_update_examples(self):
        labels, target = np.array([1.0, 0.2]), np.array([0.5, 0.9])
        np.testing.assert_array_equal(update_labels(labels, target, 0.0), labels)
        np.testing.assert_array_equal(update_labels(labels, target, 1.0), target)
        assert update_labels(1.0, 0.5, 0.1) == pytest.approx(0.95, abs=1e-15)
        with pytest.raises(ValueError):
            update_labels(labels, target, 1.1)

    @given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
    def test_update_is_a_convex_combination(self, label, target, gamma):
        out = update_labels(label, target, gamma)
        assert min(label, target) - 1e-15 <= out <= max(label, target) + 1e-15

    def test_aggregate_targets_zero_the_pair_gradient(self):
        inst = BanditInstance((0.0, 1.0), (1, 1), {(0, 1): 1.0})
        ds = PreferenceDataset(2, [1, 1, 1, 1], [0, 0, 0, 0], [1, 1, 1, 0])
        spec = MethodSpec("power-dl", beta=1.0, eta=0.0, dyn_gamma=1.0, weights="constant")
        ctx = LossContext((0.2, 0.9), (0.5, 0.5), ds, inst)
        targets = stationary_targets(spec, ctx)
        g = grad(spec, ctx.with_labels(targets))
        np.testing.assert_allclose(g, 0.0, atol=1e-14)

    def test_tied_pairs_keep_their_label(self):
        inst = BanditInstance((0.0, 1.0), (1, 1), {(0, 1): 1.0})
        ds = PreferenceDataset(2, [1, 1], [0, 0], [1, 0], [0.7, 0.4])
        spec = MethodSpec("power-dl", beta=1.0, eta=0.0, dyn_gamma=0.5)
        np.testing.assert_array_equal(stationary_targets(spec, LossContext((0.2, 0.9), (0.5, 0.5), ds, inst)), [0.7, 0.4])

    def test_per_sample_targets_are_learned_preferences(self):
        ctx = three_arm_ctx((0.1, 0.7, 0.4))
        spec = MethodSpec("power-dl", beta=2.0, eta=0.0, dyn_gamma=0.5, label_estimate="per_sample")
        lp = SoftmaxPolicy(ctx.theta).log_probs
        expected = 1 / (1 + math.exp(-2.0 * (lp[2] - lp[0])))
        assert stationary_targets(spec, ctx)[0] == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("method", METHODS)
def test_every_method_lists_required_hyperparameters(method):
    assert set(REQUIRED[method]) <= {f for f in MethodSpec.__dataclass_fields__}
    with pytest.raises(MissingHyperparameterError):
        loss(MethodSpec(method), three_arm_ctx((0.5, 0.5, 0.5)))
