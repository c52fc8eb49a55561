import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from powerlab.bandit import (
    BanditInstance,
    PreferenceDataset,
    PreferenceSample,
    SoftmaxPolicy,
    UnobservedPairError,
    bt_prob,
    empirical_stats,
    performance,
    policy_probs,
    sample_comparisons,
    sample_dataset,
    trial_rng,
)

E = math.e
unit = st.floats(0.0, 1.0, allow_nan=False)


def three_arm(rewards=(1.0, 0.0, 0.0), pairs=None):
    return BanditInstance(rewards, (1, 1, 1), pairs or {(0, 1): 0.9, (0, 2): 0.1})


class TestInstance:
    def test_pairs_are_stored_canonically(self):
        inst = BanditInstance((0.1, 0.2, 0.3), (1, 2, 3), {(1, 0): 0.25, (0, 1): 0.25, (2, 1): 0.5})
        assert inst.pair_dist == {(0, 1): 0.5, (1, 2): 0.5}
        assert inst.arm_count == 3

    @pytest.mark.parametrize(
        "rewards, lengths, pairs",
        [
            ((1.2, 0.0), (1, 1), {(0, 1): 1.0}),
            ((0.5, 0.5), (0, 1), {(0, 1): 1.0}),
            ((0.5, 0.5), (1, 1), {(0, 1): 0.9}),
            ((0.5, 0.5), (1, 1), {(0, 0): 1.0}),
            ((0.5, 0.5), (1, 1), {(0, 2): 1.0}),
        ],
    )
    def test_invalid_instances_are_rejected(self, rewards, lengths, pairs):
        with pytest.raises(ValueError):
            BanditInstance(rewards, lengths, pairs)

    def test_pair_sum_tolerance(self):
        BanditInstance((0, 1), (1, 1), {(0, 1): 1.0 + 5e-13})
        with pytest.raises(ValueError):
            BanditInstance((0, 1), (1, 1), {(0, 1): 1.0 + 1e-11})


class TestPolicy:
    def test_uniform_parameters(self):
        np.testing.assert_allclose(policy_probs(SoftmaxPolicy([1, 1, 1])), [1 / 3] * 3, atol=1e-15)

    def test_best_in_class_probabilities(self):
        p = policy_probs(SoftmaxPolicy([1, 0, 0]))
        np.testing.assert_allclose(p, [E / (2 + E), 1 / (2 + E), 1 / (2 + E)], atol=1e-15)
        np.testing.assert_allclose(p, [0.5761, 0.2119, 0.2119], atol=1e-4)

    @given(st.lists(unit, min_size=2, max_size=8))
    def test_probabilities_sum_to_one_and_logit_gap(self, theta):
        policy = SoftmaxPolicy(theta)
        p = policy.probs
        assert abs(p.sum() - 1) <= 1e-12
        assert np.all(p > 0)
        lp = policy.log_probs
        gaps = lp[:, None] - lp[None, :]
        np.testing.assert_allclose(gaps, np.subtract.outer(theta, theta), atol=1e-12)

    @pytest.mark.parametrize("params", [[0.5], [0.2, 1.5], [-0.1, 0.3], [np.nan, 0.0]])
    def test_parameters_outside_box_rejected(self, params):
        with pytest.raises(ValueError):
            SoftmaxPolicy(params)


class TestPerformance:
    def test_best_in_class_value(self):
        assert performance(SoftmaxPolicy([1, 0, 0]), three_arm()) == pytest.approx(E / (2 + E), abs=1e-15)
        assert performance(SoftmaxPolicy([1, 0, 0]), three_arm()) == pytest.approx(0.57611, abs=1e-5)

    def test_zero_rewards(self):
        assert performance(SoftmaxPolicy([0.3, 0.9, 0.1]), three_arm((0, 0, 0))) == 0.0

    def test_uniform_policy(self):
        assert performance(SoftmaxPolicy([0, 0, 0]), three_arm((0, 0, 1))) == pytest.approx(1 / 3, abs=1e-15)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            performance(SoftmaxPolicy([0, 0]), three_arm())

    @given(st.lists(unit, min_size=3, max_size=3), st.lists(unit, min_size=3, max_size=3),
           st.lists(unit, min_size=3, max_size=3))
    def test_linear_in_rewards(self, theta, r1, r2):
        r1, r2 = np.array(r1) / 2, np.array(r2) / 2
        pi = SoftmaxPolicy(theta)
        total = performance(pi, three_arm(r1 + r2))
        assert abs(total - performance(pi, three_arm(r1)) - performance(pi, three_arm(r2))) <= 1e-12


class TestBradleyTerry:
    def test_equal_rewards(self):
        assert bt_prob(three_arm((0.3, 0.3, 0)), 0, 1) == 0.5

    def test_unit_gap(self):
        inst = three_arm((1, 0, 0))
        assert bt_prob(inst, 2, 0) == pytest.approx(1 / (1 + E), abs=1e-15)
        assert bt_prob(inst, 2, 0) == pytest.approx(0.26894, abs=1e-5)
        assert bt_prob(inst, 0, 2) == pytest.approx(0.73106, abs=1e-5)

    def test_identical_arms(self):
        with pytest.raises(ValueError):
            bt_prob(three_arm(), 1, 1)

    @given(unit, unit)
    def test_complement(self, a, b):
        inst = BanditInstance((a, b), (1, 1), {(0, 1): 1.0})
        assert abs(bt_prob(inst, 0, 1) + bt_prob(inst, 1, 0) - 1.0) <= 1e-15


class TestSampling:
    def test_single_coverage_frequency(self):
        n = 10
        inst = BanditInstance((1, 0, 0), (1, 1, 1), {(0, 1): 1 - 1 / n, (0, 2): 1 / n})
        a, b, _ = sample_comparisons(inst, (100_000, n), np.random.default_rng(1))
        freq = np.mean(((a == 2) & (b == 0)).sum(axis=1) == 1)
        assert abs(freq - 0.9**9) <= 0.01

    def test_degenerate_pair_distribution(self):
        ds = sample_dataset(three_arm(pairs={(1, 2): 1.0}), 200, 3)
        assert np.all(ds.arm_b == 1) and np.all(ds.arm_a == 2)

    def test_label_frequency_matches_bt(self):
        inst = BanditInstance((0, 1), (1, 1), {(0, 1): 1.0})
        ds = sample_dataset(inst, 100_000, 5)
        assert abs(ds.label.mean() - bt_prob(inst, 1, 0)) <= 0.01

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25)
    def test_reproducible(self, seed):
        assert sample_dataset(three_arm(), 30, seed) == sample_dataset(three_arm(), 30, seed)

    def test_trial_streams_differ(self):
        assert trial_rng(7, 0).random() != trial_rng(7, 1).random()
        assert trial_rng(7, 3).random() == trial_rng(7, 3).random()

    def test_n_must_be_positive(self):
        with pytest.raises(ValueError):
            sample_dataset(three_arm(), 0, 1)


class TestDataset:
    def test_sample_roundtrip(self):
        samples = [PreferenceSample(1, 0, 1), PreferenceSample(2, 0, 0, 0.25)]
        ds = PreferenceDataset.from_samples(3, samples)
        assert ds.samples == samples
        assert ds.n == len(ds) == 2
        assert ds.winners.tolist() == [1, 0] and ds.losers.tolist() == [0, 2]

    @pytest.mark.parametrize("a, b, label", [(1, 1, 1), (1, 0, 2)])
    def test_invalid_samples(self, a, b, label):
        with pytest.raises(ValueError):
            PreferenceSample(a, b, label)
        with pytest.raises(ValueError):
            PreferenceDataset(3, [a], [b], [label])


class TestEmpiricalStats:
    def test_direct_count(self):
        ds = PreferenceDataset(3, [1, 1, 1], [0, 0, 0], [1, 1, 0])
        stats = empirical_stats(ds)
        assert stats.pair_freq(0, 1) == 1.0
        assert stats.win_freq(1, 0) == pytest.approx(2 / 3)
        assert stats.win_freq(0, 1) == pytest.approx(1 / 3)

    def test_unobserved_pair_is_signalled(self):
        stats = empirical_stats(PreferenceDataset(3, [1], [0], [1]))
        with pytest.raises(UnobservedPairError):
            stats.win_freq(2, 0)
        assert np.isnan(stats.win_freq_matrix[0, 2])

    def test_large_sample_within_binomial_bound(self):
        inst = BanditInstance((0.2, 0.9), (1, 1), {(0, 1): 1.0})
        n = 50_000
        stats = empirical_stats(sample_dataset(inst, n, 11))
        p = bt_prob(inst, 1, 0)
        assert abs(stats.win_freq(1, 0) - p) <= 3 * math.sqrt(p * (1 - p) / n)

    @given(st.integers(0, 10_000))
    @settings(max_examples=25)
    def test_frequencies_form_a_distribution(self, seed):
        inst = BanditInstance((0.1, 0.5, 0.9), (1, 1, 1), {(0, 1): 0.3, (0, 2): 0.3, (1, 2): 0.4})
        stats = empirical_stats(sample_dataset(inst, 40, seed))
        freq = stats.pair_freq_matrix
        assert np.all(freq >= 0)
        assert abs(np.triu(freq, 1).sum() - 1) <= 1e-12
        wins = stats.win_freq_matrix
        observed = stats.pair_counts > 0
        np.testing.assert_allclose((wins + wins.T)[observed], 1.0)
