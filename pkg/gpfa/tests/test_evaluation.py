import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose, assert_array_equal

from gpfa.evaluation import (
    HeldOutScore,
    leave_one_condition_out,
    loglik_per_bin,
    peak_rate_table,
    rate_mae,
    split_trials,
    truth_state,
)
from gpfa.exceptions import DatasetError
from gpfa.model_state import ModelConfig, plugin_rates
from gpfa.tensor_data import SpikeTensor
from gpfa.tests.factories import make_state, small_dataset


def labelled_trials(trials_per_condition):
    """Counts whose (0, 0) cell holds the trial index plus one."""
    M, R = len(trials_per_condition), max(trials_per_condition)
    counts = np.zeros((M, R, 1, 1), dtype=np.int64)
    counts[:, :, 0, 0] = np.arange(1, R + 1)
    mask = np.arange(R)[None, :] < np.asarray(trials_per_condition)[:, None]
    return SpikeTensor(counts, np.arange(M, dtype=float)[:, None], mask)


def trial_labels(data, m):
    return set(data.counts[m, data.trial_mask[m], 0, 0].tolist())


class SplitTrialsTests(SimpleTestCase):
    def test_disjoint_and_complete(self):
        data = labelled_trials([5, 6])
        train, test = split_trials(data, 3, seed=1)
        assert_array_equal(train.trials_per_condition, [3, 3])
        assert_array_equal(test.trials_per_condition, [2, 3])
        for m, total in enumerate([5, 6]):
            self.assertFalse(trial_labels(train, m) & trial_labels(test, m))
            self.assertEqual(trial_labels(train, m) | trial_labels(test, m), set(range(1, total + 1)))

    def test_seeded(self):
        data = labelled_trials([8, 8])
        first, _ = split_trials(data, 4, seed=3)
        second, _ = split_trials(data, 4, seed=3)
        self.assertTrue(first.equals(second))

    def test_everything_in_training(self):
        data = labelled_trials([2, 2])
        with self.assertLogs('gpfa.evaluation', level='WARNING'):
            train, test = split_trials(data, 2, seed=0)
        self.assertIsNone(test)
        self.assertEqual(train.n_observations, data.n_observations)

    def test_too_few_trials(self):
        with self.assertRaises(DatasetError):
            split_trials(labelled_trials([3, 1]), 2, seed=0)

    def test_condition_without_held_out_trial(self):
        with self.assertRaisesMessage(DatasetError, 'condition 1 has no held-out trial'):
            split_trials(labelled_trials([3, 2]), 2, seed=0)


class TruthMetricTests(SimpleTestCase):
    def test_truth_state_reproduces_rates(self):
        for likelihood in ('negbin', 'binomial'):
            data, truth = small_dataset(likelihood)
            reference = truth_state(truth, data)
            assert_allclose(plugin_rates(reference), truth.rates, rtol=1e-12)
            self.assertAlmostEqual(rate_mae(reference, truth), 0.0, places=12)

    def test_truth_beats_flat_model(self):
        data, truth = small_dataset(loading_scale=2.0, n_trials=20)
        flat = make_state(data)
        flat.mu_w[:] = 0.0
        self.assertGreater(loglik_per_bin(truth_state(truth, data), data), loglik_per_bin(flat, data))

    def test_shape_mismatch(self):
        data, _ = small_dataset()
        _, other = small_dataset(n_neurons=5)
        with self.assertRaises(DatasetError):
            rate_mae(make_state(data), other)
        with self.assertRaises(DatasetError):
            truth_state(other, data)

    def test_missing_test_set(self):
        data, _ = small_dataset()
        with self.assertRaisesMessage(DatasetError, 'no observations'):
            loglik_per_bin(make_state(data), None)


class PeakTableTests(SimpleTestCase):
    def test_columns_and_values(self):
        data, truth = small_dataset()
        state = truth_state(truth, data)
        table = peak_rate_table(state)
        self.assertEqual(list(table.columns), ['condition', 'neuron', 'peak_bin', 'peak_rate'])
        self.assertEqual(len(table), data.n_conditions * data.n_neurons)
        row = table[(table.condition == 2) & (table.neuron == 1)].iloc[0]
        self.assertEqual(row.peak_bin, truth.rates[2, 1].argmax())
        self.assertAlmostEqual(row.peak_rate, truth.rates[2, 1].max())


class LeaveOneConditionOutTests(SimpleTestCase):
    def test_scores_held_out_condition(self):
        data, _ = small_dataset(n_conditions=4)
        config = ModelConfig(n_latents=2, max_iters=3, time_lengthscales=3.0, threads=1)
        score = leave_one_condition_out(data, config, 1)
        self.assertIsInstance(score, HeldOutScore)
        self.assertEqual(score.condition, 1)
        self.assertTrue(np.isfinite(score.loglik) and np.isfinite(score.baseline_loglik))
        self.assertAlmostEqual(score.gain, score.loglik - score.baseline_loglik)

    def test_needs_two_conditions(self):
        data, _ = small_dataset(n_conditions=1)
        with self.assertRaises(ValueError):
            leave_one_condition_out(data, ModelConfig(n_latents=1, max_iters=1), 0)
