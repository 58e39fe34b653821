"""Metrics: trial splits, per-bin log-likelihood, rate error, ARD summaries.

Held-out trials share the posterior latents and weights of their condition;
no per-trial latent is re-inferred.
"""
import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .exceptions import DatasetError
from .inference import count_loglik, fit, monitor
from .model_state import VariationalState, model_grams, plugin_rates
from .predict import PredictionRequest, predict_weights, predicted_predictor

logger = logging.getLogger(__name__)


def split_trials(data, train_per_condition, seed):
    """Seeded disjoint split of every condition's trials.

    Returns ``(train, test)``; ``test`` is None when no condition keeps a
    held-out trial.
    """
    k = int(train_per_condition)
    available = data.trials_per_condition
    if k < 1:
        raise ValueError("train_per_condition must be at least 1.")
    short = np.flatnonzero(available < k)
    if short.size:
        raise DatasetError(
            f"condition {short[0]} has {available[short[0]]} trials, {k} requested for training"
        )

    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for m in range(data.n_conditions):
        order = rng.permutation(int(available[m]))
        train_idx.append(np.sort(order[:k]))
        test_idx.append(np.sort(order[k:]))

    train = data.select_trials(train_idx)
    sizes = np.array([len(idx) for idx in test_idx])
    if not sizes.any():
        logger.warning("All %d trials of every condition went to training; test set is empty", k)
        return train, None
    if not sizes.all():
        raise DatasetError(
            f"condition {int(np.flatnonzero(sizes == 0)[0])} has no held-out trial; "
            f"lower train_per_condition"
        )
    return train, data.select_trials(test_idx)


def loglik_per_bin(state, data):
    if data is None:
        raise DatasetError("no observations")
    return monitor(state, data)


def rate_mae(state, truth):
    rates = plugin_rates(state)
    if rates.shape != truth.rates.shape:
        raise DatasetError(f"rate shapes differ: model {rates.shape}, truth {truth.rates.shape}")
    return float(np.mean(np.abs(rates - truth.rates)))


def truth_state(truth, data, jitter=1e-8):
    """Degenerate posterior concentrated on the generating parameters."""
    M, N, D = truth.W.shape
    T = truth.X.shape[1]
    if (M, N, T) != (data.n_conditions, data.n_neurons, data.n_bins):
        raise DatasetError("ground truth does not match the dataset shape")
    ones = np.ones(D)
    trials = truth.binomial_trials if truth.binomial_trials is not None else np.ones(N)
    r = np.asarray(truth.r, dtype=float)
    return VariationalState(
        mu_x=np.array(truth.X, dtype=float),
        cov_x=np.zeros((D, T, T)),
        mu_w=truth.W.transpose(1, 2, 0).reshape(N, D * M),
        cov_w=np.zeros((N, D * M, D * M)),
        mu_beta=np.array(truth.beta, dtype=float),
        var_beta=np.zeros(N),
        r_mean=r,
        r_sq=r ** 2,
        r_log=np.log(np.maximum(r, np.finfo(float).tiny)),
        ard_shape=ones.copy(),
        ard_rate=ones.copy(),
        tau_beta_shape=1.0,
        tau_beta_rate=1.0,
        time_lengthscales=ones.copy(),
        condition_lengthscales=np.ones(data.condition_dims),
        condition_coords=data.condition_coords.copy(),
        binomial_trials=np.asarray(trials, dtype=float),
        prior_ard_shape=ones.copy(),
        prior_ard_rate=ones.copy(),
        prior_bias_shape=1.0,
        prior_bias_rate=1.0,
        likelihood=truth.likelihood,
        jitter=jitter,
    )


def peak_rate_table(state):
    """Peak plug-in rate and its bin for every (condition, neuron)."""
    rates = plugin_rates(state)
    M, N, _ = rates.shape
    condition, neuron = np.meshgrid(np.arange(M), np.arange(N), indexing='ij')
    return pd.DataFrame({
        'condition': condition.ravel(),
        'neuron': neuron.ravel(),
        'peak_bin': rates.argmax(axis=2).ravel(),
        'peak_rate': rates.max(axis=2).ravel(),
    })


@dataclass
class HeldOutScore:
    condition: int
    loglik: float
    baseline_loglik: float

    @property
    def gain(self):
        return self.loglik - self.baseline_loglik


def leave_one_condition_out(data, config, condition):
    """Fit without one condition, predict it, and score against weights = 0."""
    if data.n_conditions < 2:
        raise ValueError("leave-one-condition-out needs at least two conditions.")
    keep = [m for m in range(data.n_conditions) if m != condition]
    state, _ = fit(data.select_conditions(keep), config)

    held_out = data.select_conditions([condition])
    request = PredictionRequest(held_out.condition_coords)
    weights = predict_weights(state, model_grams(state), request)
    F = predicted_predictor(state, weights)
    baseline = np.broadcast_to(state.mu_beta[None, :, None], F.shape)

    param = state.binomial_trials if state.likelihood == 'binomial' else state.r_mean
    mask = held_out.observed()
    score = HeldOutScore(
        condition=int(condition),
        loglik=count_loglik(held_out.counts, mask, F, param, state.likelihood),
        baseline_loglik=count_loglik(held_out.counts, mask, baseline, param, state.likelihood),
    )
    logger.info(
        "Held-out condition %d: loglik %.4f, baseline %.4f", condition, score.loglik, score.baseline_loglik
    )
    return score
