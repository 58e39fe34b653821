"""Loading weights and firing rates at unseen experimental conditions.

The condition GP is conditioned on the fitted weight posterior. With
A = K_*f K_ff^-1, the weights of neuron n at the new conditions are Gaussian
with mean (I_D (x) A) m_n and covariance
diag(1/E[tau]) (x) (K_** - A K_f*) + (I_D (x) A) V_n (I_D (x) A)^T.
"""
import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .kernels import condition_gram

logger = logging.getLogger(__name__)


@dataclass
class PredictionRequest:
    new_condition_coords: np.ndarray

    def __post_init__(self):
        coords = np.asarray(self.new_condition_coords, dtype=float)
        if coords.ndim == 1:
            coords = coords[:, None]
        if coords.ndim != 2 or coords.shape[0] == 0:
            raise ValueError("new_condition_coords must be a non-empty (M*, C) matrix.")
        if not np.all(np.isfinite(coords)):
            raise ValueError("new_condition_coords must be finite.")
        self.new_condition_coords = coords

    @property
    def n_conditions(self):
        return self.new_condition_coords.shape[0]


@dataclass
class WeightPrediction:
    """Per-neuron Gaussian over the d-major weight vector at the new conditions."""

    mean: np.ndarray
    cov: np.ndarray
    n_latents: int
    n_conditions: int

    def means(self):
        """(M*, N, D) array of predicted weight means."""
        N = self.mean.shape[0]
        return self.mean.reshape(N, self.n_latents, self.n_conditions).transpose(2, 0, 1)

    def cov_blocks(self):
        """(M*, N, D, D) covariance between latents at the same new condition."""
        N, D, M = self.mean.shape[0], self.n_latents, self.n_conditions
        return np.einsum('ndmem->mnde', self.cov.reshape(N, D, M, D, M))


@dataclass
class RatePrediction:
    rate: np.ndarray
    f_var: np.ndarray
    rate_var: np.ndarray


def _projection(state, grams, coords):
    if coords.shape[1] != state.condition_coords.shape[1]:
        raise ValueError(
            f"new conditions have {coords.shape[1]} coordinates, model has "
            f"{state.condition_coords.shape[1]}"
        )
    ell, kind = state.condition_lengthscales, state.condition_kernel
    nugget = grams.condition.jitter_used
    K_sf = condition_gram(coords, state.condition_coords, ell, kind)
    # exact matches see the same nugget as K_ff and select their training condition
    matches = np.all(coords[:, None, :] == state.condition_coords[None, :, :], axis=2)
    K_sf = K_sf + nugget * matches
    K_ss = condition_gram(coords, coords, ell, kind) + nugget * np.diag(matches.any(axis=1))
    A = grams.condition.solve(K_sf.T).T
    hit = np.flatnonzero(matches.any(axis=1))
    A[hit] = 0.0
    A[hit, matches[hit].argmax(axis=1)] = 1.0
    conditional = K_ss - A @ K_sf.T
    return A, 0.5 * (conditional + conditional.T)


def predict_weights(state, grams, request):
    A, conditional = _projection(state, grams, request.new_condition_coords)
    D, M, N = state.n_latents, state.n_conditions, state.n_neurons
    M_new = request.n_conditions
    logger.debug("Predicting weights at %d new conditions", M_new)

    means = state.mu_w.reshape(N, D, M) @ A.T
    V = state.cov_w.reshape(N, D, M, D, M)
    propagated = np.einsum('im,ndmek,jk->ndiej', A, V, A).reshape(N, D * M_new, D * M_new)
    prior = np.kron(np.diag(1.0 / state.tau), conditional)
    cov = prior[None] + propagated
    cov = 0.5 * (cov + cov.transpose(0, 2, 1))
    return WeightPrediction(
        mean=means.reshape(N, D * M_new), cov=cov, n_latents=D, n_conditions=M_new,
    )


def predict_rates(state, grams, request, weights=None):
    """Plug-in rates at the new conditions with a first-order variance proxy."""
    if weights is None:
        weights = predict_weights(state, grams, request)
    F = predicted_predictor(state, weights)
    f_var = np.einsum('dt,mnde,et->mnt', state.mu_x, weights.cov_blocks(), state.mu_x)
    f_var = np.maximum(f_var, 0.0)
    if state.likelihood == 'binomial':
        p = expit(F)
        rate = state.binomial_trials[None, :, None] * p
        slope = rate * (1.0 - p)
    else:
        rate = state.r_mean[None, :, None] * np.exp(F)
        slope = rate
    return RatePrediction(rate=rate, f_var=f_var, rate_var=slope ** 2 * f_var)


def predicted_predictor(state, weights):
    """Mean linear predictor (M*, N, T) implied by predicted weights."""
    return state.mu_beta[None, :, None] + np.einsum('mnd,dt->mnt', weights.means(), state.mu_x)
