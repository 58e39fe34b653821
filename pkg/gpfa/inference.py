"""Augmented variational EM for CS-GPFA.

The E-step cycles closed-form updates of every q factor; the M-step moves the
kernel log-lengthscales uphill on the terms of the bound that depend on the
Gram matrices. Convergence is judged on the plug-in per-bin log-likelihood.

Every Gaussian update uses the prior-whitened form
V = L (I + L^T S L)^{-1} L^T, with L the Cholesky factor of the prior
covariance, so nearly singular SE Grams are never inverted.
"""
import logging
import time
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed
from scipy import linalg
from scipy.special import digamma, gammaln, polygamma

from .augment_dists import (
    PGParams,
    PTNParams,
    log_cosh,
    pg_mean,
    pg_moment_match_gamma,
    pig_mean,
    ptn_moments,
)
from .conf import get_setting
from .exceptions import DatasetError, NumericalError
from .kernels import SEKernelParams, factorize, se_gram, se_gram_grad_loglengthscale, time_points
from .model_state import f_moments, initialize_state, latent_second_moments, model_grams

logger = logging.getLogger(__name__)

MAX_HALVINGS = 30
LOG_LENGTHSCALE_BOUNDS = (np.log(1e-3), np.log(1e6))
STEP_RTOL = 1e-10
GRADIENT_FLOOR = 1e-12


@dataclass
class FitReport:
    monitor: list
    iterations_run: int
    converged: bool
    time_lengthscales: list
    condition_lengthscales: list
    retained_dims: list
    likelihood: str
    seconds: float = 0.0
    timings: dict = field(default_factory=dict)

    def trace_rows(self):
        """(iteration, monitor, seconds) per iteration; seconds is None for resumed iterations."""
        return [
            (i + 1, value, self.timings.get(i + 1))
            for i, value in enumerate(self.monitor)
        ]


def _parallel(threads):
    return Parallel(n_jobs=threads or -1, prefer='threads')


def _counts(state, data):
    Y = data.counts.astype(float)
    if state.likelihood == 'binomial':
        # counts above k_n (possible on held-out trials) are clipped
        Y = np.minimum(Y, state.binomial_trials[None, None, :, None])
    return Y


def _pg_shape(state, Y):
    if state.likelihood == 'binomial':
        return np.broadcast_to(state.binomial_trials[None, None, :, None], Y.shape)
    return Y + state.r_mean[None, None, :, None]


def _aggregates(state, data):
    """Trial sums of E[omega] and of kappa = Y - b/2, both (M, N, T).

    kappa is E[omega] times the pseudo-observation of the Gaussian form.
    """
    Y = _counts(state, data)
    mask = data.observed()
    kappa = Y - 0.5 * _pg_shape(state, Y)
    return (mask * state.omega).sum(axis=1), (mask * kappa).sum(axis=1)


def _whitened_posterior(L, S, h):
    """Mean and covariance of N(0, L L^T) updated by precision S and linear term h."""
    size = L.shape[0]
    B = np.eye(size) + L.T @ S @ L
    try:
        LB = linalg.cholesky(B, lower=True)
    except linalg.LinAlgError as exc:
        raise NumericalError("posterior precision is not positive definite") from exc
    C = linalg.solve_triangular(LB, L.T, lower=True)
    cov = C.T @ C
    return cov @ h, cov


def update_aug_gamma(state, data):
    """E[log tau] = digamma(Y + E[r]) for the Gamma augmentation of Gamma(Y + r)."""
    if state.likelihood == 'negbin':
        state.log_tau = digamma(data.counts + state.r_mean[None, None, :, None])
    return state


def update_aug_pig(state):
    if state.likelihood == 'negbin':
        state.xi = np.atleast_1d(pig_mean(np.sqrt(state.r_sq)))
    return state


def update_aug_pg(state, data):
    moments = f_moments(state)
    Y = _counts(state, data)
    tilt = np.sqrt(moments.EF2)[:, None]
    state.omega = np.asarray(pg_mean(PGParams(_pg_shape(state, Y), tilt)))
    return state


def update_q_W(state, data, grams, threads=None):
    Omega, kappa = _aggregates(state, data)
    D, M, N = state.n_latents, state.n_conditions, state.n_neurons
    L = np.kron(np.diag(state.tau ** -0.5), grams.condition.chol)

    resid = kappa - Omega * state.mu_beta[None, :, None]
    linear = np.einsum('dt,mnt->ndm', state.mu_x, resid).reshape(N, D * M)
    blocks = np.einsum('tde,mnt->nmde', latent_second_moments(state), Omega)
    diag = np.arange(M)

    def solve(n):
        S = np.zeros((D, M, D, M))
        S[:, diag, :, diag] = blocks[n]
        return _whitened_posterior(L, S.reshape(D * M, D * M), linear[n])

    results = _parallel(threads)(delayed(solve)(n) for n in range(N))
    state.mu_w = np.stack([mean for mean, _ in results])
    state.cov_w = np.stack([cov for _, cov in results])
    return state


def update_q_X(state, data, grams):
    """Sequential over latents; each sees the others' current means."""
    Omega, kappa = _aggregates(state, data)
    EW = state.weight_means()
    EWW = state.weight_second_moments()
    resid = kappa - Omega * state.mu_beta[None, :, None]

    for d in range(state.n_latents):
        precision = np.einsum('mn,mnt->t', EWW[:, :, d, d], Omega)
        cross = (
            np.einsum('mne,et->mnt', EWW[:, :, d, :], state.mu_x)
            - EWW[:, :, d, d][:, :, None] * state.mu_x[d]
        )
        linear = np.einsum('mn,mnt->t', EW[:, :, d], resid) - np.einsum('mnt,mnt->t', Omega, cross)
        mean, cov = _whitened_posterior(grams.time[d].chol, np.diag(precision), linear)
        state.mu_x[d] = mean
        state.cov_x[d] = cov
    return state


def update_q_beta(state, data):
    Omega, kappa = _aggregates(state, data)
    WX = np.einsum('mnd,dt->mnt', state.weight_means(), state.mu_x)
    precision = state.tau_beta + Omega.sum(axis=(0, 2))
    state.var_beta = 1.0 / precision
    state.mu_beta = state.var_beta * (kappa - Omega * WX).sum(axis=(0, 2))
    return state


def update_q_tau_beta(state):
    state.tau_beta_shape = state.prior_bias_shape + 0.5 * state.n_neurons
    state.tau_beta_rate = state.prior_bias_rate + 0.5 * float(np.sum(state.mu_beta ** 2 + state.var_beta))
    return state


def update_q_ard(state, grams):
    D, M, N = state.n_latents, state.n_conditions, state.n_neurons
    L = grams.condition.chol
    means = state.mu_w.reshape(N, D, M)
    blocks = state.cov_w.reshape(N, D, M, D, M)

    whitened = linalg.solve_triangular(L, means.reshape(N * D, M).T, lower=True)
    energy = (whitened ** 2).sum(axis=0).reshape(N, D).sum(axis=0)
    trace = np.zeros(D)
    for n in range(N):
        for d in range(D):
            half = linalg.solve_triangular(L, blocks[n, d, :, d, :], lower=True)
            trace[d] += np.trace(linalg.solve_triangular(L, half.T, lower=True))

    state.ard_shape = state.prior_ard_shape + 0.5 * M * N
    state.ard_rate = state.prior_ard_rate + 0.5 * (energy + trace)
    return state


def dispersion_curvature(y, r, tilt):
    """Second derivative in r of pg_cross_entropy, i.e. -(d alpha/dr)^2 trigamma(alpha)."""
    slope = pg_moment_match_gamma(PGParams(1.0, tilt)).shape
    return -slope ** 2 * polygamma(1, slope * (y + r))


def pg_cross_entropy(r, y, r_ref, tilt):
    """r-dependent part of E[log Gamma(omega | alpha(r), rate)] with q(omega) at r_ref."""
    slope = pg_moment_match_gamma(PGParams(1.0, tilt)).shape
    return slope * (y + r) * digamma(slope * (y + r_ref)) - gammaln(slope * (y + r))


def dispersion_params(state, data, n, moments=None):
    """PTN parameters of q(r_n) from the current augmented moments."""
    if moments is None:
        moments = f_moments(state)
    observed = data.trial_mask
    rows = np.nonzero(observed)[0]
    y = data.counts[:, :, n, :][observed].astype(float)
    tilt = np.sqrt(moments.EF2[rows, n, :])
    EF = moments.EF[rows, n, :]
    log_tau = state.log_tau[:, :, n, :][observed]

    curvature = np.abs(dispersion_curvature(y, state.r_mean[n], tilt))
    linear = np.sum(log_tau + np.euler_gamma - np.log(2.0) - 0.5 * EF - log_cosh(tilt / 2.0))
    return PTNParams(
        p=float(y.size),
        a=float(y.size * state.xi[n] + 0.5 * curvature.sum()),
        b_lin=float(linear + curvature.sum() * state.r_mean[n]),
    )


def update_q_r(state, data, threads=None):
    if state.likelihood != 'negbin':
        return state
    moments = f_moments(state)
    results = _parallel(threads)(
        delayed(ptn_moments)(dispersion_params(state, data, n, moments))
        for n in range(state.n_neurons)
    )
    state.r_mean, state.r_sq, state.r_log = (np.array(v) for v in zip(*results))
    return state


def count_loglik(counts, mask, F, param, likelihood):
    """Mean per-bin log-likelihood of counts (M, R, N, T) under predictor F (M, N, T).

    ``param`` is the per-neuron dispersion r (negbin) or trial count k (binomial).
    ``mask`` is broadcastable against counts and selects observed trials.
    """
    Y = np.asarray(counts, dtype=float)
    log_p = -np.logaddexp(0.0, -F)[:, None]
    log_q = -np.logaddexp(0.0, F)[:, None]
    param = np.asarray(param, dtype=float)[None, None, :, None]
    if likelihood == 'binomial':
        Y = np.minimum(Y, param)
        ll = (gammaln(param + 1) - gammaln(Y + 1) - gammaln(param - Y + 1)
              + Y * log_p + (param - Y) * log_q)
    else:
        ll = gammaln(Y + param) - gammaln(param) - gammaln(Y + 1) + Y * log_p + param * log_q
    mask = np.broadcast_to(mask, Y.shape)
    if not mask.any():
        raise DatasetError("no observations")
    return float((ll * mask).sum() / mask.sum())


def _check_compatible(state, data):
    expected = (state.n_conditions, state.n_neurons, state.n_bins)
    found = (data.n_conditions, data.n_neurons, data.n_bins)
    if expected != found:
        raise DatasetError(f"data has (M, N, T) = {found}, model expects {expected}")


def monitor(state, data):
    _check_compatible(state, data)
    param = state.binomial_trials if state.likelihood == 'binomial' else state.r_mean
    return count_loglik(data.counts, data.observed(), f_moments(state).EF, param, state.likelihood)


def _gram_objective(points, lengthscales, second_moment, count, jitter):
    """-1/2 tr(K^-1 A) - count/2 log|K| and its gradient in log-lengthscale."""
    params = SEKernelParams(tuple(lengthscales))
    grams = factorize(se_gram(points, points, params), jitter)
    KiA = grams.solve(second_moment)
    value = -0.5 * np.trace(KiA) - 0.5 * count * grams.log_det
    dK = se_gram_grad_loglengthscale(points, params)
    KiAKi = grams.solve(KiA.T)
    grad = 0.5 * np.einsum('kij,ij->k', dK, KiAKi) - 0.5 * count * np.einsum('kij,ij->k', dK, grams.inverse())
    return value, grad


def time_objective(state, d, lengthscale):
    second = state.cov_x[d] + np.outer(state.mu_x[d], state.mu_x[d])
    return _gram_objective(time_points(state.n_bins), (lengthscale,), second, 1, state.jitter)


def condition_objective(state, lengthscales):
    D, M, N = state.n_latents, state.n_conditions, state.n_neurons
    means = state.mu_w.reshape(N, D, M)
    blocks = np.einsum('ndmdk->ndmk', state.cov_w.reshape(N, D, M, D, M))
    second = blocks + means[..., :, None] * means[..., None, :]
    weighted = np.einsum('d,ndmk->mk', state.tau, second)
    return _gram_objective(state.condition_coords, lengthscales, weighted, N * D, state.jitter)


def _ascend(objective, log_params, steps, step_size):
    low, high = LOG_LENGTHSCALE_BOUNDS
    log_params = np.clip(log_params, low, high)
    value, grad = objective(np.exp(log_params))
    for _ in range(steps):
        if not np.all(np.isfinite(grad)) or np.max(np.abs(grad)) < GRADIENT_FLOOR:
            break
        # steps that lose only rounding against the current value are accepted
        floor = value - STEP_RTOL * max(1.0, abs(value))
        step = step_size
        for _ in range(MAX_HALVINGS):
            proposal = np.clip(log_params + step * grad, low, high)
            try:
                new_value, new_grad = objective(np.exp(proposal))
            except (NumericalError, ValueError):
                step /= 2.0
                continue
            if np.isfinite(new_value) and new_value >= floor:
                break
            step /= 2.0
        else:
            logger.debug("M-step found no improving step; keeping %s", np.exp(log_params))
            break
        log_params, value, grad = proposal, new_value, new_grad
    return np.exp(log_params)


def m_step(state, steps=None, step_size=None):
    """Gradient ascent on log-lengthscales with backtracking halving.

    Log-lengthscales stay inside LOG_LENGTHSCALE_BOUNDS. The identity condition
    kernel has no lengthscales to learn.
    """
    steps = get_setting('MSTEP_STEPS') if steps is None else steps
    step_size = get_setting('MSTEP_STEP_SIZE') if step_size is None else step_size
    with np.errstate(over='ignore'):
        for d in range(state.n_latents):
            state.time_lengthscales[d] = _ascend(
                lambda theta: time_objective(state, d, theta[0]),
                np.log(state.time_lengthscales[d:d + 1]),
                steps, step_size,
            )[0]
        if state.condition_kernel == 'se':
            state.condition_lengthscales = _ascend(
                lambda ell: condition_objective(state, ell),
                np.log(state.condition_lengthscales),
                steps, step_size,
            )
    return state


def e_step(state, data, grams, threads=None):
    update_aug_gamma(state, data)
    update_aug_pig(state)
    update_aug_pg(state, data)
    update_q_W(state, data, grams, threads)
    update_q_X(state, data, grams)
    update_q_beta(state, data)
    update_q_tau_beta(state)
    update_q_r(state, data, threads)
    update_q_ard(state, grams)
    return state


def retained_dimensions(state, threshold=None):
    """Latents whose loading energy exceeds threshold times the largest.

    The energy of latent d is (E[tau_d]^-1/2 max_n ||E[W[:, n, d]]||)^2.
    """
    if threshold is None:
        threshold = get_setting('RETENTION_THRESHOLD')
    norms = np.linalg.norm(state.weight_means(), axis=0).max(axis=0)
    score = (state.tau ** -0.5 * norms) ** 2
    if score.max() <= 0:
        return []
    return [int(d) for d in np.flatnonzero(score > threshold * score.max())]


def fit(data, config, state=None):
    """Run variational EM; pass a checkpointed ``state`` to resume it."""
    if state is None:
        state = initialize_state(data, config)
    else:
        _check_compatible(state, data)
    grams = model_grams(state)
    started = time.perf_counter()
    timings = {}
    converged = state.stall_count >= config.patience

    while not converged and state.iteration < config.max_iters:
        tick = time.perf_counter()
        e_step(state, data, grams, config.threads)
        if config.learn_hyperparameters and config.mstep_steps:
            m_step(state, config.mstep_steps, config.mstep_step_size)
            grams = model_grams(state)

        value = monitor(state, data)
        if not np.isfinite(value):
            raise NumericalError(f"monitor is not finite at iteration {state.iteration + 1}")
        if state.history and abs(value - state.history[-1]) < config.tolerance:
            state.stall_count += 1
        else:
            state.stall_count = 0
        state.history.append(value)
        state.iteration += 1
        timings[state.iteration] = time.perf_counter() - tick
        converged = state.stall_count >= config.patience

        if state.iteration % config.log_every == 0 or converged:
            logger.info(
                "iter %d monitor %.6f retained %s",
                state.iteration, value, retained_dimensions(state, config.retention_threshold),
            )

    report = FitReport(
        monitor=list(state.history),
        iterations_run=state.iteration,
        converged=converged,
        time_lengthscales=[float(v) for v in state.time_lengthscales],
        condition_lengthscales=[float(v) for v in state.condition_lengthscales],
        retained_dims=retained_dimensions(state, config.retention_threshold),
        likelihood=state.likelihood,
        seconds=time.perf_counter() - started,
        timings=timings,
    )
    logger.info(
        "Fit %s after %d iterations, retained dims %s",
        'converged' if converged else 'stopped', report.iterations_run, report.retained_dims,
    )
    return state, report
