"""Priors, hyperparameters and the variational state of a CS-GPFA model.

Loading weights of neuron n are stored as one vector of length D*M in
d-major order: entry ``d * M + m`` is W[m, n, d]. This matches the
Kronecker prior covariance diag(1/tau) (x) K_W.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .conf import get_setting
from .kernels import CONDITION_KERNELS, ModelGrams, condition_grams, time_grams
from .tensor_data import LIKELIHOODS

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 'csgpfa-checkpoint'
CHECKPOINT_VERSION = 1
BETA_CLIP = 10.0
RATE_FLOOR = 0.1
INIT_WEIGHT_SCALE = 0.01
INIT_LATENT_SCALE = 0.1

ARRAY_FIELDS = (
    'mu_x', 'cov_x', 'mu_w', 'cov_w', 'mu_beta', 'var_beta',
    'r_mean', 'r_sq', 'r_log', 'ard_shape', 'ard_rate',
    'time_lengthscales', 'condition_lengthscales', 'condition_coords',
    'binomial_trials', 'prior_ard_shape', 'prior_ard_rate',
)
SCALAR_FIELDS = (
    'tau_beta_shape', 'tau_beta_rate', 'prior_bias_shape', 'prior_bias_rate',
    'jitter', 'iteration', 'stall_count', 'likelihood',
)


@dataclass
class ModelConfig:
    n_latents: int = 10
    likelihood: str = 'negbin'
    condition_kernel: str = 'se'
    ard_shape: float = 1e-5
    ard_rate: float = 1e-5
    bias_shape: float = 1e-5
    bias_rate: float = 1e-5
    time_lengthscales: tuple = None
    condition_lengthscales: tuple = None
    jitter: float = field(default_factory=lambda: get_setting('JITTER_BASE'))
    max_iters: int = field(default_factory=lambda: get_setting('MAX_ITERS'))
    tolerance: float = field(default_factory=lambda: get_setting('TOLERANCE'))
    patience: int = field(default_factory=lambda: get_setting('PATIENCE'))
    mstep_steps: int = field(default_factory=lambda: get_setting('MSTEP_STEPS'))
    mstep_step_size: float = field(default_factory=lambda: get_setting('MSTEP_STEP_SIZE'))
    learn_hyperparameters: bool = True
    seed: int = 0
    threads: int = field(default_factory=lambda: get_setting('THREADS'))
    retention_threshold: float = field(default_factory=lambda: get_setting('RETENTION_THRESHOLD'))
    log_every: int = 10

    def __post_init__(self):
        if int(self.n_latents) < 1:
            raise ValueError("n_latents must be at least 1.")
        if self.likelihood not in LIKELIHOODS:
            raise ValueError(f"likelihood must be one of {LIKELIHOODS}.")
        if self.condition_kernel not in CONDITION_KERNELS:
            raise ValueError(f"condition_kernel must be one of {CONDITION_KERNELS}.")
        for name in ('ard_shape', 'ard_rate', 'bias_shape', 'bias_rate', 'jitter', 'tolerance'):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive.")
        if self.max_iters < 0 or self.patience < 1 or self.mstep_steps < 0:
            raise ValueError("max_iters, patience and mstep_steps must be non-negative (patience >= 1).")
        if self.threads is not None and self.threads < 1:
            raise ValueError("threads must be positive.")

    def initial_time_lengthscales(self, n_bins):
        if self.time_lengthscales is None:
            return np.full(self.n_latents, 0.1 * n_bins)
        values = np.atleast_1d(np.asarray(self.time_lengthscales, dtype=float))
        if values.size == 1:
            values = np.full(self.n_latents, values[0])
        if values.size != self.n_latents or np.any(values <= 0):
            raise ValueError(f"time_lengthscales needs 1 or {self.n_latents} positive entries.")
        return values

    def initial_condition_lengthscales(self, coords):
        if self.condition_lengthscales is None:
            spread = np.ptp(coords, axis=0)
            return np.where(spread > 0, 0.5 * spread, 1.0)
        values = np.atleast_1d(np.asarray(self.condition_lengthscales, dtype=float))
        if values.size == 1:
            values = np.full(coords.shape[1], values[0])
        if values.size != coords.shape[1] or np.any(values <= 0):
            raise ValueError(f"condition_lengthscales needs 1 or {coords.shape[1]} positive entries.")
        return values


@dataclass
class FMoments:
    EF: np.ndarray
    EF2: np.ndarray


@dataclass(eq=False)
class VariationalState:
    """Every q factor of the model plus the current kernel hyperparameters.

    The per-observation augmentation moments ``omega`` (PG mean) and
    ``log_tau`` (E[log tau]) have the shape of the count tensor; ``xi`` holds
    the P-IG mean per neuron. They are derived from the other factors and are
    not written to checkpoints.
    """

    mu_x: np.ndarray
    cov_x: np.ndarray
    mu_w: np.ndarray
    cov_w: np.ndarray
    mu_beta: np.ndarray
    var_beta: np.ndarray
    r_mean: np.ndarray
    r_sq: np.ndarray
    r_log: np.ndarray
    ard_shape: np.ndarray
    ard_rate: np.ndarray
    tau_beta_shape: float
    tau_beta_rate: float
    time_lengthscales: np.ndarray
    condition_lengthscales: np.ndarray
    condition_coords: np.ndarray
    binomial_trials: np.ndarray
    prior_ard_shape: np.ndarray
    prior_ard_rate: np.ndarray
    prior_bias_shape: float
    prior_bias_rate: float
    likelihood: str = 'negbin'
    condition_kernel: str = 'se'
    jitter: float = 1e-8
    omega: np.ndarray = None
    log_tau: np.ndarray = None
    xi: np.ndarray = None
    iteration: int = 0
    stall_count: int = 0
    history: list = field(default_factory=list)

    @property
    def n_latents(self):
        return self.mu_x.shape[0]

    @property
    def n_bins(self):
        return self.mu_x.shape[1]

    @property
    def n_neurons(self):
        return self.mu_w.shape[0]

    @property
    def n_conditions(self):
        return self.condition_coords.shape[0]

    @property
    def tau(self):
        """E[tau_d], the ARD precisions."""
        return self.ard_shape / self.ard_rate

    @property
    def tau_beta(self):
        return self.tau_beta_shape / self.tau_beta_rate

    def weight_means(self):
        """E[W] as an (M, N, D) array."""
        D, M = self.n_latents, self.n_conditions
        return self.mu_w.reshape(self.n_neurons, D, M).transpose(2, 0, 1)

    def weight_cov_blocks(self):
        """Cov(W[m, n, d], W[m, n, d']) as an (M, N, D, D) array."""
        D, M = self.n_latents, self.n_conditions
        blocks = self.cov_w.reshape(self.n_neurons, D, M, D, M)
        return np.einsum('ndmem->mnde', blocks)

    def weight_second_moments(self):
        """E[W[m, n, d] W[m, n, e]] as an (M, N, D, D) array."""
        EW = self.weight_means()
        return EW[..., :, None] * EW[..., None, :] + self.weight_cov_blocks()

    def to_dict(self):
        payload = {'format': CHECKPOINT_FORMAT, 'version': CHECKPOINT_VERSION}
        for name in ARRAY_FIELDS:
            payload[name] = np.asarray(getattr(self, name)).tolist()
        for name in SCALAR_FIELDS:
            value = getattr(self, name)
            payload[name] = value.item() if isinstance(value, np.generic) else value
        payload['condition_kernel'] = self.condition_kernel
        payload['history'] = [float(v) for v in self.history]
        return payload

    @classmethod
    def from_dict(cls, payload):
        kwargs = {name: np.asarray(payload[name], dtype=float) for name in ARRAY_FIELDS}
        kwargs['condition_coords'] = kwargs['condition_coords'].reshape(
            len(payload['condition_coords']), -1
        )
        for name in SCALAR_FIELDS:
            kwargs[name] = payload[name]
        kwargs['iteration'] = int(kwargs['iteration'])
        kwargs['stall_count'] = int(kwargs['stall_count'])
        kwargs['condition_kernel'] = payload.get('condition_kernel', 'se')
        kwargs['history'] = [float(v) for v in payload.get('history', [])]
        return cls(**kwargs)


def model_grams(state):
    return ModelGrams(
        time=time_grams(state.n_bins, state.time_lengthscales, state.jitter),
        condition=condition_grams(
            state.condition_coords, state.condition_lengthscales, state.jitter, state.condition_kernel,
        ),
    )


def latent_second_moments(state):
    """E[X[d, t] X[e, t]] as a (T, D, D) array; q(X) factorizes over d."""
    EX = state.mu_x
    EXX = EX.T[:, :, None] * EX.T[:, None, :]
    idx = np.arange(state.n_latents)
    EXX[:, idx, idx] += np.diagonal(state.cov_x, axis1=1, axis2=2).T
    return EXX


def f_moments(state):
    """First and second moments of F[m, n, t] under the mean-field posterior."""
    EW = state.weight_means()
    EX = state.mu_x

    WX = np.einsum('mnd,dt->mnt', EW, EX)
    EF = state.mu_beta[None, :, None] + WX

    quad = np.einsum('mnde,tde->mnt', state.weight_second_moments(), latent_second_moments(state))

    beta_sq = state.mu_beta ** 2 + state.var_beta
    EF2 = beta_sq[None, :, None] + 2.0 * state.mu_beta[None, :, None] * WX + quad
    return FMoments(EF=EF, EF2=np.maximum(EF2, EF ** 2))


def plugin_rates(state, EF=None):
    """Expected counts per bin at the posterior means, shape (M, N, T)."""
    if EF is None:
        EF = f_moments(state).EF
    if state.likelihood == 'binomial':
        return state.binomial_trials[None, :, None] * expit(EF)
    return state.r_mean[None, :, None] * np.exp(EF)


def neuron_mean_counts(data):
    totals = (data.counts * data.observed()).sum(axis=(0, 1, 3))
    bins = data.trial_mask.sum() * data.n_bins
    return totals / bins


def initialize_state(data, config):
    """Starting point of the fit.

    Weight means are small Gaussian draws and latent means small draws from
    the time-kernel prior. E[X] must not start at zero: the weight update,
    which runs first, is linear in it.
    """
    from .inference import update_aug_gamma, update_aug_pg, update_aug_pig

    M, N, T, D = data.n_conditions, data.n_neurons, data.n_bins, config.n_latents
    rng = np.random.default_rng(config.seed)

    theta = config.initial_time_lengthscales(T)
    ell = config.initial_condition_lengthscales(data.condition_coords)
    grams = ModelGrams(
        time=time_grams(T, theta, config.jitter),
        condition=condition_grams(data.condition_coords, ell, config.jitter, config.condition_kernel),
    )

    prior_ard_shape = np.full(D, float(config.ard_shape))
    prior_ard_rate = np.full(D, float(config.ard_rate))
    tau = prior_ard_shape / prior_ard_rate

    mean_counts = neuron_mean_counts(data)
    trials = np.maximum(data.counts.max(axis=(0, 1, 3)), 1).astype(float)
    if config.likelihood == 'binomial':
        p = np.clip(mean_counts / trials, 0.01, 0.99)
        mu_beta = np.log(p) - np.log1p(-p)
    else:
        mu_beta = np.clip(np.log(np.maximum(mean_counts, RATE_FLOOR)), -BETA_CLIP, BETA_CLIP)
    r_mean = np.maximum(mean_counts, RATE_FLOOR)

    mu_w = INIT_WEIGHT_SCALE * rng.standard_normal((N, D * M))
    mu_x = INIT_LATENT_SCALE * np.stack([g.chol @ rng.standard_normal(T) for g in grams.time])

    state = VariationalState(
        mu_x=mu_x,
        cov_x=np.stack([g.jittered() for g in grams.time]),
        mu_w=mu_w,
        cov_w=np.broadcast_to(
            np.kron(np.diag(1.0 / tau), grams.condition.jittered()), (N, D * M, D * M)
        ).copy(),
        mu_beta=mu_beta,
        var_beta=np.ones(N),
        r_mean=r_mean,
        r_sq=r_mean ** 2,
        r_log=np.log(r_mean),
        ard_shape=prior_ard_shape.copy(),
        ard_rate=prior_ard_rate.copy(),
        tau_beta_shape=float(config.bias_shape),
        tau_beta_rate=float(config.bias_rate),
        time_lengthscales=theta,
        condition_lengthscales=ell,
        condition_coords=data.condition_coords.copy(),
        binomial_trials=trials,
        prior_ard_shape=prior_ard_shape,
        prior_ard_rate=prior_ard_rate,
        prior_bias_shape=float(config.bias_shape),
        prior_bias_rate=float(config.bias_rate),
        likelihood=config.likelihood,
        condition_kernel=config.condition_kernel,
        jitter=float(config.jitter),
    )
    update_aug_gamma(state, data)
    update_aug_pig(state)
    update_aug_pg(state, data)
    logger.debug("Initialized state: M=%d N=%d T=%d D=%d", M, N, T, D)
    return state
