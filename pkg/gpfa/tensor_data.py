"""Spike-count tensors, their file formats, and the synthetic generator.

Counts are held densely as (condition, trial, neuron, bin). Conditions may
have different numbers of trials; ``trial_mask`` marks which trial slots are
observed, and observed trials always come first within a condition.
"""
import json
import logging
from dataclasses import dataclass
from itertools import product
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.special import expit

from .exceptions import DatasetError
from .kernels import SEKernelParams, factorize, se_gram, time_points

logger = logging.getLogger(__name__)

COUNT_COLUMNS = ['condition', 'trial', 'neuron', 'bin', 'count']
LIKELIHOODS = ('negbin', 'binomial')
FLOAT_FORMAT = '%.17g'


@dataclass(eq=False)
class SpikeTensor:
    counts: np.ndarray
    condition_coords: np.ndarray
    trial_mask: np.ndarray = None
    bin_width: float = 0.02

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 4:
            raise DatasetError(f"counts must be 4-dimensional, got shape {counts.shape}.")
        if counts.size == 0:
            raise DatasetError("no observations")
        if not np.issubdtype(counts.dtype, np.integer):
            if not np.all(np.isfinite(counts)) or np.any(counts != np.round(counts)):
                raise DatasetError("counts must be integer-valued.")
        counts = counts.astype(np.int64)
        if np.any(counts < 0):
            raise DatasetError("counts must be non-negative.")

        coords = np.asarray(self.condition_coords, dtype=float)
        if coords.ndim == 1:
            coords = coords[:, None]
        if coords.shape[0] != counts.shape[0]:
            raise DatasetError(
                f"{coords.shape[0]} condition rows for {counts.shape[0]} conditions."
            )
        if not np.all(np.isfinite(coords)):
            raise DatasetError("condition coordinates must be finite.")
        if not float(self.bin_width) > 0:
            raise DatasetError("bin_width must be positive.")

        if self.trial_mask is None:
            mask = np.ones(counts.shape[:2], dtype=bool)
        else:
            mask = np.asarray(self.trial_mask, dtype=bool)
        if mask.shape != counts.shape[:2]:
            raise DatasetError(f"trial_mask shape {mask.shape} does not match counts.")
        if not mask.any(axis=1).all():
            raise DatasetError("every condition needs at least one trial.")

        # observed trials first, in their original order
        order = np.argsort(~mask, axis=1, kind='stable')
        mask = np.take_along_axis(mask, order, axis=1)
        counts = np.take_along_axis(counts, order[:, :, None, None], axis=1)
        counts[~mask] = 0

        self.counts = counts
        self.condition_coords = coords
        self.trial_mask = mask
        if self.duplicate_conditions:
            logger.warning("Condition coordinates contain duplicate rows.")

    @property
    def n_conditions(self):
        return self.counts.shape[0]

    @property
    def max_trials(self):
        return self.counts.shape[1]

    @property
    def n_neurons(self):
        return self.counts.shape[2]

    @property
    def n_bins(self):
        return self.counts.shape[3]

    @property
    def condition_dims(self):
        return self.condition_coords.shape[1]

    @property
    def trials_per_condition(self):
        return self.trial_mask.sum(axis=1)

    @property
    def n_observations(self):
        return int(self.trial_mask.sum()) * self.n_neurons * self.n_bins

    @property
    def duplicate_conditions(self):
        return len(np.unique(self.condition_coords, axis=0)) < self.n_conditions

    def observed(self):
        """Float mask broadcastable against counts."""
        return self.trial_mask[:, :, None, None].astype(float)

    def equals(self, other):
        return (
            self.counts.shape == other.counts.shape
            and np.array_equal(self.counts, other.counts)
            and np.array_equal(self.trial_mask, other.trial_mask)
            and np.array_equal(self.condition_coords, other.condition_coords)
        )

    def select_trials(self, per_condition):
        """New tensor keeping, for each condition m, the trials listed in per_condition[m]."""
        if len(per_condition) != self.n_conditions:
            raise ValueError("One trial selection per condition is required.")
        width = max(len(idx) for idx in per_condition)
        counts = np.zeros((self.n_conditions, width, self.n_neurons, self.n_bins), dtype=np.int64)
        mask = np.zeros((self.n_conditions, width), dtype=bool)
        for m, idx in enumerate(per_condition):
            idx = np.asarray(idx, dtype=int)
            counts[m, :len(idx)] = self.counts[m, idx]
            mask[m, :len(idx)] = True
        return SpikeTensor(counts, self.condition_coords.copy(), mask, self.bin_width)

    def select_conditions(self, conditions):
        conditions = np.asarray(conditions, dtype=int)
        mask = self.trial_mask[conditions]
        width = int(mask.sum(axis=1).max())
        return SpikeTensor(
            self.counts[conditions, :width],
            self.condition_coords[conditions],
            mask[:, :width],
            self.bin_width,
        )


@dataclass(eq=False)
class GroundTruth:
    """Parameters that generated a synthetic dataset, and the implied rates."""

    X: np.ndarray
    W: np.ndarray
    beta: np.ndarray
    r: np.ndarray
    rates: np.ndarray
    likelihood: str = 'negbin'
    binomial_trials: np.ndarray = None

    def to_dict(self):
        payload = {
            'X': self.X.tolist(),
            'W': self.W.tolist(),
            'beta': self.beta.tolist(),
            'r': self.r.tolist(),
            'rates': self.rates.tolist(),
            'likelihood': self.likelihood,
        }
        if self.binomial_trials is not None:
            payload['binomial_trials'] = self.binomial_trials.tolist()
        return payload

    @classmethod
    def from_dict(cls, payload):
        try:
            trials = payload.get('binomial_trials')
            return cls(
                X=np.asarray(payload['X'], dtype=float),
                W=np.asarray(payload['W'], dtype=float),
                beta=np.asarray(payload['beta'], dtype=float),
                r=np.asarray(payload['r'], dtype=float),
                rates=np.asarray(payload['rates'], dtype=float),
                likelihood=payload.get('likelihood', 'negbin'),
                binomial_trials=None if trials is None else np.asarray(trials, dtype=float),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"malformed ground-truth file: {exc}") from exc


@dataclass(frozen=True)
class GenerativeSpec:
    """Settings of the synthetic generator. Lengthscales of length 1 are broadcast.

    The default bias and loading scales put the true model near -1.59 nats per
    bin on its own data.
    """

    n_conditions: int = 10
    n_neurons: int = 20
    n_bins: int = 100
    n_latents: int = 2
    condition_dims: int = 1
    n_trials: int = 50
    time_lengthscales: tuple = (10.0,)
    condition_lengthscales: tuple = (0.25,)
    dispersion_range: tuple = (0.0, 5.0)
    seed: int = 0
    likelihood: str = 'negbin'
    bias_scale: float = 0.5
    bias_mean: float = -0.3
    loading_scale: float = 0.5
    binomial_trials: int = 10
    bin_width: float = 0.02
    jitter: float = 1e-8

    def __post_init__(self):
        for name in ('n_conditions', 'n_neurons', 'n_bins', 'n_latents', 'condition_dims', 'n_trials'):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be at least 1.")
        if self.likelihood not in LIKELIHOODS:
            raise ValueError(f"likelihood must be one of {LIKELIHOODS}.")
        theta = _broadcast(self.time_lengthscales, self.n_latents, 'time_lengthscales')
        ell = _broadcast(self.condition_lengthscales, self.condition_dims, 'condition_lengthscales')
        low, high = (float(v) for v in self.dispersion_range)
        if low < 0 or high <= 0 or low > high:
            raise ValueError("dispersion_range must be an interval inside (0, inf).")
        if not self.bin_width > 0:
            raise ValueError("bin_width must be positive.")
        object.__setattr__(self, 'time_lengthscales', theta)
        object.__setattr__(self, 'condition_lengthscales', ell)
        object.__setattr__(self, 'dispersion_range', (low, high))


def _broadcast(values, size, name):
    values = tuple(float(v) for v in np.atleast_1d(values))
    if len(values) == 1:
        values = values * size
    if len(values) != size:
        raise ValueError(f"{name} needs 1 or {size} entries, got {len(values)}.")
    if not all(np.isfinite(v) and v > 0 for v in values):
        raise ValueError(f"{name} must be positive.")
    return values


def condition_grid(n_conditions, dims):
    """Evenly spaced points on [0, 1]^C, endpoints included."""
    if dims == 1:
        return np.linspace(0.0, 1.0, n_conditions)[:, None]
    per_axis = int(np.ceil(n_conditions ** (1.0 / dims) - 1e-9))
    axis = np.linspace(0.0, 1.0, per_axis)
    return np.array(list(product(axis, repeat=dims)))[:n_conditions]


def generate_synthetic(spec):
    """Draw a dataset from the generative model described by spec."""
    rng = np.random.default_rng(spec.seed)
    M, N, T, D, R = spec.n_conditions, spec.n_neurons, spec.n_bins, spec.n_latents, spec.n_trials

    coords = condition_grid(M, spec.condition_dims)
    times = time_points(T)
    X = np.empty((D, T))
    for d, theta in enumerate(spec.time_lengthscales):
        grams = factorize(se_gram(times, times, SEKernelParams((theta,))), spec.jitter)
        X[d] = grams.chol @ rng.standard_normal(T)

    cond = factorize(se_gram(coords, coords, SEKernelParams(spec.condition_lengthscales)), spec.jitter)
    W = spec.loading_scale * np.einsum('ij,jnd->ind', cond.chol, rng.standard_normal((M, N, D)))
    beta = spec.bias_mean + spec.bias_scale * rng.standard_normal(N)
    low, high = spec.dispersion_range
    r = high - (high - low) * rng.random(N)

    F = beta[None, :, None] + np.einsum('mnd,dt->mnt', W, X)
    shape = (M, R, N, T)
    if spec.likelihood == 'negbin':
        # Gamma-Poisson mixture: rate ~ Gamma(r, scale=exp(F))
        lam = rng.gamma(
            np.broadcast_to(r[None, None, :, None], shape),
            np.broadcast_to(np.exp(F)[:, None], shape),
        )
        counts = rng.poisson(lam)
        rates = r[None, :, None] * np.exp(F)
        trials = None
    else:
        trials = np.full(N, float(spec.binomial_trials))
        p = expit(F)
        counts = rng.binomial(
            np.broadcast_to(trials.astype(np.int64)[None, None, :, None], shape),
            np.broadcast_to(p[:, None], shape),
        )
        rates = trials[None, :, None] * p

    data = SpikeTensor(counts.astype(np.int64), coords, bin_width=spec.bin_width)
    truth = GroundTruth(X=X, W=W, beta=beta, r=r, rates=rates,
                        likelihood=spec.likelihood, binomial_trials=trials)
    logger.info("Generated %d x %d x %d x %d counts (seed %d)", M, R, N, T, spec.seed)
    return data, truth


def write_dataset(data, counts_path, conditions_path, meta_path=None):
    """Write counts and conditions CSVs; ``meta_path`` receives the bin width as JSON."""
    m, trial, n, t = np.nonzero(np.broadcast_to(data.trial_mask[:, :, None, None], data.counts.shape))
    frame = pd.DataFrame({
        'condition': m,
        'trial': trial,
        'neuron': n,
        'bin': t,
        'count': data.counts[m, trial, n, t],
    })
    frame.to_csv(counts_path, index=False)

    conditions = pd.DataFrame(
        data.condition_coords,
        columns=[f'coord_{i}' for i in range(data.condition_dims)],
    )
    conditions.insert(0, 'condition', np.arange(data.n_conditions))
    conditions.to_csv(conditions_path, index=False, float_format=FLOAT_FORMAT)
    if meta_path is not None:
        with open(meta_path, 'w') as handle:
            json.dump({'bin_width': float(data.bin_width)}, handle)


def load_conditions(conditions_path):
    """Read a conditions CSV; returns the (M, C) coordinate matrix ordered by id."""
    try:
        frame = pd.read_csv(conditions_path, float_precision='round_trip')
    except pd.errors.EmptyDataError as exc:
        raise DatasetError("conditions file is empty") from exc
    columns = list(frame.columns)
    expected = ['condition'] + [f'coord_{i}' for i in range(len(columns) - 1)]
    if len(columns) < 2 or columns != expected:
        raise DatasetError(f"conditions header must be {expected}, got {columns}")
    if frame.empty:
        raise DatasetError("conditions file has no rows")
    values = frame.apply(pd.to_numeric, errors='coerce')
    _reject_bad_rows(values.isna().any(axis=1), "malformed condition row")
    ids = values['condition'].to_numpy(dtype=float)
    if np.any(ids != np.round(ids)) or sorted(ids.astype(int)) != list(range(len(ids))):
        raise DatasetError("condition ids must be dense, unique and zero-based")
    order = np.argsort(ids)
    coords = values[expected[1:]].to_numpy(dtype=float)[order]
    if not np.all(np.isfinite(coords)):
        raise DatasetError("condition coordinates must be finite")
    return coords


def _reject_bad_rows(bad, message):
    bad = np.asarray(bad)
    if bad.any():
        # +2: header line and one-based numbering
        line = int(np.flatnonzero(bad)[0]) + 2
        raise DatasetError(f"{message} at line {line}")


def load_dataset(counts_path, conditions_path, meta_path=None):
    """Read a dataset. Without a metadata file the bin width keeps its default."""
    coords = load_conditions(conditions_path)
    bin_width = load_bin_width(meta_path)
    try:
        frame = pd.read_csv(counts_path)
    except pd.errors.EmptyDataError as exc:
        raise DatasetError("no observations") from exc
    except pd.errors.ParserError as exc:
        raise DatasetError(f"malformed row: {exc}") from exc
    if list(frame.columns) != COUNT_COLUMNS:
        raise DatasetError(f"counts header must be {COUNT_COLUMNS}, got {list(frame.columns)}")
    if frame.empty:
        raise DatasetError("no observations")

    values = frame.apply(pd.to_numeric, errors='coerce')
    _reject_bad_rows(values.isna().any(axis=1), "malformed row")
    ids = values[COUNT_COLUMNS[:4]].to_numpy(dtype=float)
    _reject_bad_rows(np.any((ids != np.round(ids)) | (ids < 0), axis=1), "malformed row")
    y = values['count'].to_numpy(dtype=float)
    _reject_bad_rows(y != np.round(y), "non-integer count")
    _reject_bad_rows(y < 0, "negative count")

    m, trial, n, t = ids.astype(np.int64).T
    M = coords.shape[0]
    unknown = m >= M
    if unknown.any():
        raise DatasetError(
            f"condition {int(m[unknown][0])} in counts is absent from the conditions file"
        )
    N, T, R = int(n.max()) + 1, int(t.max()) + 1, int(trial.max()) + 1

    cells = ((m * R + trial) * N + n) * T + t
    if len(np.unique(cells)) != len(cells):
        raise DatasetError("duplicate (condition, trial, neuron, bin) rows")
    group_sizes = np.bincount(m * R + trial, minlength=M * R).reshape(M, R)
    present = group_sizes > 0
    incomplete = present & (group_sizes != N * T)
    if incomplete.any():
        cm, ct = np.argwhere(incomplete)[0]
        raise DatasetError(
            f"inconsistent (N, T) across trials: condition {cm} trial {ct} has "
            f"{group_sizes[cm, ct]} cells, expected {N * T}"
        )
    if np.any(np.diff(present.astype(int), axis=1) > 0):
        raise DatasetError("trial ids must be dense and zero-based within each condition")

    counts = np.zeros((M, R, N, T), dtype=np.int64)
    counts[m, trial, n, t] = y.astype(np.int64)
    return SpikeTensor(counts, coords, present, bin_width)


def load_bin_width(meta_path):
    if meta_path is None or not Path(meta_path).exists():
        return SpikeTensor.bin_width
    with open(meta_path) as handle:
        try:
            value = json.load(handle)['bin_width']
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DatasetError(f"malformed dataset metadata: {exc!r}") from exc
    try:
        return float(value)
    except (TypeError, ValueError) as exc:
        raise DatasetError(f"bin_width must be a number, got {value!r}") from exc


def write_ground_truth(truth, path):
    with open(path, 'w') as handle:
        json.dump(truth.to_dict(), handle)


def load_ground_truth(path):
    with open(path) as handle:
        try:
            payload = json.load(handle)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"malformed ground-truth file: {exc}") from exc
    return GroundTruth.from_dict(payload)
