"""Squared-exponential kernels over time and condition space.

Both kernels have unit variance: the latent scale is absorbed by the loading
weights and the weight scale by the ARD precisions.
"""
import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.spatial.distance import cdist

from .conf import get_setting
from .exceptions import NumericalError

logger = logging.getLogger(__name__)

JITTER_STEPS = 7
CONDITION_KERNELS = ('se', 'identity')


@dataclass(frozen=True)
class SEKernelParams:
    """Lengthscales of a unit-variance SE kernel, one per input dimension."""

    lengthscales: tuple

    def __post_init__(self):
        values = tuple(float(v) for v in np.atleast_1d(self.lengthscales))
        if not values:
            raise ValueError("At least one lengthscale is required.")
        if not all(np.isfinite(v) and v > 0 for v in values):
            raise ValueError(f"Lengthscales must be positive and finite, got {values}.")
        object.__setattr__(self, 'lengthscales', values)

    @property
    def dims(self):
        return len(self.lengthscales)

    @property
    def array(self):
        return np.asarray(self.lengthscales)


@dataclass
class KernelGrams:
    """Cholesky-factored Gram matrix; ``chol @ chol.T == K + jitter_used * I``."""

    K: np.ndarray
    chol: np.ndarray
    jitter_used: float
    log_det: float

    @property
    def size(self):
        return self.K.shape[0]

    def solve(self, B):
        return linalg.cho_solve((self.chol, True), B)

    def inverse(self):
        return self.solve(np.eye(self.size))

    def jittered(self):
        return self.K + self.jitter_used * np.eye(self.size)


def _as_points(A, dims):
    A = np.asarray(A, dtype=float)
    if A.ndim == 1:
        A = A[:, None]
    if A.shape[1] != dims:
        raise ValueError(f"Points have {A.shape[1]} columns, kernel expects {dims}.")
    return A


def se_gram(A, B, params):
    """Entry (i, j) is exp(-sum_k (A_ik - B_jk)^2 / (2 l_k^2))."""
    ell = params.array
    A = _as_points(A, params.dims) / ell
    B = _as_points(B, params.dims) / ell
    return np.exp(-0.5 * cdist(A, B, 'sqeuclidean'))


def se_gram_grad_loglengthscale(A, params):
    """Derivatives of se_gram(A, A) with respect to each log-lengthscale.

    Returns an array of shape (C, P, P) whose k-th slice is
    K * ((A_ik - A_jk) / l_k)^2.
    """
    A = _as_points(A, params.dims)
    K = se_gram(A, A, params)
    grads = np.empty((params.dims,) + K.shape)
    for k, ell in enumerate(params.lengthscales):
        scaled = (A[:, k][:, None] - A[:, k][None, :]) / ell
        with np.errstate(over='ignore'):
            squared = scaled ** 2
        # K underflows to 0 wherever squared overflows
        grads[k] = np.multiply(K, squared, out=np.zeros_like(K), where=K > 0)
    return grads


def jitter_ladder(base_jitter):
    return [0.0] + [base_jitter * 10.0 ** k for k in range(JITTER_STEPS)]


def factorize(K, base_jitter=None):
    """Cholesky of K + jI for the smallest j on the jitter ladder that succeeds."""
    if base_jitter is None:
        base_jitter = get_setting('JITTER_BASE')
    K = np.asarray(K, dtype=float)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ValueError(f"Expected a square matrix, got shape {K.shape}.")
    if not np.all(np.isfinite(K)):
        raise NumericalError("Gram matrix contains non-finite entries.")
    eye = np.eye(K.shape[0])
    for jitter in jitter_ladder(base_jitter):
        try:
            chol = linalg.cholesky(K + jitter * eye, lower=True)
        except linalg.LinAlgError:
            continue
        if jitter > base_jitter:
            logger.warning("Gram factorization needed jitter %.1e", jitter)
        log_det = 2.0 * np.sum(np.log(np.diag(chol)))
        return KernelGrams(K=K, chol=chol, jitter_used=jitter, log_det=log_det)
    raise NumericalError(
        f"Cholesky failed at every jitter level up to {jitter_ladder(base_jitter)[-1]:.1e}."
    )


def time_points(n_bins):
    """Bin indices 0..T-1; time lengthscales are expressed in bins."""
    return np.arange(n_bins, dtype=float)[:, None]


def time_grams(n_bins, lengthscales, base_jitter=None):
    points = time_points(n_bins)
    return [
        factorize(se_gram(points, points, SEKernelParams((theta,))), base_jitter)
        for theta in lengthscales
    ]


def delta_gram(A, B):
    """1 where two condition points coincide exactly, 0 elsewhere."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    A = A[:, None] if A.ndim == 1 else A
    B = B[:, None] if B.ndim == 1 else B
    return np.all(A[:, None, :] == B[None, :, :], axis=2).astype(float)


def condition_gram(A, B, lengthscales, kind='se'):
    """Condition-kernel Gram; ``identity`` ignores the lengthscales."""
    if kind == 'identity':
        return delta_gram(A, B)
    if kind != 'se':
        raise ValueError(f"condition kernel must be one of {CONDITION_KERNELS}, got {kind!r}.")
    return se_gram(A, B, SEKernelParams(lengthscales))


def condition_grams(coords, lengthscales, base_jitter=None, kind='se'):
    return factorize(condition_gram(coords, coords, lengthscales, kind), base_jitter)


@dataclass
class ModelGrams:
    """Prior Grams of a model: one time kernel per latent, one condition kernel."""

    time: list
    condition: KernelGrams
