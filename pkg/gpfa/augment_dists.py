"""Moments of the augmentation distributions.

Polya-Gamma (PG), Polya-inverse-Gamma (P-IG) and power-truncated-normal (PTN)
quantities consumed by the variational updates, plus the Gamma distribution
that matches the first two moments of a PG variable. Only moments are ever
needed; no density here is evaluated pointwise.

PG functions accept numpy arrays and broadcast over ``b`` and ``c``.
"""
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import integrate
from scipy.special import digamma, zeta

from .exceptions import NumericalError

PG_MEAN_SWITCH = 1e-6
PG_VARIANCE_SWITCH = 1e-4
PG_MATCH_FLOOR = 1e-4
PIG_SWITCH = 1e-6
PTN_WINDOW = 12.0
PTN_TAIL_LOGDENSITY = -40.0
PTN_TOL = 1e-10


def _value(x):
    x = np.asarray(x, dtype=float)
    return x[()] if x.ndim == 0 else x


@dataclass(frozen=True)
class PGParams:
    """Shape b > 0 and tilt c; a negative tilt is folded to |c|."""

    b: object
    c: object = 0.0

    def __post_init__(self):
        b = np.asarray(self.b, dtype=float)
        c = np.abs(np.asarray(self.c, dtype=float))
        if np.any(~np.isfinite(b)) or np.any(b <= 0):
            raise ValueError("PG shape b must be positive.")
        if np.any(~np.isfinite(c)):
            raise ValueError("PG tilt c must be finite.")
        object.__setattr__(self, 'b', b)
        object.__setattr__(self, 'c', c)


@dataclass(frozen=True)
class GammaParams:
    shape: object
    rate: object

    @property
    def mean(self):
        return _value(self.shape / self.rate)

    @property
    def variance(self):
        return _value(self.shape / self.rate ** 2)

    @property
    def mean_log(self):
        return _value(digamma(self.shape) - np.log(self.rate))


@dataclass(frozen=True)
class PTNParams:
    """Density proportional to r^(p-1) exp(b_lin r - a r^2) on r > 0."""

    p: float
    a: float
    b_lin: float

    def __post_init__(self):
        if not (np.isfinite(self.p) and self.p > 0):
            raise ValueError(f"PTN power p must be positive, got {self.p}.")
        if not (np.isfinite(self.a) and self.a > 0):
            raise ValueError(f"PTN quadratic coefficient a must be positive, got {self.a}.")
        if not np.isfinite(self.b_lin):
            raise ValueError("PTN linear coefficient must be finite.")


def sinh_excess(c):
    """sinh(c) - c without cancellation for small c."""
    c = np.asarray(c, dtype=float)
    out = np.empty_like(c)
    small = c < 1.0
    cs = c[small]
    term = cs ** 3 / 6.0
    total = term.copy()
    for k in range(2, 12):
        term = term * cs ** 2 / ((2 * k) * (2 * k + 1))
        total = total + term
    out[small] = total
    with np.errstate(over='ignore'):
        out[~small] = np.sinh(c[~small]) - c[~small]
    return out


def _sinh_ratio(c):
    """(sinh(c) - c) / sinh(c), finite for every c > 0."""
    c = np.asarray(c, dtype=float)
    out = np.empty_like(c)
    small = c < 1.0
    out[small] = sinh_excess(c[small]) / np.sinh(c[small])
    with np.errstate(over='ignore'):
        out[~small] = 1.0 - c[~small] / np.sinh(c[~small])
    return out


def log_cosh(x):
    x = np.abs(np.asarray(x, dtype=float))
    return x + np.log1p(np.exp(-2.0 * x)) - np.log(2.0)


def pg_mean(params):
    b, c = np.broadcast_arrays(params.b, params.c)
    out = b / 4.0 * (1.0 - c ** 2 / 12.0)
    big = c >= PG_MEAN_SWITCH
    out = np.where(big, b * np.tanh(c / 2.0) / (2.0 * np.where(big, c, 1.0)), out)
    return _value(out)


def pg_variance(params):
    b, c = np.broadcast_arrays(params.b, params.c)
    out = b * (1.0 / 24.0 - c ** 2 / 120.0)
    big = c >= PG_VARIANCE_SWITCH
    cb = np.where(big, c, 1.0)
    general = b * _sinh_ratio(cb) * np.tanh(cb / 2.0) / (2.0 * cb ** 3)
    return _value(np.where(big, general, out))


def pg_laplace(b, t):
    """E[exp(-t w)] for w ~ PG(b, 0), i.e. cosh(sqrt(t/2))^(-b)."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("Laplace argument must be non-negative.")
    return _value(np.exp(-np.asarray(b, dtype=float) * log_cosh(np.sqrt(t / 2.0))))


def pg_moment_match_gamma(params):
    """Gamma(shape, rate) with the mean and variance of PG(b, c).

    Below the tilt floor the closed forms are 0/0 and their limits
    shape = 3b/2, rate = 6 are used.
    """
    b, c = np.broadcast_arrays(params.b, params.c)
    big = c >= PG_MATCH_FLOOR
    cb = np.where(big, c, 1.0)
    ratio = _sinh_ratio(cb)
    shape = np.where(big, b * cb * np.tanh(cb / 2.0) / (2.0 * ratio), 1.5 * b)
    rate = np.where(big, cb ** 2 / ratio, 6.0)
    return GammaParams(shape=_value(shape), rate=_value(rate))


def pig_mean(tilt):
    """Mean of the P-IG distribution with the given tilt: (psi(t+1) - psi(1)) / 2t."""
    t = np.asarray(tilt, dtype=float)
    if np.any(t < 0):
        raise ValueError("P-IG tilt must be non-negative.")
    small = t < PIG_SWITCH
    tb = np.where(small, 1.0, t)
    general = (digamma(tb + 1.0) + np.euler_gamma) / (2.0 * tb)
    limit = (zeta(2.0) - zeta(3.0) * t) / 2.0
    return _value(np.where(small, limit, general))


def _ptn_logdensity(r, params):
    return (params.p - 1.0) * np.log(r) + params.b_lin * r - params.a * r ** 2


def _ptn_window(params):
    p, a, b = params.p, params.a, params.b_lin
    disc = b ** 2 + 8.0 * a * (p - 1.0)
    if p >= 1.0 or (disc > 0 and b > 0):
        mode = max((b + np.sqrt(max(disc, 0.0))) / (4.0 * a), 0.0)
    else:
        mode = 0.0
    if mode > 0 and p > 1.0:
        curvature = (p - 1.0) / mode ** 2 + 2.0 * a
    else:
        curvature = 2.0 * a
    sigma = 1.0 / np.sqrt(curvature)
    return mode, sigma


def ptn_moments(params):
    """E[r], E[r^2] and E[log r] of a PTN distribution by adaptive quadrature.

    The window is centred on the mode with a Laplace-width estimate of
    +/- 12 standard deviations, then widened until the density has fallen
    by e^40 at both ends. A window reaching r = 0 moves the r^(p-1) factor
    into quad's algebraic weight.
    """
    p, a, b = params.p, params.a, params.b_lin
    mode, sigma = _ptn_window(params)
    smooth = lambda r: b * r - a * r ** 2
    logdensity = lambda r: _ptn_logdensity(r, params)
    shift = logdensity(mode) if mode > 0 else 0.0

    lo = 0.0 if p < 1.0 else max(mode - PTN_WINDOW * sigma, 0.0)
    hi = mode + PTN_WINDOW * sigma
    while logdensity(hi) - shift > PTN_TAIL_LOGDENSITY:
        hi += PTN_WINDOW * sigma
    while lo > 0 and logdensity(lo) - shift > PTN_TAIL_LOGDENSITY:
        lo = max(lo - PTN_WINDOW * sigma, 0.0)
    weighted = lo == 0.0

    def integrate_moment(g, log_weight=False):
        kwargs = dict(epsabs=PTN_TOL, epsrel=PTN_TOL, limit=200)
        if weighted:
            f = lambda r: g(r) * np.exp(smooth(r) - shift)
            kwargs['weight'] = 'alg-loga' if log_weight else 'alg'
            kwargs['wvar'] = (p - 1.0, 0.0)
        else:
            f = lambda r: g(r) * np.exp(logdensity(r) - shift)
            if lo < mode < hi:
                kwargs['points'] = [mode]
        with warnings.catch_warnings():
            warnings.simplefilter('error', integrate.IntegrationWarning)
            try:
                value, _ = integrate.quad(f, lo, hi, **kwargs)
            except integrate.IntegrationWarning as exc:
                raise NumericalError(f"PTN quadrature did not converge for {params}: {exc}") from exc
        return value

    Z = integrate_moment(lambda r: 1.0)
    if not (np.isfinite(Z) and Z > 0):
        raise NumericalError(f"PTN normalizer is not positive for {params}.")
    mean = integrate_moment(lambda r: r) / Z
    second = integrate_moment(lambda r: r ** 2) / Z
    if weighted:
        log_mean = integrate_moment(lambda r: 1.0, log_weight=True) / Z
    else:
        log_mean = integrate_moment(np.log) / Z
    return mean, max(second, mean ** 2), log_mean


def sample_pg(b, c, size, rng, n_terms=200):
    """PG(b, c) draws from the truncated sum-of-Gammas series.

    The mean of the discarded tail is added back so that sample means are
    unbiased. Used to check moment formulas; inference never samples.
    """
    k = np.arange(1, n_terms + 1)
    denom = (k - 0.5) ** 2 + c ** 2 / (4.0 * np.pi ** 2)
    total = np.zeros(size)
    for d in denom:
        total += rng.gamma(b, 1.0, size) / d
    tail = pg_mean(PGParams(b, c)) - b * np.sum(1.0 / denom) / (2.0 * np.pi ** 2)
    return total / (2.0 * np.pi ** 2) + tail
