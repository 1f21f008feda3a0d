"""Sample estimates of drift and squared diffusion from one-step increments.

    drift        ~ mean (S' - s) / dt
    diffusion^2  ~ mean (S' - s)(S' - s)' / dt

The second carries an uncorrected drift^2 dt bias. Both default to one
Euler-Maruyama step of the system; pass ``sampler`` (a callable
``(S, A, Z) -> S'`` with ``Z`` standard normal of shape (N, m)) to use a
different integrator, e.g. ``oracles.LinearExactSampler(sys, dt).step``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError
from .sde_core import ControlledSde, GaussianPolicy, em_step


@dataclass
class CoefEstimate:
    drift_hat: np.ndarray
    diffusion_sq_hat: np.ndarray
    n_samples: int
    dt: float
    std_error: np.ndarray
    diffusion_std_error: np.ndarray


def _check(dt, n_samples):
    if n_samples < 2:
        raise InvalidArgumentError(f"n_samples must be >= 2 to estimate a variance, got {n_samples}")
    if not dt > 0:
        raise InvalidArgumentError(f"dt must be positive, got {dt}")


def _increments(sys: ControlledSde, policy: GaussianPolicy, s, dt, n_samples, seed, sampler, antithetic):
    s = np.asarray(s, dtype=np.float64)
    if s.shape != (sys.state_dim,):
        raise InvalidArgumentError(f"state has shape {s.shape}, system expects ({sys.state_dim},)")
    rng = np.random.default_rng(seed)
    S = np.broadcast_to(s, (n_samples, sys.state_dim))
    if antithetic:
        half = (n_samples + 1) // 2
        za = rng.standard_normal((half, policy.action_dim))
        zs = rng.standard_normal((half, sys.noise_dim))
        Za = np.concatenate([za, -za])[:n_samples]
        Zs = np.concatenate([zs, -zs])[:n_samples]
    else:
        Za = rng.standard_normal((n_samples, policy.action_dim))
        Zs = rng.standard_normal((n_samples, sys.noise_dim))
    A = policy.act(S, Za)
    S_next = em_step(sys, S, A, dt, Zs) if sampler is None else sampler(S, A, Zs)
    return S_next - s


def _pairwise_mean(X):
    # np.add.reduce along axis 0 uses pairwise summation for contiguous data
    return np.add.reduce(np.ascontiguousarray(X), axis=0) / X.shape[0]


def _se(X, paired):
    """Standard error of the column means; antithetic pairs are averaged first."""
    if paired:
        h = X.shape[0] // 2
        X = 0.5 * (X[:h] + X[h:2 * h])
    return X.std(axis=0, ddof=1) / math.sqrt(X.shape[0])


def estimate_drift(sys, policy, s, dt, n_samples, seed, *, sampler=None, antithetic=False):
    """Mean of (S' - s)/dt with its componentwise standard error."""
    _check(dt, n_samples)
    D = _increments(sys, policy, s, dt, n_samples, seed, sampler, antithetic) / dt
    return _pairwise_mean(D), _se(D, antithetic)


def estimate_diffusion_sq(sys, policy, s, dt, n_samples, seed, *, sampler=None, antithetic=False):
    """Symmetrised mean of (S' - s)(S' - s)'/dt with entrywise standard errors."""
    _check(dt, n_samples)
    D = _increments(sys, policy, s, dt, n_samples, seed, sampler, antithetic)
    outer = (D[:, :, None] * D[:, None, :]) / dt
    mean = _pairwise_mean(outer)
    return 0.5 * (mean + mean.T), _se(outer, antithetic)


def estimate_coefficients(sys, policy, s, dt, n_samples, seed, *, sampler=None) -> CoefEstimate:
    """Both estimates from a single set of increments."""
    _check(dt, n_samples)
    D = _increments(sys, policy, s, dt, n_samples, seed, sampler, False)
    drift = D / dt
    outer = (D[:, :, None] * D[:, None, :]) / dt
    diff = _pairwise_mean(outer)
    return CoefEstimate(_pairwise_mean(drift), 0.5 * (diff + diff.T), int(n_samples), float(dt),
                        _se(drift, False), _se(outer, False))


def ito_cross_moment(dt, n_samples, k, l, seed, noise_dim=None):
    """Sample mean and standard error of dB^k dB^l over ``n_samples`` increments."""
    _check(dt, n_samples)
    m = noise_dim if noise_dim is not None else max(k, l) + 1
    if not (0 <= k < m and 0 <= l < m):
        raise InvalidArgumentError(f"Brownian indices ({k}, {l}) out of range for dimension {m}")
    rng = np.random.default_rng(seed)
    dB = rng.standard_normal((n_samples, m)) * math.sqrt(dt)
    prod = dB[:, k] * dB[:, l]
    return float(_pairwise_mean(prod)), float(prod.std(ddof=1) / math.sqrt(n_samples))
