"""Controlled SDEs, Euler-Maruyama integration and built-in benchmark systems.

All coefficient callbacks are vectorised over leading axes: ``drift(S, A)``
maps ``(..., n)`` states and ``(..., k)`` actions to ``(..., n)``,
``diffusion`` to ``(..., n, m)`` and ``reward_rate`` to ``(...)``.
"""

from __future__ import annotations

import csv
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import InvalidArgumentError, NumericError


class Scaling(str, Enum):
    CONTINUOUS = "continuous"
    DISCRETE = "discrete"


class ControlledSde:
    """dS = drift(S, A) dt + diffusion(S, A) dB with an m-dimensional Brownian motion."""

    def __init__(self, state_dim: int, action_dim: int, noise_dim: int,
                 drift: Callable, diffusion: Callable,
                 reward_rate: Callable | None = None, name: str = "sde"):
        for label, d in (("state_dim", state_dim), ("action_dim", action_dim), ("noise_dim", noise_dim)):
            if int(d) < 1:
                raise InvalidArgumentError(f"{label} must be positive, got {d}")
        self.state_dim = int(state_dim)
        self.action_dim = int(action_dim)
        self.noise_dim = int(noise_dim)
        self._drift = drift
        self._diffusion = diffusion
        self._reward_rate = reward_rate
        self.name = name

    def drift(self, s, a):
        return np.asarray(self._drift(s, a), dtype=np.float64)

    def diffusion(self, s, a):
        return np.asarray(self._diffusion(s, a), dtype=np.float64)

    def reward_rate(self, s, a):
        if self._reward_rate is None:
            raise InvalidArgumentError(f"system {self.name!r} has no reward rate")
        return np.asarray(self._reward_rate(s, a), dtype=np.float64)

    def __repr__(self):
        return (f"{type(self).__name__}(name={self.name!r}, n={self.state_dim}, "
                f"k={self.action_dim}, m={self.noise_dim})")


class LinearSde(ControlledSde):
    """dS = (A S + B u) dt + Sigma dB with reward rate -S'QS - u'Ru."""

    def __init__(self, A, B, Sigma, Q=None, R=None, name="linear"):
        A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        B = np.atleast_2d(np.asarray(B, dtype=np.float64))
        Sigma = np.atleast_2d(np.asarray(Sigma, dtype=np.float64))
        n = A.shape[0]
        if A.shape != (n, n) or B.shape[0] != n or Sigma.shape[0] != n:
            raise InvalidArgumentError(
                f"inconsistent shapes A{A.shape} B{B.shape} Sigma{Sigma.shape}")
        k, m = B.shape[1], Sigma.shape[1]
        Q = np.zeros((n, n)) if Q is None else np.atleast_2d(np.asarray(Q, dtype=np.float64))
        R = np.zeros((k, k)) if R is None else np.atleast_2d(np.asarray(R, dtype=np.float64))
        if Q.shape != (n, n) or R.shape != (k, k):
            raise InvalidArgumentError(f"Q{Q.shape} / R{R.shape} do not match n={n}, k={k}")
        self.A, self.B, self.Sigma, self.Q, self.R = A, B, Sigma, Q, R
        super().__init__(n, k, m, self._lin_drift, self._lin_diffusion, self._lin_reward, name=name)

    def _lin_drift(self, s, a):
        return s @ self.A.T + a @ self.B.T

    def _lin_diffusion(self, s, a):
        shape = np.broadcast_shapes(np.shape(s)[:-1], np.shape(a)[:-1])
        return np.broadcast_to(self.Sigma, shape + self.Sigma.shape)

    def _lin_reward(self, s, a):
        return (-np.einsum("...i,ij,...j->...", s, self.Q, s)
                - np.einsum("...i,ij,...j->...", a, self.R, a))


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    reward: float
    dt: float

    def __post_init__(self):
        if not self.dt > 0:
            raise InvalidArgumentError(f"dt must be positive, got {self.dt}")
        for name in ("s", "a", "s_next", "reward"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise NumericError(f"transition field {name!r} is not finite")


@dataclass
class TransitionBatch:
    """Column-stored transitions sharing one ``dt``."""

    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    reward: np.ndarray
    dt: float

    def __len__(self):
        return self.s.shape[0]

    def take(self, idx):
        return TransitionBatch(self.s[idx], self.a[idx], self.s_next[idx], self.reward[idx], self.dt)

    @classmethod
    def from_transitions(cls, transitions: Sequence[Transition]):
        dts = {t.dt for t in transitions}
        if len(dts) != 1:
            raise InvalidArgumentError(f"transitions mix time steps {sorted(dts)}")
        return cls(np.stack([t.s for t in transitions]), np.stack([t.a for t in transitions]),
                   np.stack([t.s_next for t in transitions]),
                   np.array([t.reward for t in transitions], dtype=np.float64), dts.pop())

    def __iter__(self):
        for i in range(len(self)):
            yield Transition(self.s[i], self.a[i], self.s_next[i], float(self.reward[i]), self.dt)


class GaussianPolicy:
    """a ~ N(mean(s), covariance); a zero covariance gives the deterministic mean."""

    def __init__(self, mean: Callable, covariance):
        cov = np.atleast_2d(np.asarray(covariance, dtype=np.float64))
        if cov.shape[0] != cov.shape[1]:
            raise InvalidArgumentError(f"covariance must be square, got {cov.shape}")
        if np.max(np.abs(cov - cov.T), initial=0.0) > 1e-12:
            raise InvalidArgumentError("covariance is not symmetric")
        w, U = np.linalg.eigh(cov)
        if w.min() < -1e-12:
            raise InvalidArgumentError(f"covariance has negative eigenvalue {w.min():.3g}")
        self._mean = mean
        self.covariance = cov
        self.scale = U * np.sqrt(np.clip(w, 0.0, None))

    @property
    def action_dim(self):
        return self.covariance.shape[0]

    def mean(self, s):
        return np.asarray(self._mean(s), dtype=np.float64)

    def act(self, s, z):
        """Action from standard-normal draws ``z`` of shape (..., k)."""
        return self.mean(s) + z @ self.scale.T

    def sample(self, s, rng):
        s = np.asarray(s, dtype=np.float64)
        return self.act(s, rng.standard_normal(s.shape[:-1] + (self.action_dim,)))

    def is_definite(self):
        return bool(np.linalg.eigvalsh(self.covariance).min() > 0)


class LinearGaussianPolicy(GaussianPolicy):
    """mean(s) = K s."""

    def __init__(self, K, covariance):
        self.K = np.atleast_2d(np.asarray(K, dtype=np.float64))
        super().__init__(self._linear_mean, covariance)
        if self.K.shape[0] != self.action_dim:
            raise InvalidArgumentError(f"gain {self.K.shape} does not match covariance {self.covariance.shape}")

    def _linear_mean(self, s):
        return np.asarray(s) @ self.K.T

    def with_gain(self, K):
        return LinearGaussianPolicy(K, self.covariance)


@dataclass(frozen=True)
class NoiseSpec:
    coef: float
    rng_seed: int = 0

    def __post_init__(self):
        if not self.coef >= 0:
            raise InvalidArgumentError(f"noise coef must be nonnegative, got {self.coef}")


def perturb_state(s, spec: NoiseSpec, noise):
    """s_i + coef |s_i| noise_i, componentwise."""
    s = np.asarray(s, dtype=np.float64)
    return s + spec.coef * np.abs(s) * noise


def _check_finite(arr, what, tail):
    bad = np.argwhere(~np.isfinite(arr))
    if bad.size:
        idx = tuple(int(i) for i in bad[0][-tail:])
        raise NumericError(f"{what} component {idx[0] if tail == 1 else idx} is not finite")


def em_step(sys: ControlledSde, s, a, dt, noise):
    """One Euler-Maruyama step s + mu dt + sigma sqrt(dt) noise. Works on batches."""
    s = np.asarray(s, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if not dt > 0:
        raise InvalidArgumentError(f"dt must be positive, got {dt}")
    if s.shape[-1] != sys.state_dim or a.shape[-1] != sys.action_dim or noise.shape[-1] != sys.noise_dim:
        raise InvalidArgumentError(
            f"dimension mismatch: state {s.shape}, action {a.shape}, noise {noise.shape} "
            f"for n={sys.state_dim}, k={sys.action_dim}, m={sys.noise_dim}")
    mu = sys.drift(s, a)
    sig = sys.diffusion(s, a)
    if sig.shape[-2:] != (sys.state_dim, sys.noise_dim):
        raise InvalidArgumentError(f"diffusion returned shape {sig.shape}, expected (..., {sys.state_dim}, {sys.noise_dim})")
    _check_finite(mu, "drift", 1)
    _check_finite(sig, "diffusion", 2)
    return s + mu * dt + np.einsum("...ij,...j->...i", sig, noise) * math.sqrt(dt)


@dataclass
class Rollout(Sequence):
    """Transitions of a single trajectory; ``truncated`` marks a non-finite stop."""

    batch: TransitionBatch
    truncated: bool = False
    diagnostics: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.batch)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return list(self)[i]
        b = self.batch
        return Transition(b.s[i], b.a[i], b.s_next[i], float(b.reward[i]), b.dt)

    def __iter__(self):
        return iter(self.batch)

    def to_csv(self, path):
        write_trajectory_csv(path, self.batch)


def write_trajectory_csv(path, batch: TransitionBatch):
    n = batch.s.shape[1]
    k = batch.a.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"s_{i}" for i in range(n)] + [f"a_{i}" for i in range(k)] + ["r"])
        for j in range(len(batch)):
            w.writerow([repr(j * batch.dt)] + [repr(float(x)) for x in batch.s[j]]
                       + [repr(float(x)) for x in batch.a[j]] + [repr(float(batch.reward[j]))])


def simulate(sys: ControlledSde, policy: GaussianPolicy, S0, dt, n_steps, rng,
             scaling=Scaling.DISCRETE, perturb: NoiseSpec | None = None,
             perturb_order="after_reward", perturb_rng=None):
    """Run ``N`` environments side by side for ``n_steps``.

    Returns ``(batch, truncated)`` where ``batch`` arrays are (steps, N, ...)
    flattened step-major. The run stops at the first step producing a
    non-finite state in any environment.

    ``perturb_order="after_reward"`` perturbs the state reached by each step;
    ``"before_reward"`` perturbs the current state before the reward and the
    step are evaluated. Perturbation draws come from ``perturb_rng`` when
    given, else from a fresh generator seeded with ``perturb.rng_seed``.
    """
    if n_steps < 1:
        raise InvalidArgumentError(f"n_steps must be >= 1, got {n_steps}")
    if perturb_order not in ("after_reward", "before_reward"):
        raise InvalidArgumentError(f"unknown perturb_order {perturb_order!r}")
    scaling = Scaling(scaling)
    S = np.array(S0, dtype=np.float64, ndmin=2)
    N, n = S.shape
    if n != sys.state_dim:
        raise InvalidArgumentError(f"initial state has dimension {n}, system has {sys.state_dim}")
    prng = None
    if perturb is not None and perturb.coef > 0:
        prng = perturb_rng if perturb_rng is not None else np.random.default_rng(perturb.rng_seed)
    out_s, out_a, out_n, out_r = [], [], [], []
    truncated = False
    for _ in range(n_steps):
        if prng is not None and perturb_order == "before_reward":
            S = perturb_state(S, perturb, prng.standard_normal(S.shape))
        A = policy.sample(S, rng)
        rho = sys.reward_rate(S, A)
        noise = rng.standard_normal((N, sys.noise_dim))
        with np.errstate(all="ignore"):
            mu = sys.drift(S, A)
            sig = sys.diffusion(S, A)
            S_next = S + mu * dt + np.einsum("...ij,...j->...i", sig, noise) * math.sqrt(dt)
        if prng is not None and perturb_order == "after_reward":
            S_next = perturb_state(S_next, perturb, prng.standard_normal(S.shape))
        if not (np.all(np.isfinite(S_next)) and np.all(np.isfinite(rho))):
            truncated = True
            break
        out_s.append(S)
        out_a.append(A)
        out_n.append(S_next)
        out_r.append(rho * dt if scaling is Scaling.DISCRETE else rho)
        S = S_next
    k = sys.action_dim
    if out_s:
        batch = TransitionBatch(np.concatenate(out_s), np.concatenate(out_a),
                                np.concatenate(out_n), np.concatenate(out_r), float(dt))
    else:
        batch = TransitionBatch(np.empty((0, n)), np.empty((0, k)), np.empty((0, n)), np.empty(0), float(dt))
    return batch, truncated


def rollout(sys: ControlledSde, policy: GaussianPolicy, s0, dt, n_steps, seed,
            scaling=Scaling.DISCRETE, perturb: NoiseSpec | None = None) -> Rollout:
    """Single trajectory of ``n_steps`` transitions, reproducible for a fixed seed."""
    rng = np.random.default_rng(seed)
    batch, truncated = simulate(sys, policy, np.asarray(s0, dtype=np.float64)[None, :], dt,
                                n_steps, rng, scaling=scaling, perturb=perturb)
    diag = {"steps": len(batch)}
    if truncated:
        diag["reason"] = "non-finite state"
    return Rollout(batch, truncated, diag)


def discounted_return(rewards, gamma, dt, scaling=Scaling.DISCRETE):
    """sum_k exp(-gamma k dt) * r_k, with r_k = rho_k dt under continuous scaling."""
    r = np.asarray(rewards, dtype=np.float64)
    if Scaling(scaling) is Scaling.CONTINUOUS:
        r = r * dt
    return float(np.sum(np.exp(-gamma * dt * np.arange(r.shape[0])) * r))


# ---------------------------------------------------------------------------
# built-in systems
# ---------------------------------------------------------------------------

def ornstein_uhlenbeck(theta=1.0, sigma=0.5):
    """dS = -theta S dt + sigma dB, action-free, reward rate -S^2."""
    return LinearSde([[-theta]], [[0.0]], [[sigma]], Q=[[1.0]], R=[[0.0]], name="ou")


def scalar_lqr(a=-1.0, b=1.0, sigma=0.0, q=1.0, r=1.0):
    return LinearSde([[a]], [[b]], [[sigma]], Q=[[q]], R=[[r]], name="lqr1")


def linear_quadratic(n, sigma=0.1, seed=None):
    """Stock n-dimensional LQR benchmark for n in {1, 2, 4}.

    A is a stable chain with unit self-damping and weak forward coupling,
    B = I, Sigma = sigma I, Q = I, R = I.
    """
    if n not in (1, 2, 4):
        raise InvalidArgumentError(f"built-in linear-quadratic systems exist for n in {{1, 2, 4}}, got {n}")
    A = -np.eye(n) + 0.3 * np.eye(n, k=1)
    return LinearSde(A, np.eye(n), sigma * np.eye(n), Q=np.eye(n), R=np.eye(n), name=f"lqr{n}")
