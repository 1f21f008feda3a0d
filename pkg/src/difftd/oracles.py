"""Ground truth for linear-quadratic systems and Monte-Carlo value estimates.

Under the policy u = K s + e, e ~ N(0, Sigma_a), and reward rate
-s'Qs - u'Ru, the value is V(s) = s'Ps + c where, with M = A + BK,

    M'P + PM - gamma P = Q + K'RK
    c = (tr(Sigma Sigma' P) - tr(R Sigma_a)) / gamma.

Action noise enters only through the expected reward; it adds no state
diffusion in the continuous-time limit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import InstabilityError, InvalidArgumentError
from .kernels.linear_sde import discounted_chunk
from .sde_core import ControlledSde, GaussianPolicy, LinearGaussianPolicy, LinearSde


@dataclass
class LqrSpec:
    A: np.ndarray
    B_in: np.ndarray
    Sigma: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    K: np.ndarray
    Sigma_a: np.ndarray
    gamma: float

    def __post_init__(self):
        for name in ("A", "B_in", "Sigma", "Q", "R", "K", "Sigma_a"):
            setattr(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=np.float64)))
        n, k = self.B_in.shape
        if self.A.shape != (n, n) or self.Sigma.shape[0] != n or self.Q.shape != (n, n):
            raise InvalidArgumentError("A, Sigma, Q must have n rows matching B_in")
        if self.R.shape != (k, k) or self.K.shape != (k, n) or self.Sigma_a.shape != (k, k):
            raise InvalidArgumentError("R, K, Sigma_a do not match the action dimension")
        if not self.gamma > 0:
            raise InvalidArgumentError(f"gamma must be positive, got {self.gamma}")
        if np.linalg.eigvalsh(0.5 * (self.Q + self.Q.T)).min() < -1e-10:
            raise InvalidArgumentError("Q is not positive semidefinite")
        if np.linalg.eigvalsh(0.5 * (self.R + self.R.T)).min() < -1e-10:
            raise InvalidArgumentError("R is not positive semidefinite")

    @property
    def closed_loop(self):
        return self.A + self.B_in @ self.K

    def spectral_abscissa(self):
        return float(np.max(np.linalg.eigvals(self.closed_loop).real))

    @classmethod
    def from_system(cls, sys: LinearSde, policy: LinearGaussianPolicy, gamma):
        return cls(sys.A, sys.B, sys.Sigma, sys.Q, sys.R, policy.K, policy.covariance, gamma)

    def system(self) -> LinearSde:
        return LinearSde(self.A, self.B_in, self.Sigma, self.Q, self.R)

    def policy(self) -> LinearGaussianPolicy:
        return LinearGaussianPolicy(self.K, self.Sigma_a)


@dataclass
class QuadraticSolution:
    P: np.ndarray
    c: float
    residual: float

    def value(self, s):
        s = np.asarray(s, dtype=np.float64)
        return np.einsum("...i,ij,...j->...", s, self.P, s) + self.c


def sylvester_residual(spec: LqrSpec, P):
    M = spec.closed_loop
    return float(np.max(np.abs(M.T @ P + P @ M - spec.gamma * P - (spec.Q + spec.K.T @ spec.R @ spec.K))))


def lqr_value(spec: LqrSpec) -> QuadraticSolution:
    """Solve the fixed-policy HJB on the quadratic class by dense vectorisation."""
    alpha = spec.spectral_abscissa()
    if alpha >= spec.gamma / 2:
        raise InstabilityError(
            f"closed-loop spectral abscissa {alpha:.4g} >= gamma/2 = {spec.gamma / 2:.4g}; value is infinite")
    M = spec.closed_loop
    n = M.shape[0]
    eye = np.eye(n)
    # column-major vec: vec(M'P) = (I kron M') vec P, vec(PM) = (M' kron I) vec P
    L = np.kron(eye, M.T) + np.kron(M.T, eye) - spec.gamma * np.eye(n * n)
    rhs = (spec.Q + spec.K.T @ spec.R @ spec.K).ravel(order="F")
    P = np.linalg.solve(L, rhs).reshape(n, n, order="F")
    P = 0.5 * (P + P.T)
    c = (np.trace(spec.Sigma @ spec.Sigma.T @ P) - np.trace(spec.R @ spec.Sigma_a)) / spec.gamma
    res = sylvester_residual(spec, P)
    if res >= 1e-8 * max(1.0, float(np.max(np.abs(P)))):
        raise InstabilityError(f"Sylvester solve residual {res:.3g} too large")
    return QuadraticSolution(P, float(c), res)


def optimal_gain_scan(a, b, q, r, gamma, sigma=0.0, sigma_a=0.0, grid=None):
    """Best scalar gain by brute force over a grid of closed-form fixed-gain values.

    All stable gains rank the same way at every state (V_k(s) = p(k) s^2 + c(k)
    with c increasing in p), so the maximiser of p(k) is optimal.
    """
    if grid is None:
        k_max = (gamma / 2 - a) / b if b > 0 else np.inf
        k_min = (gamma / 2 - a) / b if b < 0 else -np.inf
        lo = max(k_min + 1e-6, -10.0)
        hi = min(k_max - 1e-6, 10.0)
        grid = np.linspace(lo, hi, 200001)
    ps = np.full(len(grid), -np.inf)
    for i, k in enumerate(grid):
        m = a + b * k
        if m < gamma / 2:
            ps[i] = -(q + r * k * k) / (gamma - 2 * m)
    best = int(np.argmax(ps))
    spec = LqrSpec([[a]], [[b]], [[sigma]], [[q]], [[r]], [[grid[best]]], [[sigma_a ** 2]], gamma)
    return float(grid[best]), lqr_value(spec)


@dataclass
class McEstimate:
    value: np.ndarray
    std_error: np.ndarray
    tail_bound: np.ndarray

    def tolerance(self, n_se=3.0):
        return np.maximum(n_se * self.std_error, self.tail_bound)


def mc_value(sys: ControlledSde, policy: GaussianPolicy, s0, gamma, dt, horizon_T, n_rollouts,
             seed, richardson=True, chunk=256) -> McEstimate:
    """Discounted return averaged over rollouts from each row of ``s0``.

    Each rollout is a Riemann sum of exp(-gamma t) rho dt along an
    Euler-Maruyama path. With ``richardson`` a coarse path (step 2 dt) is run
    on the same noise and ``2 fine - coarse`` is reported. The truncation
    bound exp(-gamma T) rho_max / gamma uses the largest |rho| seen on the
    fine path.
    """
    if n_rollouts < 2:
        raise InvalidArgumentError("mc_value needs at least 2 rollouts")
    if not dt > 0 or not horizon_T > 0:
        raise InvalidArgumentError("dt and horizon_T must be positive")
    S0 = np.array(s0, dtype=np.float64, ndmin=2)
    n_states, n = S0.shape
    n_steps = int(math.ceil(horizon_T / dt))
    n_steps += n_steps % 2
    rng = np.random.default_rng(seed)
    N = n_states * n_rollouts
    Sf = np.repeat(S0, n_rollouts, axis=0)
    Sc = Sf.copy()
    acc_f = np.zeros(N)
    acc_c = np.zeros(N)
    rho_max = np.zeros(N)
    k_dim, m_dim = sys.action_dim, sys.noise_dim
    linear = isinstance(sys, LinearSde) and isinstance(policy, LinearGaussianPolicy)
    if linear:
        mats = (sys.A, sys.B, policy.K, sys.Sigma, policy.scale, sys.Q, sys.R)
    for k0 in range(0, n_steps, chunk):
        T = min(chunk, n_steps - k0)
        Zs = rng.standard_normal((T, N, m_dim))
        Za = rng.standard_normal((T, N, k_dim))
        if linear:
            discounted_chunk(Sf, Sc, *mats, Zs, Za, float(dt), float(gamma), k0, acc_f, acc_c, rho_max)
        else:
            _generic_chunk(sys, policy, Sf, Sc, Zs, Za, dt, gamma, k0, acc_f, acc_c, rho_max)
    per = 2.0 * acc_f - acc_c if richardson else acc_f
    per = per.reshape(n_states, n_rollouts)
    value = per.mean(axis=1)
    se = per.std(axis=1, ddof=1) / math.sqrt(n_rollouts)
    tail = math.exp(-gamma * n_steps * dt) * rho_max.reshape(n_states, n_rollouts).max(axis=1) / gamma
    if np.ndim(s0) == 1:
        return McEstimate(value[0], se[0], tail[0])
    return McEstimate(value, se, tail)


def _generic_chunk(sys, policy, Sf, Sc, Zs, Za, dt, gamma, k0, acc_f, acc_c, rho_max):
    sq = math.sqrt(dt)
    for j in range(Zs.shape[0]):
        disc = math.exp(-gamma * (k0 + j) * dt)
        a = policy.act(Sf, Za[j])
        rho = sys.reward_rate(Sf, a)
        np.maximum(rho_max, np.abs(rho), out=rho_max)
        acc_f += disc * rho * dt
        Sf += sys.drift(Sf, a) * dt + np.einsum("bij,bj->bi", sys.diffusion(Sf, a), Zs[j]) * sq
        if j % 2 == 0:
            a = policy.act(Sc, Za[j])
            acc_c += disc * sys.reward_rate(Sc, a) * (2.0 * dt)
            Sc += (sys.drift(Sc, a) * (2.0 * dt)
                   + np.einsum("bij,bj->bi", sys.diffusion(Sc, a), Zs[j] + Zs[j + 1]) * sq)


class LinearExactSampler:
    """Exact one-step transitions of a linear SDE with the action held over the step.

    S(dt) = e^{A dt} s + G B a + N(0, W), G = int_0^dt e^{A t} dt,
    W = int_0^dt e^{A t} Sigma Sigma' e^{A' t} dt (Van Loan).
    """

    def __init__(self, sys: LinearSde, dt):
        n = sys.state_dim
        A = sys.A
        blk = np.zeros((2 * n, 2 * n))
        blk[:n, :n] = A
        blk[:n, n:] = np.eye(n)
        E = scipy.linalg.expm(blk * dt)
        self.Phi = E[:n, :n]
        self.G = E[:n, n:]
        vl = np.zeros((2 * n, 2 * n))
        vl[:n, :n] = -A
        vl[:n, n:] = sys.Sigma @ sys.Sigma.T
        vl[n:, n:] = A.T
        F = scipy.linalg.expm(vl * dt)
        W = self.Phi @ F[:n, n:]
        W = 0.5 * (W + W.T)
        w, U = np.linalg.eigh(W)
        self.noise_scale = U * np.sqrt(np.clip(w, 0.0, None))
        self.B = sys.B
        self.dt = dt

    def step(self, S, Aact, z):
        return S @ self.Phi.T + Aact @ (self.G @ self.B).T + z @ self.noise_scale.T
