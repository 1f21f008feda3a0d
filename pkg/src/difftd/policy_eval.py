"""Policy evaluation by minibatch TD-variant regression, plus a minimal actor-critic.

Each outer update resets ``n_envs`` environments to states drawn uniformly
from ``[-init_scale, init_scale]^n``, collects ``env_steps_per_update``
steps from each into a fresh buffer, then runs ``epochs_per_update`` passes
of minibatch gradient descent over it. Minibatches are disjoint within an
epoch (a permutation, remainder dropped).

The frozen target model is refreshed before every gradient step by default
(``target_refresh="step"``); ``"update"`` refreshes it once per outer
update, before the epoch loop.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidArgumentError
from .sde_core import (ControlledSde, GaussianPolicy, LinearGaussianPolicy, NoiseSpec, TransitionBatch,
                       simulate)
from .td_engine import LossGrad, Method, TdConfig, advantage, loss_and_grad
from .value_models import ValueModel, save_checkpoint


class Buffer:
    """Fixed-capacity transition store; every stored batch shares one dt."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise InvalidArgumentError(f"capacity must be positive, got {capacity}")
        self.capacity = int(capacity)
        self._parts: list[TransitionBatch] = []
        self._size = 0
        self._data: TransitionBatch | None = None

    def __len__(self):
        return self._size

    def clear(self):
        self._parts, self._size, self._data = [], 0, None

    def add(self, batch: TransitionBatch):
        if self._parts and batch.dt != self._parts[0].dt:
            raise InvalidArgumentError(f"buffer holds dt={self._parts[0].dt}, got {batch.dt}")
        if self._size + len(batch) > self.capacity:
            raise InvalidArgumentError(f"buffer capacity {self.capacity} exceeded")
        self._parts.append(batch)
        self._size += len(batch)
        self._data = None

    @property
    def data(self) -> TransitionBatch:
        if self._data is None:
            if not self._parts:
                raise InvalidArgumentError("buffer is empty")
            p = self._parts
            self._data = TransitionBatch(np.concatenate([b.s for b in p]), np.concatenate([b.a for b in p]),
                                         np.concatenate([b.s_next for b in p]),
                                         np.concatenate([b.reward for b in p]), p[0].dt)
        return self._data

    def minibatch_indices(self, size, rng):
        """Disjoint index blocks covering a random permutation; the remainder is dropped."""
        if size > self._size:
            raise InvalidArgumentError(f"minibatch size {size} exceeds buffer size {self._size}")
        perm = rng.permutation(self._size)
        return [perm[i:i + size] for i in range(0, self._size - size + 1, size)]


class Sgd:
    def __init__(self, lr):
        self.lr = lr

    def step(self, theta, grad, lr=None):
        return theta - (self.lr if lr is None else lr) * grad


class Adam:
    def __init__(self, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, theta, grad, lr=None):
        lr = self.lr if lr is None else lr
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        return theta - lr * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(name, lr):
    if name == "adam":
        return Adam(lr)
    if name == "sgd":
        return Sgd(lr)
    raise InvalidArgumentError(f"unknown optimizer {name!r}")


@dataclass(frozen=True)
class TrainConfig:
    n_envs: int = 64
    env_steps_per_update: int = 16
    epochs_per_update: int = 8
    minibatch_size: int = 256
    learning_rate: float = 3e-3
    lr_final_fraction: float = 1.0
    """Learning rate decays geometrically to this fraction of the initial rate."""
    total_updates: int = 200
    optimizer: str = "adam"
    seed: int = 0
    init_scale: float = 1.0
    target_refresh: str = "step"
    perturb_coef: float = 0.0
    perturb_order: str = "after_reward"

    def __post_init__(self):
        for name in ("n_envs", "env_steps_per_update", "epochs_per_update", "minibatch_size", "total_updates"):
            if getattr(self, name) < 1:
                raise InvalidArgumentError(f"{name} must be positive, got {getattr(self, name)}")
        if not self.learning_rate >= 0:
            raise InvalidArgumentError(f"learning_rate must be nonnegative, got {self.learning_rate}")
        if not self.lr_final_fraction > 0:
            raise InvalidArgumentError("lr_final_fraction must be positive")
        if self.minibatch_size > self.buffer_size:
            raise InvalidArgumentError(
                f"minibatch_size {self.minibatch_size} exceeds transitions per update {self.buffer_size}")
        if self.target_refresh not in ("step", "update"):
            raise InvalidArgumentError(f"target_refresh must be 'step' or 'update', got {self.target_refresh!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise InvalidArgumentError(f"unknown optimizer {self.optimizer!r}")
        if not self.perturb_coef >= 0:
            raise InvalidArgumentError("perturb_coef must be nonnegative")

    @property
    def buffer_size(self):
        return self.n_envs * self.env_steps_per_update

    def lr_at(self, update):
        if self.total_updates == 1:
            return self.learning_rate
        return self.learning_rate * self.lr_final_fraction ** (update / (self.total_updates - 1))


@dataclass
class EvalReport:
    losses: np.ndarray
    oracle_errors: np.ndarray
    wall_ms: np.ndarray
    second_order: np.ndarray
    """Mean |1/2 ds'H ds| / dt of the trained model per update."""
    params: np.ndarray
    status: str = "ok"
    message: str = ""
    checkpoint: str | None = None
    target_refreshes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def diverged(self):
        return self.status == "diverged"

    def rows(self):
        for i in range(len(self.losses)):
            yield i + 1, self.losses[i], self.oracle_errors[i], self.wall_ms[i]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["update", "loss", "oracle_err", "wall_ms"])
            for u, loss, err, ms in self.rows():
                w.writerow([u, repr(float(loss)), repr(float(err)), f"{ms:.3f}"])


def unit_ball_points(n, count=256, seed=12345):
    """Fixed evaluation states: the unit sphere and three inner shells."""
    if n == 1:
        return np.linspace(-1.0, 1.0, 201)[:, None]
    rng = np.random.default_rng(seed)
    d = rng.standard_normal((count, n))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    radii = np.repeat([1.0, 0.75, 0.5, 0.25], -(-count // 4))[:count]
    return np.vstack([np.eye(n), -np.eye(n), d * radii[:, None]])


def value_error(model: ValueModel, oracle, points):
    """Relative sup error of V(s) - V(0) against the oracle over ``points``.

    The offset V(0) is removed from both sides: the dTD prediction involves
    only derivatives of V, so the constant term is not identified by every
    method.
    """
    zero = np.zeros((1, points.shape[1]))
    truth = oracle(points) - oracle(zero)
    est = np.atleast_1d(model.value(points)) - np.atleast_1d(model.value(zero))
    return float(np.max(np.abs(est - truth)) / np.max(np.abs(truth)))


class _Trainer:
    """Shared state of the collect-then-fit loop."""

    def __init__(self, sys, model, cfg: TdConfig, tcfg: TrainConfig):
        self.sys, self.model, self.cfg, self.tcfg = sys, model, cfg, tcfg
        self.rng = np.random.default_rng(tcfg.seed)
        self.perturb = NoiseSpec(tcfg.perturb_coef, tcfg.seed + 1) if tcfg.perturb_coef > 0 else None
        self.prng = np.random.default_rng(self.perturb.rng_seed) if self.perturb else None
        self.opt = make_optimizer(tcfg.optimizer, tcfg.learning_rate)
        self.buffer = Buffer(tcfg.buffer_size)
        self.target = model.copy()
        self.refreshes = 0

    def collect(self, policy):
        t = self.tcfg
        S0 = self.rng.uniform(-t.init_scale, t.init_scale, (t.n_envs, self.sys.state_dim))
        batch, truncated = simulate(self.sys, policy, S0, self.cfg.dt, t.env_steps_per_update, self.rng,
                                    scaling=self.cfg.scaling, perturb=self.perturb,
                                    perturb_order=t.perturb_order, perturb_rng=self.prng)
        self.buffer.clear()
        if len(batch) < t.minibatch_size:
            return False
        self.buffer.add(batch)
        return not truncated

    def _refresh(self):
        self.target.set_params(self.model.params)
        self.refreshes += 1

    def fit(self, update):
        """Epochs over the buffer. Returns (mean loss, mean second-order term, finite?)."""
        t = self.tcfg
        lr = t.lr_at(update)
        data = self.buffer.data
        if t.target_refresh == "update":
            self._refresh()
        losses, second = [], []
        for _ in range(t.epochs_per_update):
            for idx in self.buffer.minibatch_indices(t.minibatch_size, self.rng):
                if t.target_refresh == "step":
                    self._refresh()
                lg = loss_and_grad(self.target, self.model, data.take(idx), self.cfg)
                if not (math.isfinite(lg.loss) and np.all(np.isfinite(lg.grad))):
                    return lg.loss, math.nan, False
                self.model.set_params(self.opt.step(self.model.params, lg.grad, lr))
                losses.append(lg.loss)
                second.append(lg.second_order)
        ok = bool(np.all(np.isfinite(self.model.params)))
        return float(np.mean(losses)), float(np.mean(second)), ok


def evaluate_policy(sys: ControlledSde, policy: GaussianPolicy, model: ValueModel, cfg: TdConfig,
                    tcfg: TrainConfig, oracle=None, oracle_points=None, checkpoint=None) -> EvalReport:
    """Fit ``model`` (in place) to the value of ``policy`` on ``sys``.

    ``oracle`` is a callable mapping a (B, n) array of states to true values;
    when given, the relative unit-ball error is recorded after every update.
    On a non-finite loss or parameter the run stops, status becomes
    ``"diverged"`` and the remaining curve entries are NaN.
    """
    T = tcfg.total_updates
    losses = np.full(T, np.nan)
    errs = np.full(T, np.nan)
    wall = np.full(T, np.nan)
    second = np.full(T, np.nan)
    refreshes = np.zeros(T, dtype=np.int64)
    if oracle is not None and oracle_points is None:
        oracle_points = unit_ball_points(sys.state_dim)
    tr = _Trainer(sys, model, cfg, tcfg)
    status, message = "ok", ""
    start = time.perf_counter()
    for u in range(T):
        before = tr.refreshes
        if not tr.collect(policy):
            status, message = "diverged", f"non-finite state while collecting at update {u + 1}"
            break
        loss, so, ok = tr.fit(u)
        if not ok:
            status, message = "diverged", f"non-finite loss or parameters at update {u + 1}"
            break
        losses[u], second[u] = loss, so
        refreshes[u] = tr.refreshes - before
        if oracle is not None:
            errs[u] = value_error(model, oracle, oracle_points)
        wall[u] = (time.perf_counter() - start) * 1e3
    if checkpoint is not None:
        save_checkpoint(model, checkpoint)
    return EvalReport(losses, errs, wall, second, model.params.copy(), status, message,
                      None if checkpoint is None else str(checkpoint), refreshes)


# ---------------------------------------------------------------------------
# actor-critic on a linear-Gaussian policy
# ---------------------------------------------------------------------------

def policy_score(policy: LinearGaussianPolicy, S, A):
    """Per-sample gradient of log N(a; K s, Sigma) in K: Sigma^-1 (a - K s) s'."""
    if not policy.is_definite():
        raise InvalidArgumentError("policy covariance must be positive definite for a log-density gradient")
    resid = A - S @ policy.K.T
    white = np.linalg.solve(policy.covariance, resid.T).T
    return white[:, :, None] * S[:, None, :]


@dataclass
class ActorCriticState:
    """Everything that persists between actor-critic steps."""

    policy: LinearGaussianPolicy
    trainer: _Trainer
    actor_opt: Adam | Sgd
    step: int = 0


def init_actor_critic(sys, policy: LinearGaussianPolicy, model: ValueModel, cfg: TdConfig,
                      tcfg: TrainConfig, actor_lr=1e-2, actor_optimizer="adam") -> ActorCriticState:
    if not isinstance(policy, LinearGaussianPolicy):
        raise InvalidArgumentError("actor-critic needs a policy with a linear mean (LinearGaussianPolicy)")
    if not policy.is_definite():
        raise InvalidArgumentError("policy covariance must be positive definite for a log-density gradient")
    return ActorCriticState(policy, _Trainer(sys, model, cfg, tcfg), make_optimizer(actor_optimizer, actor_lr))


@dataclass
class ActorCriticFragment:
    loss: float
    gain: np.ndarray
    mean_advantage: float
    status: str = "ok"


def actor_critic_step(state: ActorCriticState, advantage_fn=None) -> ActorCriticFragment:
    """Collect under the current policy, fit the critic, then one ascent step on K.

    The actor gradient is the batch mean of advantage * score, with the
    advantage taken from the critic's one-step errors after the fit.
    ``advantage_fn(batch, errors)`` overrides the advantage (used in tests).
    """
    tr = state.trainer
    cfg = tr.cfg
    if not tr.collect(state.policy):
        return ActorCriticFragment(math.nan, state.policy.K.copy(), math.nan, "diverged")
    loss, _, ok = tr.fit(state.step)
    if not ok:
        return ActorCriticFragment(loss, state.policy.K.copy(), math.nan, "diverged")
    data = tr.buffer.data
    lg: LossGrad = loss_and_grad(tr.model.copy(), tr.model, data, cfg)
    adv = advantage(lg.errors, cfg) if advantage_fn is None else np.asarray(advantage_fn(data, lg.errors))
    score = policy_score(state.policy, data.s, data.a)
    grad = np.einsum("b,bij->ij", adv, score) / len(data)
    # ascent: the optimisers minimise
    K = state.actor_opt.step(state.policy.K.ravel(), -grad.ravel()).reshape(state.policy.K.shape)
    state.policy = state.policy.with_gain(K)
    state.step += 1
    return ActorCriticFragment(loss, K.copy(), float(np.mean(adv)))


def actor_critic(sys, policy: LinearGaussianPolicy, model: ValueModel, cfg: TdConfig, tcfg: TrainConfig,
                 n_steps, actor_lr=1e-2, actor_optimizer="adam"):
    """Alternate critic fitting and actor steps; returns (final policy, gain history, losses)."""
    state = init_actor_critic(sys, policy, model, cfg, replace(tcfg, total_updates=max(tcfg.total_updates, n_steps)),
                              actor_lr, actor_optimizer)
    gains, losses = [], []
    for _ in range(n_steps):
        frag = actor_critic_step(state)
        if frag.status != "ok":
            break
        gains.append(frag.gain)
        losses.append(frag.loss)
    return state.policy, np.array(gains), np.array(losses)
