"""Targets, predictions and squared losses for TD, naive-dTD, dTD and beta-dTD.

Notation for one transition (s, a, s', reward, dt) with ds = s' - s:

    TD          target r + g_d V_(s')                   prediction V(s)
    naive-dTD   target (rho + ds.dV_ + 1/2 ds'H_ds) / (gamma dt)    prediction V(s)
    dTD (cont)  target -rho + gamma V_(s')              prediction (ds.dV + 1/2 ds'H ds) / dt
    dTD (disc)  target -r - ln(g_d) V_(s')              prediction ds.dV + 1/2 ds'H ds

``V_`` is the frozen target model and ``V`` the model being trained;
``rho = r / dt`` and ``g_d = exp(-gamma dt)``. Every error is
``prediction - target``. Second derivatives only ever appear as
Hessian-vector products along ds.
"""

from __future__ import annotations

import math
from collections.abc import Callable
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import InvalidArgumentError
from .sde_core import ControlledSde, GaussianPolicy, Scaling, Transition, TransitionBatch
from .value_models import QuadraticValue, ValueModel


class Method(str, Enum):
    TD = "TD"
    NAIVE_DTD = "NAIVE_DTD"
    DTD = "DTD"
    BETA_DTD = "BETA_DTD"


@dataclass(frozen=True)
class TdConfig:
    """Discounting and loss selection.

    Under DISCRETE scaling ``gamma_discrete`` is required and ``gamma`` is
    derived as -ln(gamma_discrete)/dt. Under CONTINUOUS scaling ``gamma`` is
    required and ``gamma_discrete`` is derived as exp(-gamma dt).
    ``diffusion_term=False`` drops the 1/2 ds'H ds part wherever it appears.
    """

    dt: float
    gamma: float | None = None
    method: Method = Method.DTD
    scaling: Scaling = Scaling.DISCRETE
    gamma_discrete: float | None = None
    beta: float = 0.5
    diffusion_term: bool = True

    def __post_init__(self):
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        set_("method", Method(self.method))
        set_("scaling", Scaling(self.scaling))
        if not self.dt > 0:
            raise InvalidArgumentError(f"dt must be positive, got {self.dt}")
        if not 0.0 <= self.beta <= 1.0:
            raise InvalidArgumentError(f"beta must lie in [0, 1], got {self.beta}")
        if self.scaling is Scaling.DISCRETE:
            if self.gamma_discrete is None or not 0.0 < self.gamma_discrete < 1.0:
                raise InvalidArgumentError(
                    f"DISCRETE scaling needs gamma_discrete in (0, 1), got {self.gamma_discrete}")
            derived = -math.log(self.gamma_discrete) / self.dt
            if self.gamma is not None and not math.isclose(self.gamma, derived, rel_tol=1e-9):
                raise InvalidArgumentError(
                    f"gamma={self.gamma} contradicts -ln(gamma_discrete)/dt = {derived}")
            set_("gamma", derived)
        else:
            if self.gamma is None or not self.gamma > 0:
                raise InvalidArgumentError(f"CONTINUOUS scaling needs gamma > 0, got {self.gamma}")
            derived = math.exp(-self.gamma * self.dt)
            if self.gamma_discrete is not None and not math.isclose(self.gamma_discrete, derived, rel_tol=1e-9):
                raise InvalidArgumentError(
                    f"gamma_discrete={self.gamma_discrete} contradicts exp(-gamma dt) = {derived}")
            set_("gamma_discrete", derived)

    @property
    def log_discount(self):
        """-ln(gamma_discrete) = gamma dt, computed from whichever was given."""
        if self.scaling is Scaling.DISCRETE:
            return -math.log(self.gamma_discrete)
        return self.gamma * self.dt


@dataclass
class LossTerms:
    target: float | np.ndarray
    prediction: float | np.ndarray

    @property
    def error(self):
        return self.prediction - self.target


def _batch(tr, cfg: TdConfig) -> tuple[TransitionBatch, bool]:
    if isinstance(tr, Transition):
        b = TransitionBatch(tr.s[None], tr.a[None], tr.s_next[None], np.array([tr.reward]), tr.dt)
        single = True
    elif isinstance(tr, TransitionBatch):
        b, single = tr, False
    else:
        raise InvalidArgumentError(f"expected Transition or TransitionBatch, got {type(tr).__name__}")
    if not b.dt > 0:
        raise InvalidArgumentError(f"dt must be positive, got {b.dt}")
    if not math.isclose(b.dt, cfg.dt, rel_tol=1e-9):
        raise InvalidArgumentError(f"transition dt {b.dt} differs from config dt {cfg.dt}")
    return b, single


def _rewards(b: TransitionBatch, cfg: TdConfig):
    """(r, rho): discrete reward and reward rate."""
    if cfg.scaling is Scaling.DISCRETE:
        return b.reward, b.reward / b.dt
    return b.reward * b.dt, b.reward


def _out(target, pred, single):
    if single:
        return LossTerms(float(target[0]), float(pred[0]))
    return LossTerms(target, pred)


def _second_order(model, s, ds, cfg):
    if not cfg.diffusion_term:
        return np.zeros(s.shape[0])
    return 0.5 * np.einsum("bi,bi->b", ds, model.hvp_s(s, ds))


def td_terms(model_target: ValueModel, model_pred: ValueModel, tr, cfg: TdConfig) -> LossTerms:
    b, single = _batch(tr, cfg)
    r, _ = _rewards(b, cfg)
    target = r + cfg.gamma_discrete * np.atleast_1d(model_target.value(b.s_next))
    return _out(target, np.atleast_1d(model_pred.value(b.s)), single)


def naive_dtd_terms(model_target: ValueModel, model_pred: ValueModel, tr, cfg: TdConfig) -> LossTerms:
    b, single = _batch(tr, cfg)
    _, rho = _rewards(b, cfg)
    ds = b.s_next - b.s
    first = np.einsum("bi,bi->b", ds, np.atleast_2d(model_target.grad_s(b.s)))
    bracket = rho + (first + _second_order(model_target, b.s, ds, cfg)) / b.dt
    return _out(bracket / cfg.gamma, np.atleast_1d(model_pred.value(b.s)), single)


def _dtd(model_target, model_pred, b: TransitionBatch, cfg: TdConfig, discrete: bool):
    r, rho = _rewards(b, cfg)
    ds = b.s_next - b.s
    generator = (np.einsum("bi,bi->b", ds, np.atleast_2d(model_pred.grad_s(b.s)))
                 + _second_order(model_pred, b.s, ds, cfg))
    v_next = np.atleast_1d(model_target.value(b.s_next))
    if discrete:
        return -r + cfg.log_discount * v_next, generator
    return -rho + cfg.gamma * v_next, generator / b.dt


def dtd_terms(model_target: ValueModel, model_pred: ValueModel, tr, cfg: TdConfig) -> LossTerms:
    b, single = _batch(tr, cfg)
    target, pred = _dtd(model_target, model_pred, b, cfg, cfg.scaling is Scaling.DISCRETE)
    return _out(target, pred, single)


def beta_dtd_loss(model_target: ValueModel, model_pred: ValueModel, tr, cfg: TdConfig):
    """(1 - beta) td_err^2 + beta dtd_err^2, averaged over a batch.

    The dTD error always enters in DISCRETE form so that both errors are in
    reward units.
    """
    b, single = _batch(tr, cfg)
    td_err = td_terms(model_target, model_pred, b, cfg).error
    target, pred = _dtd(model_target, model_pred, b, cfg, True)
    dtd_err = pred - target
    per = (1.0 - cfg.beta) * td_err ** 2 + cfg.beta * dtd_err ** 2
    return float(per[0]) if single else float(np.mean(per))


_TERMS = {Method.TD: td_terms, Method.NAIVE_DTD: naive_dtd_terms, Method.DTD: dtd_terms}


def terms(model_target, model_pred, tr, cfg: TdConfig) -> LossTerms:
    if cfg.method is Method.BETA_DTD:
        raise InvalidArgumentError("BETA_DTD mixes two errors; use beta_dtd_loss")
    return _TERMS[cfg.method](model_target, model_pred, tr, cfg)


def squared_loss(model_target, model_pred, tr, cfg: TdConfig):
    """Mean squared error of the configured method."""
    if cfg.method is Method.BETA_DTD:
        return beta_dtd_loss(model_target, model_pred, tr, cfg)
    err = np.atleast_1d(terms(model_target, model_pred, tr, cfg).error)
    return float(np.mean(err ** 2))


# ---------------------------------------------------------------------------
# training path: loss and parameter gradient from directional jets
# ---------------------------------------------------------------------------

@dataclass
class LossGrad:
    loss: float
    grad: np.ndarray
    errors: np.ndarray
    """Per-sample errors; for BETA_DTD, column 0 is TD and column 1 is dTD (discrete)."""
    second_order: float
    """Mean |1/2 ds'H ds| / dt of the trained model over the batch."""


def loss_and_grad(model_target: ValueModel, model: ValueModel, batch: TransitionBatch, cfg: TdConfig) -> LossGrad:
    """Mean squared error of ``cfg.method`` and its gradient in the parameters of ``model``.

    Target terms come from ``model_target`` and receive no gradient. One jet
    of ``model`` along ds gives V(s), <grad V, ds> and <ds, H ds>; the
    gradient is a single reverse pass over the per-sample combination.
    """
    b, _ = _batch(batch, cfg)
    B = len(b)
    r, rho = _rewards(b, cfg)
    ds = b.s_next - b.s
    J = model.jet(b.s, ds)
    half = 0.5 if cfg.diffusion_term else 0.0
    second = float(np.mean(np.abs(half * J[:, 2]))) / b.dt
    C = np.zeros((B, 3))
    method = cfg.method
    if method in (Method.TD, Method.BETA_DTD):
        v_next = np.atleast_1d(model_target.value(b.s_next))
    if method is Method.TD:
        e = J[:, 0] - (r + cfg.gamma_discrete * v_next)
        C[:, 0] = 2.0 * e / B
        loss, errors = np.mean(e ** 2), e
    elif method is Method.NAIVE_DTD:
        Jt = model_target.jet(b.s, ds)
        e = J[:, 0] - (rho + (Jt[:, 1] + half * Jt[:, 2]) / b.dt) / cfg.gamma
        C[:, 0] = 2.0 * e / B
        loss, errors = np.mean(e ** 2), e
    elif method is Method.DTD:
        v_next = np.atleast_1d(model_target.value(b.s_next))
        if cfg.scaling is Scaling.DISCRETE:
            scale, target = 1.0, -r + cfg.log_discount * v_next
        else:
            scale, target = 1.0 / b.dt, -rho + cfg.gamma * v_next
        e = scale * (J[:, 1] + half * J[:, 2]) - target
        C[:, 1] = 2.0 * e * scale / B
        C[:, 2] = 2.0 * e * scale * half / B
        loss, errors = np.mean(e ** 2), e
    else:
        beta = cfg.beta
        e_td = J[:, 0] - (r + cfg.gamma_discrete * v_next)
        e_d = (J[:, 1] + half * J[:, 2]) - (-r + cfg.log_discount * v_next)
        C[:, 0] = 2.0 * (1.0 - beta) * e_td / B
        C[:, 1] = 2.0 * beta * e_d / B
        C[:, 2] = 2.0 * beta * e_d * half / B
        loss = np.mean((1.0 - beta) * e_td ** 2 + beta * e_d ** 2)
        errors = np.stack([e_td, e_d], axis=1)
    grad = model.jet_param_grad(b.s, ds, C)
    return LossGrad(float(loss), grad, errors, second)


def advantage(errors, cfg: TdConfig):
    """One-step advantage in discrete reward units from ``LossGrad.errors``.

    TD: r + g_d V(s') - V(s) = -e. dTD (discrete form): the same quantity to
    first order, = +e (a CONTINUOUS-form error is multiplied by dt first).
    naive-dTD: -e gamma dt. beta-dTD mixes the TD and dTD advantages with
    weights 1 - beta and beta.
    """
    e = np.asarray(errors, dtype=np.float64)
    if cfg.method is Method.TD:
        return -e
    if cfg.method is Method.DTD:
        return e if cfg.scaling is Scaling.DISCRETE else e * cfg.dt
    if cfg.method is Method.NAIVE_DTD:
        return -e * cfg.gamma * cfg.dt
    return -(1.0 - cfg.beta) * e[:, 0] + cfg.beta * e[:, 1]


# ---------------------------------------------------------------------------
# contraction certificate
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ContractionCertificate:
    L_V: float
    beta_V: float
    L_mu: float
    L_sigma: float
    B: float
    mu00_norm: float
    sigma00_norm: float
    n: int
    m: int
    gamma: float
    B1: float = field(init=False)
    B2: float = field(init=False)
    factor: float = field(init=False)

    def __post_init__(self):
        for name in ("L_V", "beta_V", "L_mu", "L_sigma", "B", "mu00_norm", "sigma00_norm"):
            if not getattr(self, name) >= 0:
                raise InvalidArgumentError(f"{name} must be nonnegative, got {getattr(self, name)}")
        if self.n < 1 or self.m < 1:
            raise InvalidArgumentError("n and m must be positive")
        if not self.gamma > 0:
            raise InvalidArgumentError(f"gamma must be positive, got {self.gamma}")
        b1 = self.mu00_norm + self.L_mu * self.B
        b2 = (self.sigma00_norm + self.L_sigma * self.B) ** 2
        object.__setattr__(self, "B1", b1)
        object.__setattr__(self, "B2", b2)
        object.__setattr__(self, "factor",
                           (self.n * self.L_V * b1 + 0.5 * self.n ** 2 * self.beta_V * self.m * b2) / self.gamma)

    @property
    def is_contraction(self):
        return self.factor < 1.0


def contraction_factor(L_V, beta_V, L_mu, L_sigma, B, mu00_norm, sigma00_norm, n, m, gamma) -> ContractionCertificate:
    return ContractionCertificate(L_V, beta_V, L_mu, L_sigma, B, mu00_norm, sigma00_norm, n, m, gamma)


class HjbOperator:
    """(T V)(s) = (1/gamma) E_a[rho + mu . grad V + 1/2 tr(sigma sigma' H)] on fixed grid states.

    The action expectation uses a fixed sample of ``n_actions`` draws per
    state. Action-averaged drift, reward and sigma sigma' are precomputed;
    the trace term is a sum of Hessian-vector products along the columns of
    a square root of the averaged sigma sigma'.
    """

    def __init__(self, sys: ControlledSde, policy: GaussianPolicy, gamma, grid, n_actions=2048, seed=0):
        if not gamma > 0:
            raise InvalidArgumentError(f"gamma must be positive, got {gamma}")
        grid = np.array(grid, dtype=np.float64)
        if grid.ndim == 1:
            grid = grid[:, None]
        if grid.shape[1] != sys.state_dim:
            raise InvalidArgumentError(f"grid has dimension {grid.shape[1]}, system has {sys.state_dim}")
        G, n = grid.shape
        z = np.random.default_rng(seed).standard_normal((n_actions, policy.action_dim))
        S = np.repeat(grid, n_actions, axis=0)
        A = policy.act(S, np.tile(z, (G, 1)))
        mu = sys.drift(S, A).reshape(G, n_actions, n).mean(axis=1)
        sig = sys.diffusion(S, A)
        D = np.einsum("bij,bkj->bik", sig, sig).reshape(G, n_actions, n, n).mean(axis=1)
        try:
            rho = sys.reward_rate(S, A).reshape(G, n_actions).mean(axis=1)
        except InvalidArgumentError:
            rho = np.zeros(G)
        w, U = np.linalg.eigh(0.5 * (D + np.transpose(D, (0, 2, 1))))
        self.columns = U * np.sqrt(np.clip(w, 0.0, None))[:, None, :]
        self.grid, self.gamma, self.mu, self.rho = grid, float(gamma), mu, rho

    def __call__(self, model: ValueModel):
        drift = np.einsum("bi,bi->b", self.mu, model.grad_s(self.grid))
        trace = np.zeros(self.grid.shape[0])
        for j in range(self.grid.shape[1]):
            c = np.ascontiguousarray(self.columns[:, :, j])
            trace += np.einsum("bi,bi->b", c, model.hvp_s(self.grid, c))
        return (self.rho + drift + 0.5 * trace) / self.gamma


def empirical_contraction_check(sys, policy, gamma, pair_sampler: Callable, n_pairs, grid,
                                n_actions=2048, seed=0):
    """Largest ||T V1 - T V2|| / ||V1 - V2|| (sup over ``grid``) across sampled pairs.

    ``pair_sampler(rng)`` returns two value models. Pairs identical on the
    grid are skipped; NaN is returned when every pair was skipped.
    """
    op = HjbOperator(sys, policy, gamma, grid, n_actions, seed)
    rng = np.random.default_rng(seed)
    best = math.nan
    for _ in range(n_pairs):
        v1, v2 = pair_sampler(rng)
        denom = np.max(np.abs(v1.value(op.grid) - v2.value(op.grid)))
        if denom == 0.0:
            continue
        ratio = float(np.max(np.abs(op(v1) - op(v2))) / denom)
        best = ratio if math.isnan(best) else max(best, ratio)
    return best


def _quadratic_sup_norms(P, b, c, grid):
    """sup over grid of |D|, max_i |dD/ds_i| and max_ij |d2D/ds_i ds_j| for D = s'Ps + b's + c."""
    vals = np.einsum("bi,ij,bj->b", grid, P, grid) + grid @ b + c
    grads = 2.0 * grid @ P + b
    return np.max(np.abs(vals)), np.max(np.abs(grads)), 2.0 * np.max(np.abs(P))


def certified_pair_sampler(L_V, beta_V, grid, scale=1.0):
    """Quadratic pairs whose difference D respects the certificate's derivative bounds.

    Accepted pairs satisfy max|dD| <= L_V sup|D| and max|d2D| <= beta_V sup|D|
    on the grid, which is what the certificate's bound needs.
    """
    grid = np.array(grid, dtype=np.float64)
    if grid.ndim == 1:
        grid = grid[:, None]
    n = grid.shape[1]

    def sample(rng):
        for _ in range(100_000):
            M = rng.normal(0.0, scale, (n, n))
            P = 0.5 * (M + M.T)
            b = rng.normal(0.0, scale, n)
            c = rng.normal(0.0, 3.0 * scale)
            sup, d1, d2 = _quadratic_sup_norms(P, b, c, grid)
            if sup > 0 and d1 <= L_V * sup and d2 <= beta_V * sup:
                break
        else:
            raise InvalidArgumentError("could not draw a pair within the certificate's derivative bounds")
        M2 = rng.normal(0.0, scale, (n, n))
        base = QuadraticValue(0.5 * (M2 + M2.T), rng.normal(0.0, scale, n), rng.normal(0.0, scale))
        other = QuadraticValue(base.P + P, base.b + b, base.c + c)
        return other, base

    return sample
