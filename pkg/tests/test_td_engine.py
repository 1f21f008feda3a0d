import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from difftd.errors import InvalidArgumentError
from difftd.oracles import LqrSpec, lqr_value
from difftd.sde_core import (ControlledSde, GaussianPolicy, LinearGaussianPolicy, Scaling, Transition,
                             TransitionBatch, scalar_lqr, simulate)
from difftd.td_engine import (Method, TdConfig, advantage, beta_dtd_loss, certified_pair_sampler,
                              contraction_factor, dtd_terms, empirical_contraction_check, loss_and_grad,
                              naive_dtd_terms, squared_loss, td_terms, terms)
from difftd.value_models import MlpValue, QuadraticValue

HALF_SQUARE = QuadraticValue([[0.5]])
HAND = Transition(np.array([1.0]), np.array([0.0]), np.array([1.1]), 2.0, 0.1)
CONT = TdConfig(dt=0.1, gamma=1.0, scaling=Scaling.CONTINUOUS)


def zero(n=1):
    return QuadraticValue.zeros(n)


def tr1(s, s_next, reward, dt):
    return Transition(np.array([s]), np.array([0.0]), np.array([s_next]), reward, dt)


def random_batch(rng, n=2, B=8, dt=0.01):
    return TransitionBatch(rng.normal(size=(B, n)), rng.normal(size=(B, 1)), rng.normal(size=(B, n)),
                           rng.normal(size=B), dt)


def random_mlp(n, seed):
    m = MlpValue(n, (16, 16), seed=seed)
    m.set_params(0.4 * np.random.default_rng(seed).normal(size=m.params.shape))
    return m


# --- configuration -------------------------------------------------------

def test_discount_round_trip():
    d = TdConfig(dt=0.01, gamma_discrete=0.99)
    assert d.gamma == pytest.approx(-math.log(0.99) / 0.01, rel=1e-15)
    c = TdConfig(dt=0.01, gamma=d.gamma, scaling=Scaling.CONTINUOUS)
    assert c.gamma_discrete == pytest.approx(0.99, rel=1e-14)


def test_config_validation():
    with pytest.raises(InvalidArgumentError):
        TdConfig(dt=0.01)
    with pytest.raises(InvalidArgumentError):
        TdConfig(dt=0.0, gamma_discrete=0.99)
    with pytest.raises(InvalidArgumentError):
        TdConfig(dt=0.01, gamma_discrete=0.99, beta=1.5)
    with pytest.raises(InvalidArgumentError):
        TdConfig(dt=0.01, gamma_discrete=0.99, gamma=3.0)
    with pytest.raises(InvalidArgumentError):
        TdConfig(dt=0.01, gamma=-1.0, scaling=Scaling.CONTINUOUS)


def test_transition_dt_must_match_config():
    with pytest.raises(InvalidArgumentError):
        td_terms(zero(), zero(), tr1(1.0, 1.0, 0.0, 0.02), TdConfig(dt=0.01, gamma_discrete=0.99))


# --- table rows ------------------------------------------------------------

def test_td_examples():
    cfg = TdConfig(dt=0.01, gamma_discrete=0.99)
    t = td_terms(zero(), zero(), tr1(1.0, 2.0, 1.0, 0.01), cfg)
    assert (t.target, t.prediction, t.error) == (1.0, 0.0, -1.0)
    t = td_terms(QuadraticValue([[1.0]]), QuadraticValue([[1.0]]), tr1(1.0, 1.0, 0.0, 0.01),
                 TdConfig(dt=0.01, gamma_discrete=0.9))
    assert t.target == pytest.approx(0.9) and t.prediction == 1.0 and t.error == pytest.approx(0.1)
    const = QuadraticValue.zeros(1)
    const.set_params([0.0, 0.0, 1.0 / (1 - 0.99)])
    assert td_terms(const, const, tr1(0.3, -0.2, 1.0, 0.01), cfg).error == pytest.approx(0.0, abs=1e-12)


def test_naive_dtd_examples():
    cfg = TdConfig(dt=0.1, gamma=1.0, scaling=Scaling.CONTINUOUS)
    t = naive_dtd_terms(zero(), zero(), tr1(0.5, 0.7, 1.0, 0.1), cfg)
    assert (t.target, t.prediction) == (1.0, 0.0)
    t = naive_dtd_terms(HALF_SQUARE, HALF_SQUARE, HAND, CONT)
    assert t.target == pytest.approx(3.05, rel=1e-12)
    assert t.prediction == 0.5
    assert t.error == pytest.approx(-2.55, rel=1e-12)
    assert naive_dtd_terms(HALF_SQUARE, HALF_SQUARE, tr1(1.0, 1.0, 0.0, 0.1), CONT).target == 0.0


def test_dtd_examples():
    t = dtd_terms(zero(), zero(), tr1(0.4, 0.9, 0.0, 0.1), CONT)
    assert (t.target, t.prediction, t.error) == (0.0, 0.0, 0.0)
    t = dtd_terms(HALF_SQUARE, HALF_SQUARE, HAND, CONT)
    assert t.target == pytest.approx(-1.395, rel=1e-12)
    assert t.prediction == pytest.approx(1.05, rel=1e-12)
    assert t.error == pytest.approx(2.445, rel=1e-12)
    disc = TdConfig(dt=0.1, gamma_discrete=math.exp(-0.1))
    d = dtd_terms(HALF_SQUARE, HALF_SQUARE, tr1(1.0, 1.1, 0.2, 0.1), disc)
    assert d.target == pytest.approx(0.1 * t.target, rel=1e-12)
    assert d.prediction == pytest.approx(0.1 * t.prediction, rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 4), st.floats(1e-4, 0.5), st.floats(0.1, 5.0), st.integers(0, 2**31))
def test_discrete_is_dt_times_continuous(n, dt, gamma, seed):
    # both configs share one discount: gamma is the field derived from gamma_discrete
    rng = np.random.default_rng(seed)
    disc = TdConfig(dt=dt, gamma_discrete=math.exp(-gamma * dt))
    cont = TdConfig(dt=dt, gamma=disc.gamma, scaling=Scaling.CONTINUOUS)
    model, target = random_mlp(n, seed % 1000), random_mlp(n, seed % 1000 + 1)
    s, s_next, rho = rng.normal(size=n), rng.normal(size=n), float(rng.normal())
    c = dtd_terms(target, model, Transition(s, np.zeros(1), s_next, rho, dt), cont)
    d = dtd_terms(target, model, Transition(s, np.zeros(1), s_next, rho * dt, dt), disc)
    # the target is a difference of two terms, so measure against their size
    scale = abs(rho * dt) + abs(disc.log_discount * target.value(s_next))
    assert abs(d.target - dt * c.target) <= 1e-12 * scale
    assert d.prediction == pytest.approx(dt * c.prediction, rel=1e-12, abs=1e-300)


def test_beta_examples_and_endpoints():
    rng = np.random.default_rng(0)
    b = random_batch(rng)
    tgt, mdl = random_mlp(2, 1), random_mlp(2, 2)
    cfg = TdConfig(dt=0.01, gamma_discrete=0.99, method=Method.BETA_DTD)
    e_td = td_terms(tgt, mdl, b, cfg).error
    e_d = dtd_terms(tgt, mdl, b, cfg).error
    assert beta_dtd_loss(tgt, mdl, b, replace(cfg, beta=0.0)) == float(np.mean(e_td ** 2))
    assert beta_dtd_loss(tgt, mdl, b, replace(cfg, beta=1.0)) == float(np.mean(e_d ** 2))


def test_beta_example_with_known_errors():
    # target V = 0, prediction V = 3, r = 2, ds = 0: TD error 3 - 2 = 1, dTD error 0 - (-2) = 2
    cfg = TdConfig(dt=0.01, gamma_discrete=0.99, beta=0.57, method=Method.BETA_DTD)
    pred = QuadraticValue([[0.0]], c=3.0)
    tr = tr1(0.7, 0.7, 2.0, 0.01)
    assert td_terms(zero(), pred, tr, cfg).error == 1.0
    assert dtd_terms(zero(), pred, tr, cfg).error == 2.0
    assert beta_dtd_loss(zero(), pred, tr, cfg) == pytest.approx(2.71, rel=1e-14)


def test_beta_loss_combines_errors_with_weights():
    rng = np.random.default_rng(5)
    b = random_batch(rng, n=1, B=1)
    tgt, mdl = random_mlp(1, 7), random_mlp(1, 8)
    cfg = TdConfig(dt=0.01, gamma_discrete=0.99, beta=0.57, method=Method.BETA_DTD)
    e_td = td_terms(tgt, mdl, b, cfg).error[0]
    e_d = dtd_terms(tgt, mdl, b, cfg).error[0]
    assert beta_dtd_loss(tgt, mdl, b, cfg) == pytest.approx(0.43 * e_td ** 2 + 0.57 * e_d ** 2, rel=1e-14)


def test_beta_uses_discrete_dtd_under_continuous_scaling():
    rng = np.random.default_rng(6)
    b = random_batch(rng, B=5)
    tgt, mdl = random_mlp(2, 3), random_mlp(2, 4)
    cont = TdConfig(dt=0.01, gamma=1.0, scaling=Scaling.CONTINUOUS, beta=1.0, method=Method.BETA_DTD)
    e_c = dtd_terms(tgt, mdl, b, cont).error
    assert beta_dtd_loss(tgt, mdl, b, cont) == pytest.approx(np.mean((0.01 * e_c) ** 2), rel=1e-12)


def test_terms_rejects_beta():
    with pytest.raises(InvalidArgumentError):
        terms(zero(), zero(), tr1(1.0, 1.0, 0.0, 0.01),
              TdConfig(dt=0.01, gamma_discrete=0.99, method=Method.BETA_DTD))


# --- training gradient -----------------------------------------------------

ALL_CONFIGS = [(m, sc) for m in Method for sc in Scaling]


def make_cfg(method, scaling, dt=0.01, beta=0.3, diffusion_term=True):
    if scaling is Scaling.DISCRETE:
        return TdConfig(dt=dt, gamma_discrete=math.exp(-dt), method=method, beta=beta, diffusion_term=diffusion_term)
    return TdConfig(dt=dt, gamma=1.0, scaling=scaling, method=method, beta=beta, diffusion_term=diffusion_term)


@pytest.mark.parametrize("method,scaling", ALL_CONFIGS)
def test_loss_and_grad_matches_frozen_target_finite_differences(method, scaling):
    rng = np.random.default_rng(7)
    b = random_batch(rng, B=6)
    b = TransitionBatch(b.s, b.a, b.s + 0.1 * rng.normal(size=b.s.shape), b.reward, b.dt)
    model, target = random_mlp(2, 11), random_mlp(2, 12)
    cfg = make_cfg(method, scaling)
    lg = loss_and_grad(target, model, b, cfg)
    assert lg.loss == pytest.approx(squared_loss(target, model, b, cfg), rel=1e-12)
    theta, h = model.params.copy(), 1e-6
    idx = rng.choice(theta.size, 25, replace=False)
    fd = np.empty(idx.size)
    for j, i in enumerate(idx):
        probe = model.copy()
        x = theta.copy()
        x[i] += h
        probe.set_params(x)
        up = squared_loss(target, probe, b, cfg)
        x[i] -= 2 * h
        probe.set_params(x)
        fd[j] = (up - squared_loss(target, probe, b, cfg)) / (2 * h)
    assert np.linalg.norm(lg.grad[idx] - fd) <= 1e-6 * max(np.linalg.norm(fd), 1e-8)


@pytest.mark.parametrize("method", list(Method))
def test_gradient_ignores_target_parameters(method):
    # semi-gradient: d/dtheta with V_target held fixed, so a tied target is not differentiated
    rng = np.random.default_rng(8)
    b = random_batch(rng, B=6, dt=0.5)  # a large step makes the dTD target's dependence on V visible
    model = random_mlp(2, 21)
    cfg = make_cfg(method, Scaling.DISCRETE, dt=0.5)
    frozen = loss_and_grad(model.copy(), model, b, cfg).grad
    theta, h = model.params.copy(), 1e-6
    i = int(np.argmax(np.abs(frozen)))

    def tied(x):
        m = model.copy()
        m.set_params(x)
        return squared_loss(m, m, b, cfg)

    e = np.zeros_like(theta)
    e[i] = h
    full = (tied(theta + e) - tied(theta - e)) / (2 * h)
    assert abs(full - frozen[i]) > 1e-3 * abs(frozen[i])
    # and the gradient's direction in TD / naive rows is dV(s)/dtheta, whatever the target is
    if method in (Method.TD, Method.NAIVE_DTD):
        one = b.take([0])
        g1 = loss_and_grad(random_mlp(2, 30), model, one, cfg).grad
        g2 = loss_and_grad(random_mlp(2, 31), model, one, cfg).grad
        cos = g1 @ g2 / (np.linalg.norm(g1) * np.linalg.norm(g2))
        assert abs(abs(cos) - 1.0) < 1e-10


def test_target_model_is_not_mutated():
    rng = np.random.default_rng(9)
    target, model = random_mlp(2, 1), random_mlp(2, 2)
    before = target.params.tobytes()
    for method in Method:
        loss_and_grad(target, model, random_batch(rng), make_cfg(method, Scaling.DISCRETE))
    assert target.params.tobytes() == before


def test_diffusion_term_switch():
    rng = np.random.default_rng(10)
    b = random_batch(rng)
    model = random_mlp(2, 3)
    on = loss_and_grad(model, model, b, make_cfg(Method.DTD, Scaling.DISCRETE))
    off = loss_and_grad(model, model, b, make_cfg(Method.DTD, Scaling.DISCRETE, diffusion_term=False))
    assert on.second_order > 0 and off.second_order == 0.0
    q = QuadraticValue(np.zeros((2, 2)), [1.0, -1.0])
    a = dtd_terms(q, q, b, make_cfg(Method.DTD, Scaling.DISCRETE))
    c = dtd_terms(q, q, b, make_cfg(Method.DTD, Scaling.DISCRETE, diffusion_term=False))
    np.testing.assert_array_equal(a.prediction, c.prediction)


class Spy:
    """Forwards to a model and records every method called and every array returned."""

    def __init__(self, model):
        self._model, self.calls, self.shapes = model, [], []

    def __getattr__(self, name):
        attr = getattr(self._model, name)
        if not callable(attr):
            return attr

        def wrapped(*args, **kwargs):
            self.calls.append(name)
            out = attr(*args, **kwargs)
            if isinstance(out, np.ndarray):
                self.shapes.append(out.shape)
            return out
        return wrapped


@pytest.mark.parametrize("method", list(Method))
def test_engine_uses_only_first_derivatives_and_hvps(method):
    n, B = 5, 3
    rng = np.random.default_rng(11)
    b = random_batch(rng, n=n, B=B)
    cfg = make_cfg(method, Scaling.DISCRETE)
    tgt, mdl = Spy(random_mlp(n, 1)), Spy(random_mlp(n, 2))
    if method is Method.BETA_DTD:
        beta_dtd_loss(tgt, mdl, b, cfg)
    else:
        terms(tgt, mdl, b, cfg)
    loss_and_grad(tgt, mdl, b, cfg)
    allowed = {"value", "grad_s", "hvp_s", "jet", "jet_param_grad", "params"}
    assert set(tgt.calls + mdl.calls) <= allowed
    assert all(shape[-2:] != (n, n) for shape in tgt.shapes + mdl.shapes)


def test_advantages_agree_up_to_discount_linearization():
    # a quadratic V makes the Taylor step exact; only 1 - exp(-x) versus x remains, bounded by x^2/2 |V(s')|
    rng = np.random.default_rng(12)
    dt = 0.01
    b = random_batch(rng, n=1, B=50, dt=dt)
    b = TransitionBatch(b.s, b.a, b.s + 0.01 * rng.normal(size=b.s.shape), b.reward * dt, dt)
    v = QuadraticValue([[-0.3]])
    bound = 0.5 * dt ** 2 * np.abs(v.value(b.s_next)) * (1 + 1e-9) + 1e-15
    td_cfg = make_cfg(Method.TD, Scaling.DISCRETE)
    td = advantage(loss_and_grad(v, v, b, td_cfg).errors, td_cfg)
    for method in (Method.DTD, Method.BETA_DTD):
        for sc in Scaling:
            cfg = make_cfg(method, sc)
            batch = b if sc is Scaling.DISCRETE else TransitionBatch(b.s, b.a, b.s_next, b.reward / dt, dt)
            adv = advantage(loss_and_grad(v, v, batch, cfg).errors, cfg)
            assert np.all(np.abs(adv - td) <= bound), (method, sc)


# --- fixed point as dt -> 0 -------------------------------------------------

def test_oracle_value_is_dtd_fixed_point_as_dt_shrinks():
    sys = scalar_lqr(sigma=0.3)
    pol = LinearGaussianPolicy([[-0.5]], [[0.0]])
    sol = lqr_value(LqrSpec.from_system(sys, pol, 1.0))
    v = QuadraticValue(sol.P, c=sol.c)
    errs = []
    for dt in (1e-2, 1e-3):
        cfg = TdConfig(dt=dt, gamma=1.0, scaling=Scaling.CONTINUOUS)
        batch, _ = simulate(sys, pol, np.ones((1_000_000, 1)), dt, 1, np.random.default_rng(0),
                            scaling=Scaling.CONTINUOUS)
        e = dtd_terms(v, v, batch, cfg).error
        se = e.std(ddof=1) / math.sqrt(e.size)
        errs.append((abs(e.mean()), se))
    (e1, se1), (e2, se2) = errs
    assert e2 < e1
    assert e2 < 0.2 * e1 + 3 * se2


# --- contraction ------------------------------------------------------------

def test_certificate_examples():
    c = contraction_factor(1, 1, 1, 1, 1, 0, 0, 1, 1, 3.0)
    assert (c.B1, c.B2, c.factor, c.is_contraction) == (1.0, 1.0, 0.5, True)
    c = contraction_factor(1, 1, 1, 1, 1, 0, 0, 1, 1, 1.0)
    assert c.factor == 1.5 and not c.is_contraction
    c = contraction_factor(0, 0, 5, 5, 5, 1, 1, 3, 2, 0.01)
    assert c.factor == 0.0 and c.is_contraction
    with pytest.raises(InvalidArgumentError):
        contraction_factor(1, 1, 1, 1, 1, 0, 0, 1, 1, 0.0)
    with pytest.raises(InvalidArgumentError):
        contraction_factor(-1, 1, 1, 1, 1, 0, 0, 1, 1, 1.0)


GRID1 = np.linspace(-1.0, 1.0, 41)
LINEAR_DRIFT_SYS = ControlledSde(1, 1, 1, lambda s, a: -s, lambda s, a: s[..., None], lambda s, a: -s[..., 0] ** 2)
NO_ACTION = GaussianPolicy(lambda s: 0 * s, [[0.0]])


def test_constant_shift_has_zero_ratio():
    def pair(rng):
        base = QuadraticValue([[rng.normal()]], rng.normal(size=1), rng.normal())
        return QuadraticValue(base.P, base.b, base.c + rng.normal()), base
    assert empirical_contraction_check(LINEAR_DRIFT_SYS, NO_ACTION, 1.0, pair, 20, GRID1) == 0.0


def test_identical_pairs_are_skipped():
    same = QuadraticValue([[1.0]])
    assert math.isnan(empirical_contraction_check(LINEAR_DRIFT_SYS, NO_ACTION, 1.0, lambda r: (same, same), 5, GRID1))


def test_static_system_has_zero_ratio():
    static = ControlledSde(1, 1, 1, lambda s, a: 0 * s, lambda s, a: np.zeros(s.shape + (1,)),
                           lambda s, a: -s[..., 0] ** 2)

    def pair(rng):
        return QuadraticValue([[rng.normal()]], rng.normal(size=1), 0.0), QuadraticValue.zeros(1)
    assert empirical_contraction_check(static, NO_ACTION, 1.0, pair, 20, GRID1) == 0.0


def test_certified_example_respects_factor():
    ratio = empirical_contraction_check(LINEAR_DRIFT_SYS, NO_ACTION, 3.0, certified_pair_sampler(1, 1, GRID1),
                                        200, GRID1)
    assert ratio <= 0.5 + 1e-9


def test_uncertified_example_can_expand():
    # D = s^2 - 1/2 on [-1, 1]: T D = (-2 s^2 + s^2) / gamma, so the ratio is 2 at gamma = 1
    pair = lambda rng: (QuadraticValue([[1.0]], c=-0.5), QuadraticValue.zeros(1))  # noqa: E731
    assert empirical_contraction_check(LINEAR_DRIFT_SYS, NO_ACTION, 1.0, pair, 1, GRID1) == pytest.approx(2.0)


@settings(max_examples=15, deadline=None)
@given(st.floats(0.1, 2.0), st.floats(0.1, 2.0), st.floats(1.0, 2.0), st.integers(0, 2**31))
def test_certificate_bounds_observed_ratio(L_V, beta_V, margin, seed):
    # scalar: mu = -s, sigma = s on [-1, 1]; 2-D: mu = -s, sigma = 0.5 I on [-1, 1]^2
    g2 = np.stack(np.meshgrid(np.linspace(-1, 1, 9), np.linspace(-1, 1, 9)), -1).reshape(-1, 2)
    sys2 = ControlledSde(2, 1, 2, lambda s, a: -s, lambda s, a: np.broadcast_to(0.5 * np.eye(2), s.shape + (2,)))
    cases = [(LINEAR_DRIFT_SYS, GRID1, (1, 1, 1, 0, 0, 1, 1)),
             (sys2, g2, (1, 0, 1, 0, 0.5, 2, 2))]
    for sys, grid, (L_mu, L_sig, B, mu0, sig0, n, m) in cases:
        base = contraction_factor(L_V, beta_V, L_mu, L_sig, B, mu0, sig0, n, m, 1.0)
        gamma = base.factor * 1.5 * margin
        cert = contraction_factor(L_V, beta_V, L_mu, L_sig, B, mu0, sig0, n, m, gamma)
        assert cert.is_contraction
        pol = GaussianPolicy(lambda s: np.zeros(s.shape[:-1] + (1,)), [[0.0]])
        ratio = empirical_contraction_check(sys, pol, gamma, certified_pair_sampler(L_V, beta_V, grid), 10, grid,
                                            n_actions=1, seed=seed)
        assert ratio <= cert.factor + 1e-9
