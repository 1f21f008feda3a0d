"""INI-style configuration files for systems, policies and experiment sweeps.

Matrices are written row by row, rows separated by ``;``::

    [system]
    dims = 2 2 2          # n k m, optional cross-check
    A = -1 0.3; 0 -1
    B = 1 0; 0 1
    Sigma = 0.1 0; 0 0.1
    Q = 1 0; 0 1
    R = 1 0; 0 1

    [policy]
    K = 0 0; 0 0
    Sigma_a = 0.01 0; 0 0.01

A ``builtin`` key (``ou``, ``lqr1``, ``lqr2``, ``lqr4``) replaces the
matrices; ``theta`` and ``sigma`` tune it. Inline comments start with ``#``.
"""

from __future__ import annotations

import configparser
import os
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .oracles import LqrSpec
from .sde_core import LinearGaussianPolicy, LinearSde, Scaling, linear_quadratic, ornstein_uhlenbeck
from .td_engine import Method, TdConfig
from .policy_eval import TrainConfig

BETA_PRESETS = (0.24, 0.33, 0.57, 0.74)
NO_DIFFUSION = "_NO_DIFFUSION"


class _Source:
    """A parsed file plus enough of its text to report line numbers."""

    def __init__(self, path):
        self.path = str(path)
        try:
            with open(path) as fh:
                self.text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        self.cp = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
        self.cp.optionxform = str
        try:
            self.cp.read_string(self.text, source=self.path)
        except configparser.ParsingError as exc:
            lineno = exc.errors[0][0] if exc.errors else None
            raise ConfigError(f"{self.path}: cannot parse", line=lineno) from exc
        except configparser.Error as exc:
            raise ConfigError(f"{self.path}: {exc.message}", line=getattr(exc, "lineno", None)) from exc

    def line_of(self, section, key):
        current = None
        for i, raw in enumerate(self.text.splitlines(), 1):
            s = raw.strip()
            m = re.fullmatch(r"\[(.+)\]", s)
            if m:
                current = m.group(1).strip()
            elif current == section and re.match(rf"{re.escape(key)}\s*[=:]", s):
                return i
        return None

    def error(self, section, key, message):
        return ConfigError(f"{self.path}: [{section}] {message}", key=key, line=self.line_of(section, key))

    def has(self, section, key):
        return self.cp.has_option(section, key)

    def raw(self, section, key, default=None, required=False):
        if self.cp.has_option(section, key):
            return self.cp.get(section, key)
        if required:
            raise ConfigError(f"{self.path}: missing [{section}] {key}", key=key)
        return default

    def get(self, section, key, conv, default=None, required=False):
        raw = self.raw(section, key, None, required)
        if raw is None:
            return default
        try:
            return conv(raw)
        except (ValueError, TypeError) as exc:
            raise self.error(section, key, f"bad value {raw!r}: {exc}") from exc


def parse_matrix(text):
    rows = [r.split() for r in text.replace(",", " ").split(";") if r.strip()]
    if not rows:
        raise ValueError("empty matrix")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise ValueError("rows have different lengths")
    return np.array([[float(x) for x in r] for r in rows], dtype=np.float64)


def parse_list(text, conv=str):
    return [conv(x) for x in re.split(r"[,\s]+", text.strip()) if x]


def _parse_bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected a boolean")


@dataclass
class SystemConfig:
    system: LinearSde
    policy: LinearGaussianPolicy
    dt: float
    seed: int
    gamma: float | None
    state: np.ndarray | None = None


def _load_system(src: _Source) -> SystemConfig:
    sec = "system"
    if not src.cp.has_section(sec):
        raise ConfigError(f"{src.path}: missing [system] section")
    builtin = src.raw(sec, "builtin")
    if builtin is not None:
        sigma = src.get(sec, "sigma", float, None)
        name = builtin.strip().lower()
        if name == "ou":
            sys = ornstein_uhlenbeck(src.get(sec, "theta", float, 1.0), 0.5 if sigma is None else sigma)
        elif name in ("lqr1", "lqr2", "lqr4"):
            sys = linear_quadratic(int(name[3:]), 0.1 if sigma is None else sigma)
        else:
            raise src.error(sec, "builtin", f"unknown builtin system {builtin!r}")
    else:
        mats = {}
        for key in ("A", "B", "Sigma", "Q", "R"):
            mats[key] = src.get(sec, key, parse_matrix, required=key in ("A", "Sigma"))
        n = mats["A"].shape[0]
        if mats["B"] is None:
            mats["B"] = np.zeros((n, 1))
        try:
            sys = LinearSde(mats["A"], mats["B"], mats["Sigma"], mats["Q"], mats["R"])
        except ValueError as exc:
            raise src.error(sec, "A", str(exc)) from exc
    dims = src.get(sec, "dims", lambda t: parse_list(t, int))
    if dims is not None:
        want = [sys.state_dim, sys.action_dim, sys.noise_dim]
        if dims != want[:len(dims)]:
            raise src.error(sec, "dims", f"declares {dims}, matrices give n k m = {want}")
    k, n = sys.action_dim, sys.state_dim
    K = src.get("policy", "K", parse_matrix, np.zeros((k, n)))
    cov = src.get("policy", "Sigma_a", parse_matrix, np.zeros((k, k)))
    try:
        policy = LinearGaussianPolicy(K, cov)
    except ValueError as exc:
        raise src.error("policy", "K", str(exc)) from exc
    if policy.K.shape != (k, n):
        raise src.error("policy", "K", f"gain has shape {policy.K.shape}, expected ({k}, {n})")
    dt = src.get(sec, "dt", float, src.get("td", "dt", float, 1e-3))
    if not dt > 0:
        raise src.error(sec, "dt", f"dt must be positive, got {dt}")
    state = src.get(sec, "state", lambda t: np.array(parse_list(t, float)))
    if state is not None and state.shape != (n,):
        raise src.error(sec, "state", f"state has {state.shape[0]} entries, system has n = {n}")
    return SystemConfig(sys, policy, dt, src.get(sec, "seed", int, 0),
                        src.get(sec, "gamma", float, src.get("td", "gamma", float)), state)


def load_system(path) -> SystemConfig:
    return _load_system(_Source(path))


def load_lqr_spec(path, gamma=None) -> LqrSpec:
    cfg = load_system(path)
    g = gamma if gamma is not None else cfg.gamma
    if g is None:
        raise ConfigError(f"{path}: gamma is needed for an LQR spec", key="gamma")
    return LqrSpec.from_system(cfg.system, cfg.policy, g)


@dataclass
class ExperimentConfig:
    path: str
    system: SystemConfig
    methods: list[str]
    noise: list[float]
    betas: list[float]
    seeds: list[int]
    td: dict
    train: TrainConfig
    model: str = "quadratic"
    hidden: tuple[int, ...] = (64, 64)
    out: str | None = None
    oracle: bool = True
    extra: dict = field(default_factory=dict)

    def td_config(self, method: str, beta: float) -> TdConfig:
        base = method.removesuffix(NO_DIFFUSION)
        return TdConfig(method=Method(base), beta=beta, diffusion_term=not method.endswith(NO_DIFFUSION),
                        **self.td)


_TRAIN_KEYS = {"n_envs": int, "env_steps_per_update": int, "epochs_per_update": int, "minibatch_size": int,
               "learning_rate": float, "lr_final_fraction": float, "total_updates": int, "optimizer": str,
               "init_scale": float, "target_refresh": str, "perturb_order": str}


def load_experiment(path) -> ExperimentConfig:
    src = _Source(path)
    system = _load_system(src)
    ex = "experiment"

    def methods_conv(t):
        out = []
        for m in parse_list(t.upper()):
            Method(m.removesuffix(NO_DIFFUSION))
            out.append(m)
        return out

    def betas_conv(t):
        if t.strip().lower() == "presets":
            return list(BETA_PRESETS)
        vals = parse_list(t, float)
        if any(not 0 <= b <= 1 for b in vals):
            raise ValueError("beta values must lie in [0, 1]")
        return vals

    methods = src.get(ex, "methods", methods_conv, ["TD", "DTD", "BETA_DTD"])
    if src.get(ex, "ablate_diffusion", _parse_bool, False):
        methods += [m + NO_DIFFUSION for m in methods
                    if m in ("NAIVE_DTD", "DTD", "BETA_DTD") and m + NO_DIFFUSION not in methods]
    noise = src.get(ex, "noise", lambda t: parse_list(t, float), [0.0, 0.01, 0.05])
    betas = src.get(ex, "betas", betas_conv, [0.5])
    seeds = src.get(ex, "seeds", lambda t: parse_list(t, int), [system.seed])
    for key, vals in (("methods", methods), ("noise", noise), ("betas", betas), ("seeds", seeds)):
        if not vals:
            raise src.error(ex, key, "list must not be empty")
        if key == "noise" and any(v < 0 for v in vals):
            raise src.error(ex, key, "noise coefficients must be nonnegative")

    scaling = src.get("td", "scaling", lambda t: Scaling(t.strip().lower()), Scaling.DISCRETE)
    td = {"dt": system.dt, "scaling": scaling}
    if scaling is Scaling.DISCRETE:
        gd = src.get("td", "gamma_discrete", float)
        if gd is None:
            if system.gamma is None:
                raise ConfigError(f"{src.path}: [td] needs gamma_discrete or gamma", key="gamma_discrete")
            gd = float(np.exp(-system.gamma * system.dt))
        td["gamma_discrete"] = gd
    else:
        if system.gamma is None:
            raise ConfigError(f"{src.path}: [td] gamma is required for continuous scaling", key="gamma")
        td["gamma"] = system.gamma
    try:
        TdConfig(**td)
    except ValueError as exc:
        raise src.error("td", "gamma_discrete" if scaling is Scaling.DISCRETE else "gamma", str(exc)) from exc

    kw = {}
    for key, conv in _TRAIN_KEYS.items():
        val = src.get("train", key, conv)
        if val is not None:
            kw[key] = val
    try:
        train = TrainConfig(**kw)
    except ValueError as exc:
        raise ConfigError(f"{src.path}: [train] {exc}") from exc

    model = src.get(ex, "model", lambda t: t.strip().lower(), "quadratic")
    if model not in ("quadratic", "mlp"):
        raise src.error(ex, "model", f"unknown model {model!r}")
    hidden = tuple(src.get(ex, "hidden", lambda t: parse_list(t, int), [64, 64]))
    out = src.raw(ex, "out")
    if out is not None and not os.path.isabs(out):
        out = os.path.join(os.path.dirname(os.path.abspath(src.path)), out)
    return ExperimentConfig(src.path, system, methods, noise, betas, seeds, td, train, model, hidden, out,
                            src.get(ex, "oracle", _parse_bool, True))
