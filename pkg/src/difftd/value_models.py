"""Value-function approximators with state derivatives.

Every model evaluates ``value``, ``grad_s`` and ``hvp_s`` on a single state
``(n,)`` or a batch ``(B, n)``. Training goes through directional jets: along
a direction ``u`` the model returns ``(V, <grad V, u>, <u, H u>)`` and the
parameter gradient of any per-sample linear combination of those three
numbers. Nothing here forms an n x n Hessian.
"""

from __future__ import annotations

from abc import ABC, abstractmethod

import numpy as np

from .errors import InvalidArgumentError
from .kernels import mlp as K


def _as_batch(s, n, what="state"):
    s = np.asarray(s, dtype=np.float64)
    if s.shape[-1:] != (n,) or s.ndim > 2:
        raise InvalidArgumentError(f"{what} has shape {s.shape}, expected ({n},) or (B, {n})")
    return np.atleast_2d(s), s.ndim == 1


class ValueModel(ABC):
    state_dim: int

    @property
    @abstractmethod
    def params(self) -> np.ndarray:
        """Flat parameter vector (a view; copy before mutating elsewhere)."""

    @abstractmethod
    def set_params(self, theta) -> None: ...

    def copy(self):
        clone = self._empty_like()
        clone.set_params(self.params.copy())
        return clone

    @abstractmethod
    def _empty_like(self): ...

    @abstractmethod
    def _value(self, S): ...

    @abstractmethod
    def _grad(self, S): ...

    @abstractmethod
    def _hvp(self, S, V): ...

    @abstractmethod
    def _jet(self, S, U): ...

    @abstractmethod
    def _jet_param_grad(self, S, U, C): ...

    def value(self, s):
        S, single = _as_batch(s, self.state_dim)
        out = self._value(S)
        return float(out[0]) if single else out

    def grad_s(self, s):
        S, single = _as_batch(s, self.state_dim)
        out = self._grad(S)
        return out[0] if single else out

    def hvp_s(self, s, v):
        S, single = _as_batch(s, self.state_dim)
        V, _ = _as_batch(v, self.state_dim, "direction")
        if V.shape != S.shape:
            V = np.broadcast_to(V, S.shape)
        out = self._hvp(np.ascontiguousarray(S), np.ascontiguousarray(V))
        return out[0] if single else out

    def jet(self, s, u):
        """(B, 3) array of V, <grad V, u> and <u, H u> at each state."""
        S, _ = _as_batch(s, self.state_dim)
        U, _ = _as_batch(u, self.state_dim, "direction")
        return self._jet(np.ascontiguousarray(S), np.ascontiguousarray(np.broadcast_to(U, S.shape)))

    def jet_param_grad(self, s, u, coefs):
        """Gradient in theta of sum_b coefs[b] . jet(s_b, u_b)."""
        S, _ = _as_batch(s, self.state_dim)
        U, _ = _as_batch(u, self.state_dim, "direction")
        C = np.ascontiguousarray(np.broadcast_to(np.asarray(coefs, dtype=np.float64), (S.shape[0], 3)))
        return self._jet_param_grad(np.ascontiguousarray(S),
                                    np.ascontiguousarray(np.broadcast_to(U, S.shape)), C)


class QuadraticValue(ValueModel):
    """V(s) = s'Ps + b's + c with symmetric P."""

    def __init__(self, P, b=None, c=0.0):
        P = np.atleast_2d(np.asarray(P, dtype=np.float64))
        n = P.shape[0]
        if P.shape != (n, n):
            raise InvalidArgumentError(f"P must be square, got {P.shape}")
        if np.max(np.abs(P - P.T)) > 1e-12:
            raise InvalidArgumentError("P is not symmetric")
        self.state_dim = n
        self._theta = np.concatenate([P.ravel(), np.zeros(n) if b is None else np.asarray(b, dtype=np.float64).ravel(), [float(c)]])
        if self._theta.shape[0] != n * n + n + 1:
            raise InvalidArgumentError(f"b must have length {n}")

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros((n, n)))

    @property
    def P(self):
        n = self.state_dim
        return self._theta[:n * n].reshape(n, n)

    @property
    def b(self):
        n = self.state_dim
        return self._theta[n * n:n * n + n]

    @property
    def c(self):
        return float(self._theta[-1])

    @property
    def params(self):
        return self._theta

    def set_params(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != self._theta.shape:
            raise InvalidArgumentError(f"expected {self._theta.shape[0]} parameters, got {theta.shape}")
        self._theta = theta.copy()

    def _empty_like(self):
        return QuadraticValue.zeros(self.state_dim)

    def _sym(self):
        P = self.P
        return 0.5 * (P + P.T)

    def _value(self, S):
        P = self._sym()
        return np.einsum("bi,ij,bj->b", S, P, S) + S @ self.b + self.c

    def _grad(self, S):
        return 2.0 * S @ self._sym() + self.b

    def _hvp(self, S, V):
        return 2.0 * V @ self._sym()

    def _jet(self, S, U):
        P = self._sym()
        PS = S @ P
        return np.stack([np.einsum("bi,bi->b", S, PS) + S @ self.b + self.c,
                         np.einsum("bi,bi->b", U, 2.0 * PS) + U @ self.b,
                         2.0 * np.einsum("bi,ij,bj->b", U, P, U)], axis=1)

    def _jet_param_grad(self, S, U, C):
        a, c1, c2 = C[:, 0], C[:, 1], C[:, 2]
        gP = (np.einsum("b,bi,bj->ij", a, S, S)
              + np.einsum("b,bi,bj->ij", c1, U, S) + np.einsum("b,bi,bj->ij", c1, S, U)
              + 2.0 * np.einsum("b,bi,bj->ij", c2, U, U))
        gP = 0.5 * (gP + gP.T)
        gb = a @ S + c1 @ U
        return np.concatenate([gP.ravel(), gb, [a.sum()]])


class MlpValue(ValueModel):
    """Tanh multilayer perceptron, widths (n, h_1, ..., 1).

    Weights start uniform in +-1/sqrt(fan_in); the output layer starts at zero
    so an untrained model is V = 0 everywhere.
    """

    def __init__(self, state_dim, hidden=(64, 64), seed=0, params=None):
        self.state_dim = int(state_dim)
        self.widths = np.array((self.state_dim, *hidden, 1), dtype=np.int64)
        self.seed = int(seed)
        if params is not None:
            self.set_params(params)
            return
        rng = np.random.default_rng(seed)
        chunks = []
        for i in range(len(self.widths) - 1):
            n_in, n_out = int(self.widths[i]), int(self.widths[i + 1])
            if i == len(self.widths) - 2:
                chunks.append(np.zeros(n_out * n_in + n_out))
                continue
            bound = 1.0 / np.sqrt(n_in)
            chunks.append(rng.uniform(-bound, bound, n_out * n_in + n_out))
        self._theta = np.concatenate(chunks)

    @property
    def hidden(self):
        return tuple(int(w) for w in self.widths[1:-1])

    @property
    def params(self):
        return self._theta

    def set_params(self, theta):
        theta = np.ascontiguousarray(theta, dtype=np.float64)
        if theta.shape != (K.param_count(self.widths),):
            raise InvalidArgumentError(f"expected {K.param_count(self.widths)} parameters, got {theta.shape}")
        self._theta = theta.copy()

    def _empty_like(self):
        return MlpValue(self.state_dim, self.hidden, self.seed, params=self._theta)

    def _value(self, S):
        return K.value(self._theta, self.widths, np.ascontiguousarray(S))

    def _grad(self, S):
        return K.grad_s(self._theta, self.widths, np.ascontiguousarray(S))

    def _hvp(self, S, V):
        return K.hvp_s(self._theta, self.widths, S, V)

    def _jet(self, S, U):
        return K.jet(self._theta, self.widths, S, U)

    def _jet_param_grad(self, S, U, C):
        return K.jet_param_grad(self._theta, self.widths, S, U, C)


# ---------------------------------------------------------------------------
# checkpoints: text header, blank line, raw little-endian float64 parameters
# ---------------------------------------------------------------------------

_MAGIC = "difftd-checkpoint 1"


def save_checkpoint(model: ValueModel, path):
    theta = np.ascontiguousarray(model.params, dtype="<f8")
    if isinstance(model, MlpValue):
        lines = ["kind mlp", "widths " + " ".join(str(int(w)) for w in model.widths), f"seed {model.seed}"]
    elif isinstance(model, QuadraticValue):
        lines = ["kind quadratic", f"widths {model.state_dim}", "seed 0"]
    else:
        raise InvalidArgumentError(f"cannot checkpoint {type(model).__name__}")
    header = "\n".join([_MAGIC, *lines, f"count {theta.shape[0]}", "dtype <f8", "", ""])
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(theta.tobytes())


def load_checkpoint(path) -> ValueModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    head, sep, body = raw.partition(b"\n\n")
    if not sep:
        raise InvalidArgumentError(f"{path}: missing checkpoint header")
    lines = head.decode("ascii").splitlines()
    if lines[0] != _MAGIC:
        raise InvalidArgumentError(f"{path}: not a difftd checkpoint")
    meta = dict(line.split(" ", 1) for line in lines[1:])
    count = int(meta["count"])
    theta = np.frombuffer(body, dtype=meta.get("dtype", "<f8"), count=count).astype(np.float64)
    widths = [int(w) for w in meta["widths"].split()]
    if meta["kind"] == "mlp":
        return MlpValue(widths[0], tuple(widths[1:-1]), int(meta["seed"]), params=theta)
    if meta["kind"] == "quadratic":
        model = QuadraticValue.zeros(widths[0])
        model.set_params(theta)
        return model
    raise InvalidArgumentError(f"{path}: unknown model kind {meta['kind']!r}")
