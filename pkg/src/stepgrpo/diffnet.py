"""Small differentiable MLP velocity network.

Gradients come from a minimal reverse-mode tape (:class:`Var`) that wraps
numpy arrays.  Only a closed set of primitives is differentiable; calling any
other numpy function on a :class:`Var` raises :class:`UnsupportedPrimitive`.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "Var",
    "UnsupportedPrimitive",
    "EvaluationError",
    "NetConfig",
    "ParamVector",
    "OptState",
    "VelocityNet",
    "minimum",
    "clip",
    "encode_inputs",
    "init_params",
    "forward",
    "grad_params",
    "adamw_step",
    "finite_diff_check",
    "finite_diff_error",
    "save_checkpoint",
    "load_checkpoint",
]


class UnsupportedPrimitive(TypeError):
    """Raised when a loss uses an operation the tape cannot differentiate."""


class EvaluationError(ValueError):
    pass


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _lift(x):
    return x if isinstance(x, Var) else Var(np.asarray(x, dtype=np.float64))


class Var:
    """A node on the reverse-mode tape."""

    __slots__ = ("value", "grad", "parents", "backward_fn")

    def __init__(self, value, parents=(), backward_fn=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        fn = _UFUNCS.get(ufunc)
        if method != "__call__" or fn is None or kwargs:
            raise UnsupportedPrimitive(f"{ufunc.__name__} is not a differentiable primitive")
        return fn(*inputs)

    def __array_function__(self, func, types, args, kwargs):
        raise UnsupportedPrimitive(f"{func.__name__} is not a differentiable primitive")

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(shape={self.value.shape})"

    def __len__(self):
        return len(self.value)

    # arithmetic --------------------------------------------------------
    def __add__(self, other):
        other = _lift(other)
        a, b = self, other
        return Var(a.value + b.value, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))

    __radd__ = __add__

    def __neg__(self):
        return Var(-self.value, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-_lift(other))

    def __rsub__(self, other):
        return _lift(other) + (-self)

    def __mul__(self, other):
        other = _lift(other)
        a, b = self, other
        return Var(a.value * b.value, (a, b),
                   lambda g: (_unbroadcast(g * b.value, a.shape),
                              _unbroadcast(g * a.value, b.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Var):
            return self * other ** -1.0
        return self * (1.0 / np.asarray(other, dtype=np.float64))

    def __rtruediv__(self, other):
        return _lift(other) * self ** -1.0

    def __pow__(self, p):
        if isinstance(p, Var):
            raise UnsupportedPrimitive("only constant exponents are supported")
        p = float(p)
        a = self
        return Var(a.value ** p, (a,), lambda g: (g * p * a.value ** (p - 1.0),))

    def __matmul__(self, other):
        other = _lift(other)
        a, b = self, other
        return Var(a.value @ b.value, (a, b),
                   lambda g: (g @ b.value.T, a.value.T @ g))

    def __rmatmul__(self, other):
        return _lift(other) @ self

    def __getitem__(self, idx):
        a = self

        def back(g):
            out = np.zeros_like(a.value)
            np.add.at(out, idx, g)
            return (out,)

        return Var(a.value[idx], (a,), back)

    # reductions and elementwise functions ------------------------------
    def sum(self, axis=None, keepdims=False):
        a = self

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return Var(a.value.sum(axis=axis, keepdims=keepdims), (a,), back)

    def mean(self, axis=None, keepdims=False):
        n = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def square(self):
        a = self
        return Var(a.value ** 2, (a,), lambda g: (2.0 * g * a.value,))

    def tanh(self):
        out = np.tanh(self.value)
        return Var(out, (self,), lambda g: (g * (1.0 - out ** 2),))

    def softplus(self):
        a = self
        sig = 0.5 * (1.0 + np.tanh(0.5 * a.value))
        return Var(np.logaddexp(0.0, a.value), (a,), lambda g: (g * sig,))

    def exp(self):
        out = np.exp(self.value)
        return Var(out, (self,), lambda g: (g * out,))

    def log(self):
        a = self
        return Var(np.log(a.value), (a,), lambda g: (g / a.value,))

    def sqrt(self):
        out = np.sqrt(self.value)
        return Var(out, (self,), lambda g: (0.5 * g / out,))

    def backward(self):
        if self.value.size != 1:
            raise EvaluationError("backward() needs a scalar output")
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node.backward_fn is None or node.grad is None:
                continue
            for p, g in zip(node.parents, node.backward_fn(node.grad)):
                p.grad = g if p.grad is None else p.grad + g


def minimum(a, b):
    """Elementwise min; ties route the gradient to the first argument."""
    if not isinstance(a, Var) and not isinstance(b, Var):
        return np.minimum(a, b)
    a, b = _lift(a), _lift(b)
    pick_a = a.value <= b.value
    return Var(np.where(pick_a, a.value, b.value), (a, b),
               lambda g: (_unbroadcast(np.where(pick_a, g, 0.0), a.shape),
                          _unbroadcast(np.where(pick_a, 0.0, g), b.shape)))


def clip(a, lo, hi):
    """Clip with zero slope outside ``[lo, hi]`` and unit slope inside."""
    if not isinstance(a, Var):
        return np.clip(a, lo, hi)
    inside = (a.value >= lo) & (a.value <= hi)
    return Var(np.clip(a.value, lo, hi), (a,), lambda g: (np.where(inside, g, 0.0),))


_UFUNCS = {
    np.add: lambda a, b: _lift(a) + b,
    np.subtract: lambda a, b: _lift(a) - b,
    np.multiply: lambda a, b: _lift(a) * b,
    np.true_divide: lambda a, b: _lift(a) / b,
    np.matmul: lambda a, b: _lift(a) @ b,
    np.negative: lambda a: -a,
    np.square: lambda a: a.square(),
    np.tanh: lambda a: a.tanh(),
    np.exp: lambda a: a.exp(),
    np.log: lambda a: a.log(),
    np.sqrt: lambda a: a.sqrt(),
    np.minimum: lambda a, b: minimum(a, b),
}


def _apply(fn, x):
    if isinstance(x, Var):
        return getattr(x, fn)()
    if fn == "softplus":
        return np.logaddexp(0.0, x)
    return getattr(np, fn)(x)


# ---------------------------------------------------------------------------
# network


@dataclass(frozen=True)
class NetConfig:
    input_dim: int
    hidden_widths: tuple = (64, 64)
    activation: str = "tanh"
    output_dim: int = 2

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.activation not in ("tanh", "smooth-relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if min((self.input_dim, self.output_dim) + self.hidden_widths) < 1:
            raise ValueError("all layer widths must be >= 1")
        if self.n_contexts < 0:
            raise ValueError("input_dim too small for data dim + 3 time features")

    @classmethod
    def for_task(cls, data_dim, n_contexts, hidden_widths=(64, 64), activation="tanh"):
        return cls(data_dim + 3 + n_contexts, tuple(hidden_widths), activation, data_dim)

    @property
    def n_contexts(self):
        return self.input_dim - self.output_dim - 3

    @property
    def widths(self):
        return (self.input_dim,) + self.hidden_widths + (self.output_dim,)

    def layout(self):
        """Return ``[(offset, rows, cols), ...]``; weights and biases alternate."""
        table, off = [], 0
        w = self.widths
        for n_in, n_out in zip(w[:-1], w[1:]):
            table.append((off, n_in, n_out))
            off += n_in * n_out
            table.append((off, 1, n_out))
            off += n_out
        return table

    def to_dict(self):
        d = asdict(self)
        d["hidden_widths"] = list(self.hidden_widths)
        return d


@dataclass
class ParamVector:
    values: np.ndarray
    layout: list = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        expected = sum(r * c for _, r, c in self.layout)
        if self.values.ndim != 1 or self.values.size != expected:
            raise ValueError(f"parameter length {self.values.size} != layout total {expected}")

    def blocks(self):
        return [self.values[o:o + r * c].reshape(r, c) for o, r, c in self.layout]

    def copy(self):
        return ParamVector(self.values.copy(), list(self.layout))

    def __len__(self):
        return self.values.size


def init_params(config, rng, scale=1.0):
    """Glorot-normal weights, zero biases."""
    values = np.zeros(sum(r * c for _, r, c in config.layout()))
    for i, (o, r, c) in enumerate(config.layout()):
        if i % 2 == 0:
            values[o:o + r * c] = rng.standard_normal(r * c) * scale * np.sqrt(2.0 / (r + c))
    return ParamVector(values, config.layout())


def encode_inputs(x, t, c, n_contexts):
    """Stack ``[x, t, sin 2πt, cos 2πt, onehot(c)]`` row-wise."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    b = x.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
    c = np.broadcast_to(np.asarray(c, dtype=np.int64), (b,))
    if np.any((c < 0) | (c >= n_contexts)):
        raise ValueError(f"context id out of range [0, {n_contexts})")
    onehot = np.zeros((b, n_contexts))
    onehot[np.arange(b), c] = 1.0
    return np.concatenate(
        [x, t[:, None], np.sin(2 * np.pi * t)[:, None], np.cos(2 * np.pi * t)[:, None], onehot],
        axis=1,
    )


def _mlp(blocks, h, activation):
    fn = "tanh" if activation == "tanh" else "softplus"
    n_layers = len(blocks) // 2
    for i in range(n_layers):
        h = h @ blocks[2 * i] + blocks[2 * i + 1]
        if i < n_layers - 1:
            h = _apply(fn, h)
    return h


def forward(config, params, x, t, c):
    """Velocity ``v(x, t, c)``.

    ``x`` is a point or a batch of points; ``t`` and ``c`` broadcast over the
    batch.  A single point in gives a single vector out.
    """
    if not np.all(np.isfinite(params.values)):
        raise EvaluationError("non-finite parameters")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any((t_arr < 0.0) | (t_arr > 1.0)):
        raise ValueError("t must lie in [0, 1]")
    single = np.ndim(x) == 1
    h = encode_inputs(x, t, c, config.n_contexts)
    out = _mlp(params.blocks(), h, config.activation)
    return out[0] if single else out


class VelocityNet:
    """Config + parameters bundled for convenience."""

    def __init__(self, config, params):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config, rng):
        return cls(config, init_params(config, rng))

    def __call__(self, x, t, c):
        return forward(self.config, self.params, x, t, c)

    def with_params(self, params):
        return VelocityNet(self.config, params)

    def copy(self):
        return VelocityNet(self.config, self.params.copy())


def grad_params(config, params, loss_fn):
    """Reverse-mode gradient of ``loss_fn`` with respect to the parameters.

    ``loss_fn(apply)`` receives ``apply(x, t, c)`` which evaluates the network
    on the tape, and must return a scalar :class:`Var`.  Returns
    ``(loss_value, gradient ParamVector)``.
    """
    if not np.all(np.isfinite(params.values)):
        raise EvaluationError("non-finite parameters")
    leaves = [Var(b) for b in params.blocks()]

    def apply(x, t, c):
        return _mlp(leaves, encode_inputs(x, t, c, config.n_contexts), config.activation)

    loss = loss_fn(apply)
    if not isinstance(loss, Var):
        raise UnsupportedPrimitive("loss_fn must return a Var built from supported primitives")
    loss.backward()
    grad = np.zeros_like(params.values)
    for leaf, (o, r, c) in zip(leaves, params.layout):
        if leaf.grad is not None:
            grad[o:o + r * c] = leaf.grad.ravel()
    return float(loss.value), ParamVector(grad, list(params.layout))


def finite_diff_error(value_fn, params, grad, h=1e-5, indices=None):
    """Max relative error between ``grad`` and central differences of ``value_fn``.

    ``value_fn`` maps a raw parameter array to a float.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    g = grad.values if isinstance(grad, ParamVector) else np.asarray(grad)
    idx = range(len(params)) if indices is None else indices
    worst = 0.0
    for i in idx:
        plus, minus = params.values.copy(), params.values.copy()
        plus[i] += h
        minus[i] -= h
        fd = (value_fn(plus) - value_fn(minus)) / (2 * h)
        worst = max(worst, abs(g[i] - fd) / max(1e-12, abs(fd)))
    return worst


def finite_diff_check(config, params, loss_fn, h=1e-5, grad=None, indices=None):
    """Max relative error between the tape gradient and central differences.

    ``grad`` overrides the analytic gradient (used for fault injection).
    ``indices`` restricts the check to a subset of parameters.
    """
    if grad is None:
        grad = grad_params(config, params, loss_fn)[1]

    def value(vals):
        return float(loss_fn(lambda x, t, c: forward(config, ParamVector(vals, params.layout), x, t, c)))

    return finite_diff_error(value, params, grad, h, indices)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 1e-4
    epsilon: float = 1e-8

    @classmethod
    def zeros(cls, n, **hyper):
        return cls(np.zeros(n), np.zeros(n), **hyper)

    def copy(self):
        return OptState(self.first_moment.copy(), self.second_moment.copy(), self.step_count,
                        self.lr, tuple(self.betas), self.weight_decay, self.epsilon)


def adamw_step(params, grads, state):
    """One AdamW update with decoupled weight decay; returns new objects."""
    g = grads.values if isinstance(grads, ParamVector) else np.asarray(grads, dtype=np.float64)
    if g.shape != params.values.shape or state.first_moment.shape != g.shape:
        raise ValueError("parameter, gradient and moment lengths differ")
    if not np.all(np.isfinite(g)):
        raise EvaluationError("non-finite gradient; parameters left untouched")
    b1, b2 = state.betas
    step = state.step_count + 1
    m = b1 * state.first_moment + (1 - b1) * g
    v = b2 * state.second_moment + (1 - b2) * g * g
    m_hat = m / (1 - b1 ** step)
    v_hat = v / (1 - b2 ** step)
    p = params.values
    new = p - state.lr * (m_hat / (np.sqrt(v_hat) + state.epsilon) + state.weight_decay * p)
    new_state = OptState(m, v, step, state.lr, tuple(state.betas), state.weight_decay, state.epsilon)
    return ParamVector(new, list(params.layout)), new_state


# ---------------------------------------------------------------------------
# checkpoint I/O

_MAGIC = b"SFGP"
_VERSION = 1


def save_checkpoint(path, config, params, role=None):
    """Write ``path`` (binary) and ``path.json`` (config sidecar)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        f.write(struct.pack("<I", len(params.layout)))
        for o, r, c in params.layout:
            f.write(struct.pack("<QII", o, r, c))
        f.write(struct.pack("<Q", len(params)))
        f.write(params.values.astype("<f8").tobytes())
    sidecar = {"net": config.to_dict()}
    if role is not None:
        sidecar["role"] = role
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path):
    """Return ``(NetConfig, ParamVector, role)``."""
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path}: bad magic {data[:4]!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    (n_entries,) = struct.unpack_from("<I", data, 8)
    pos = 12
    layout = []
    for _ in range(n_entries):
        layout.append(tuple(struct.unpack_from("<QII", data, pos)))
        pos += 16
    (n,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    values = np.frombuffer(data, dtype="<f8", count=n, offset=pos).astype(np.float64)
    meta = json.loads(Path(str(path) + ".json").read_text())
    config = NetConfig(**meta["net"])
    if [tuple(e) for e in config.layout()] != layout:
        raise ValueError(f"{path}: layout table does not match sidecar config")
    return config, ParamVector(values, layout), meta.get("role")
