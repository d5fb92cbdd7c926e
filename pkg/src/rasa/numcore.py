"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every trainable computation in the package is built from the primitives in
this module. A primitive computes its value eagerly with numpy and, when a
:class:`Tape` is active and any input requires a gradient, appends a record
holding a closure that maps the output gradient to input gradients.

    >>> w = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_all(matmul(w, Tensor([[3.0], [4.0]])))
    >>> backward(tape, loss)
    >>> w.grad.tolist()
    [[3.0, 4.0]]
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "ShapeError", "NonFiniteError", "ContractError",
    "EmptyKeyError", "backward", "apply", "matmul", "add", "sub", "mul",
    "scale", "neg", "transpose", "sum_all", "mean_rows", "softmax_rows",
    "layer_norm", "linear", "gelu", "sigmoid", "log_sum_exp", "exp", "log",
    "concat_rows", "stack_scalars", "take_rows", "attention",
    "multi_head_attention", "AdamState", "adam_init", "adam_step",
    "glorot_uniform",
]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    """A forward value contained NaN or Inf. ``op`` names the primitive."""

    def __init__(self, op: str):
        super().__init__(f"non-finite value produced by op '{op}'")
        self.op = op


class ContractError(ValueError):
    pass


class EmptyKeyError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    op: str
    out: Tensor
    inputs: tuple
    backward_fn: Callable


class Tape:
    """Ordered log of executed primitives, used as a context manager.

    Tapes nest; only the innermost active tape records.
    """

    _local = threading.local()

    def __init__(self):
        self.records: list[_Record] = []

    @classmethod
    def _stack(cls) -> list:
        if not hasattr(cls._local, "stack"):
            cls._local.stack = []
        return cls._local.stack

    def __enter__(self) -> "Tape":
        Tape._stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack().pop()

    def __len__(self) -> int:
        return len(self.records)

    @staticmethod
    def active() -> Optional["Tape"]:
        stack = Tape._stack()
        return stack[-1] if stack else None


def apply(op: str, value: np.ndarray, inputs: Sequence[Tensor],
          backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    """Wrap a computed ``value`` as the output of primitive ``op``.

    ``backward_fn`` receives the output gradient and returns one gradient (or
    None) per input. This is the extension point for custom differentiable
    functions defined outside this module.
    """
    value = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(op)
    needs = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(value)
    out.requires_grad = needs
    out.grad = None
    tape = Tape.active()
    if needs and tape is not None:
        tape.records.append(_Record(op, out, tuple(inputs), backward_fn))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    produced = {id(r.out) for r in tape.records}
    if id(loss) not in produced:
        raise ContractError("loss was not produced under this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        in_grads = rec.backward_fn(g)
        for inp, gi in zip(rec.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.asarray(gi, dtype=np.float64)
            if id(inp) not in produced:
                leaves[key] = inp
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
        leaf.grad += g.reshape(leaf.data.shape)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_2d(op: str, *ts: Tensor) -> None:
    for t in ts:
        if t.ndim != 2:
            raise ShapeError(f"{op} expects 2-D tensors, got shape {t.shape}")


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        value = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} and {b.shape}") from None
    return apply("add", value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        value = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: cannot broadcast {a.shape} and {b.shape}") from None
    return apply("sub", value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        value = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.shape} and {b.shape}") from None
    return apply("mul", value, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return apply("scale", x.data * c, (x,), lambda g: (g * c,))


def neg(x: Tensor) -> Tensor:
    return apply("neg", -x.data, (x,), lambda g: (-g,))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return apply("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return apply("exp", e, (x,), lambda g: (g * e,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NonFiniteError("log")
    return apply("log", np.log(x.data), (x,), lambda g: (g / x.data,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    v = x.data
    u = _GELU_C * (v + 0.044715 * v ** 3)
    th = np.tanh(u)
    value = 0.5 * v * (1.0 + th)

    def grad(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * v ** 2)
        return (g * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th ** 2) * du),)

    return apply("gelu", value, (x,), grad)


# ---------------------------------------------------------------- reductions

def sum_all(x: Tensor) -> Tensor:
    return apply("sum", np.array(x.data.sum()), (x,),
                 lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_rows(x: Tensor) -> Tensor:
    """Mean over rows: (n, d) -> (1, d)."""
    _check_2d("mean_rows", x)
    n = x.shape[0]
    return apply("mean_rows", x.data.mean(axis=0, keepdims=True), (x,),
                 lambda g: (np.broadcast_to(g / n, x.shape).copy(),))


def log_sum_exp(x: Tensor) -> Tensor:
    """log(sum(exp(x))) over all entries, stabilised by the maximum."""
    m = x.data.max()
    e = np.exp(x.data - m)
    s = e.sum()
    value = np.array(m + math.log(s))
    return apply("log_sum_exp", value, (x,), lambda g: (g * e / s,))


# ---------------------------------------------------------------- matrices

def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_2d("matmul", a, b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    return apply("matmul", a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(x: Tensor) -> Tensor:
    _check_2d("transpose", x)
    return apply("transpose", x.data.T, (x,), lambda g: (g.T,))


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Row-wise affine map ``x @ w + b`` with ``w`` of shape (d_in, d_out)."""
    _check_2d("linear", x, w)
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    value = x.data @ w.data
    if b is None:
        return apply("linear", value, (x, w), lambda g: (g @ w.data.T, x.data.T @ g))
    if b.data.size != w.shape[1]:
        raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    value = value + b.data.reshape(1, -1)
    return apply("linear", value, (x, w, b),
                 lambda g: (g @ w.data.T, x.data.T @ g, g.sum(axis=0).reshape(b.shape)))


def softmax_rows(x: Tensor) -> Tensor:
    _check_2d("softmax_rows", x)
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def grad(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return apply("softmax_rows", p, (x,), grad)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    _check_2d("layer_norm", x)
    d = x.shape[1]
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc ** 2).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv
    gam = gamma.data.reshape(1, d)
    value = xhat * gam + beta.data.reshape(1, d)

    def grad(g):
        dxhat = g * gam
        dx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        return (dx, (g * xhat).sum(axis=0).reshape(gamma.shape),
                g.sum(axis=0).reshape(beta.shape))

    return apply("layer_norm", value, (x, gamma, beta), grad)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_rows of nothing")
    _check_2d("concat_rows", *parts)
    widths = {p.shape[1] for p in parts}
    if len(widths) != 1:
        raise ShapeError(f"concat_rows: widths differ {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])
    value = np.concatenate([p.data for p in parts], axis=0)
    return apply("concat_rows", value, tuple(parts),
                 lambda g: tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts))))


def stack_scalars(items: Sequence[Tensor]) -> Tensor:
    """Collect single-element tensors into a 1-D vector."""
    for t in items:
        if t.data.size != 1:
            raise ShapeError(f"stack_scalars: element of shape {t.shape}")
    value = np.array([t.data.reshape(()) for t in items], dtype=np.float64)
    return apply("stack_scalars", value, tuple(items),
                 lambda g: tuple(g[i].reshape(t.shape) for i, t in enumerate(items)))


def take_rows(x: Tensor, index) -> Tensor:
    _check_2d("take_rows", x)
    idx = np.asarray(index, dtype=np.intp)

    def grad(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return apply("take_rows", x.data[idx], (x,), grad)


# ---------------------------------------------------------------- attention

def attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int) -> Tensor:
    """Scaled dot-product attention over ``n_heads`` column groups.

    No projections and no positional terms: ``q`` (n_q, d), ``k`` and ``v``
    (n_k, d) are split into heads of width d // n_heads, and the head outputs
    are concatenated back to (n_q, d).
    """
    _check_2d("attention", q, k, v)
    n_q, d = q.shape
    n_k = k.shape[0]
    if n_k == 0:
        raise EmptyKeyError("attention needs at least one key row")
    if k.shape[1] != d or v.shape != k.shape:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape}")
    if d % n_heads:
        raise ShapeError(f"attention: width {d} not divisible by {n_heads} heads")
    dh = d // n_heads
    s = 1.0 / math.sqrt(dh)
    Q = q.data.reshape(n_q, n_heads, dh).transpose(1, 0, 2)
    K = k.data.reshape(n_k, n_heads, dh).transpose(1, 0, 2)
    V = v.data.reshape(n_k, n_heads, dh).transpose(1, 0, 2)
    S = (Q @ K.transpose(0, 2, 1)) * s
    S = S - S.max(axis=2, keepdims=True)
    E = np.exp(S)
    A = E / E.sum(axis=2, keepdims=True)
    O = A @ V
    value = O.transpose(1, 0, 2).reshape(n_q, d)

    def grad(g):
        dO = g.reshape(n_q, n_heads, dh).transpose(1, 0, 2)
        dV = A.transpose(0, 2, 1) @ dO
        dA = dO @ V.transpose(0, 2, 1)
        dS = A * (dA - (dA * A).sum(axis=2, keepdims=True)) * s
        dQ = dS @ K
        dK = dS.transpose(0, 2, 1) @ Q
        back = lambda t, n: t.transpose(1, 0, 2).reshape(n, d)
        return back(dQ, n_q), back(dK, n_k), back(dV, n_k)

    return apply("attention", value, (q, k, v), grad)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, params: dict,
                         n_heads: int) -> Tensor:
    """Projected multi-head attention.

    ``params`` holds ``Wq, bq, Wk, bk, Wv, bv, Wo, bo``.
    """
    if k.shape[0] == 0:
        raise EmptyKeyError("multi_head_attention needs at least one key row")
    qp = linear(q, params["Wq"], params["bq"])
    kp = linear(k, params["Wk"], params["bk"])
    vp = linear(v, params["Wv"], params["bv"])
    return linear(attention(qp, kp, vp, n_heads), params["Wo"], params["bo"])


# ---------------------------------------------------------------- init / optim

def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: Sequence[Tensor], beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    return AdamState(m=[np.zeros_like(p.data) for p in params],
                     v=[np.zeros_like(p.data) for p in params],
                     beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState,
              lr: float) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    if not (len(params) == len(grads) == len(state.m)):
        raise ShapeError("adam_step: parameter, gradient and state counts differ")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != np.shape(g) or p.shape != m.shape:
            raise ShapeError(f"adam_step: shapes {p.shape}, {np.shape(g)}, {m.shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
