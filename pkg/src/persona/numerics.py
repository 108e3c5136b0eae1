"""Dense float64 numerics with a small reverse-mode tape.

Matrices are plain ``numpy.ndarray`` objects (float64, C order).  A
:class:`Tensor` wraps an array and records how it was produced so that
``backward()`` can push gradients to the leaves.  Only the handful of ops
the models need are implemented.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def as_matrix(x) -> np.ndarray:
    # not ascontiguousarray: that promotes 0-d scalars to shape (1,)
    return np.asarray(x, dtype=np.float64, order="C")


def check_finite(x: np.ndarray, what: str = "value") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite entries in {what}")
    return x


def xavier_init(rows: int, cols: int, rng_seed: int | np.random.Generator) -> np.ndarray:
    """Uniform Glorot init in +-sqrt(6/(rows+cols))."""
    if rows < 1 or cols < 1:
        raise ShapeError(f"invalid shape ({rows}, {cols})")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    bound = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols))


# ---------------------------------------------------------------------------
# tape


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")
    __array_ufunc__ = None  # make ndarray <op> Tensor defer to the reflected method

    def __init__(self, value, requires_grad: bool = False, parents=(), backward=None):
        self.value = value if isinstance(value, np.ndarray) and value.dtype == np.float64 else as_matrix(value)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.value) if requires_grad and not parents else None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.value) if seed is None else seed}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


class ParamTensor(Tensor):
    """A named trainable leaf."""

    __slots__ = ("name",)

    def __init__(self, name: str, value, trainable: bool = True):
        Tensor.__init__(self, np.array(value, dtype=np.float64), requires_grad=trainable)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.name = name

    def __repr__(self):
        return f"ParamTensor({self.name!r}, shape={self.value.shape})"

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)


def zero_grads(params: Iterable[ParamTensor]) -> None:
    for p in params:
        p.zero_grad()


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value, inputs, backward) -> Tensor:
    if any(i.requires_grad for i in inputs):
        return Tensor(value, True, tuple(inputs), backward)
    return Tensor(value)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    return _node(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    return _node(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    return _node(a.value * b.value, (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))


def matmul(x, w) -> Tensor:
    """``x @ w`` for 2-D ``w``; per-row weights when ``w`` is (B, in, out)."""
    x, w = _t(x), _t(w)
    if w.value.ndim == 2:
        if x.shape[-1] != w.shape[0]:
            raise ShapeError(f"matmul {x.shape} @ {w.shape}")
        return _node(x.value @ w.value, (x, w),
                     lambda g: (g @ w.value.T, x.value.T @ g))
    if x.value.ndim != 2 or w.value.ndim != 3 or x.shape[0] != w.shape[0] or x.shape[1] != w.shape[1]:
        raise ShapeError(f"batched matmul {x.shape} @ {w.shape}")
    out = np.einsum("bi,bio->bo", x.value, w.value)
    return _node(out, (x, w), lambda g: (np.einsum("bo,bio->bi", g, w.value),
                                         x.value[:, :, None] * g[:, None, :]))


def relu(x) -> Tensor:
    x = _t(x)
    mask = x.value > 0
    return _node(x.value * mask, (x,), lambda g: (g * mask,))


def tanh(x) -> Tensor:
    x = _t(x)
    y = np.tanh(x.value)
    return _node(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x) -> Tensor:
    x = _t(x)
    y = 0.5 * (1.0 + np.tanh(0.5 * x.value))
    return _node(y, (x,), lambda g: (g * y * (1.0 - y),))


def clamp(x, bound: float) -> Tensor:
    """Clip to [-bound, bound]; gradient passes only where ``|x| < bound``."""
    if not bound > 0:
        raise ValueError("bound must be positive")
    x = _t(x)
    y = np.clip(x.value, -bound, bound)
    inside = np.abs(x.value) < bound
    return _node(y, (x,), lambda g: (g * inside,))


def clamp_with_subgradient(x, bound: float) -> np.ndarray:
    return clamp(x, bound).value


def reshape(x, shape) -> Tensor:
    x = _t(x)
    old = x.shape
    return _node(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def take_rows(table, ids: np.ndarray) -> Tensor:
    """Embedding lookup: ``table[ids]`` with scatter-add backward."""
    table = _t(table)
    ids = np.asarray(ids)

    def back(g):
        out = np.zeros_like(table.value)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)

    return _node(table.value[ids], (table,), back)


def masked_mean(x, mask: np.ndarray) -> Tensor:
    """Mean over axis 1 of (B, L, D) using a (B, L) 0/1 mask."""
    x = _t(x)
    counts = mask.sum(axis=1, keepdims=True)
    w = (mask / counts)[:, :, None]
    return _node((x.value * w).sum(axis=1), (x,), lambda g: (g[:, None, :] * w,))


def select_step(x, t: int) -> Tensor:
    """``x[:, t, :]`` of a (B, L, D) tensor."""
    x = _t(x)

    def back(g):
        out = np.zeros_like(x.value)
        out[:, t, :] = g
        return (out,)

    return _node(x.value[:, t, :], (x,), back)


def rowdot(x, cands) -> Tensor:
    """Scores (B, C) = <x[b], cands[b, c]> for x (B, D), cands (B, C, D)."""
    x, cands = _t(x), _t(cands)
    out = np.einsum("bd,bcd->bc", x.value, cands.value)
    return _node(out, (x, cands), lambda g: (np.einsum("bc,bcd->bd", g, cands.value),
                                             g[:, :, None] * x.value[:, None, :]))


def softmax_xent(logits, targets: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of (B, C) logits against integer targets."""
    logits = _t(logits)
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(len(targets))
    loss = -logp[rows, targets].mean()

    def back(g):
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        return (g * p / len(targets),)

    return _node(np.asarray(loss), (logits,), back)


def total(x) -> Tensor:
    x = _t(x)
    return _node(np.asarray(x.value.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def square(x) -> Tensor:
    return mul(x, x)


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 1e-3
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")


def optimizer_step(state: OptimizerState, params: Sequence[ParamTensor]) -> Sequence[ParamTensor]:
    """In-place update of ``params`` from their ``grad``; grads are left as is."""
    for p in params:
        if p.grad is None or p.grad.shape != p.value.shape:
            raise ShapeError(f"grad/value shape mismatch for {p.name}")
    state.step_count += 1
    lr = state.learning_rate
    if state.kind == "sgd":
        for p in params:
            p.value -= lr * p.grad
        return params
    t = state.step_count
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    for p in params:
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.value)
            state.v[p.name] = np.zeros_like(p.value)
        v = state.v[p.name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * p.grad
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * p.grad * p.grad
        p.value -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    return params


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(fn: Callable[[], Tensor], params: Sequence[ParamTensor], epsilon: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` rebuilds the graph from the current parameter values and returns a
    scalar tensor.  Relative error is ``|a - n| / max(1, |a|)``.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-7, 1e-3]")
    zero_grads(params)
    out = fn()
    check_finite(out.value, "loss")
    out.backward()
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            hi, lo = orig + epsilon, orig - epsilon
            flat[i] = hi
            up = float(fn().value)
            flat[i] = lo
            down = float(fn().value)
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError(f"non-finite loss while perturbing {p.name}")
            numeric = (up - down) / (hi - lo)  # the step actually taken, after rounding
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    zero_grads(params)
    return worst
