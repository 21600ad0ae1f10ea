"""Dense float64 arrays with reverse-mode differentiation.

Every operation records its parents and a closure that maps the output
gradient onto them. Calling :meth:`Tensor.backward` on a scalar walks the
recorded graph in reverse topological order. A graph lives for one training
step; nothing is retained across calls once the caller drops the output.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import linalg as sla
from scipy.special import erf

_SQRT_2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    pass


class DegenerateInputError(ValueError):
    """Raised when an operation is undefined at its input (e.g. zero norm)."""


class NumericalError(ArithmeticError):
    pass


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    # make ``ndarray <op> Tensor`` defer to the Tensor's reflected operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _make(cls, data, parents: tuple, backward) -> "Tensor":
        parents = tuple(p for p in parents if p.requires_grad)
        if not parents:
            return cls(data)
        return cls(data, True, parents, backward)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- backward ----------------------------------------------------------------

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
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
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- arithmetic ----------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    """Leaf tensor that accumulates a gradient."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


# -- elementwise -------------------------------------------------------------------


def _pick(tensors, thunks):
    """Gradients only for parents that kept ``requires_grad``; order preserved."""
    return [th() for t, th in zip(tensors, thunks) if t.requires_grad]


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._make(
        a.data + b.data,
        (a, b),
        lambda g: _pick((a, b), (lambda: _unbroadcast(g, a.shape),
                                 lambda: _unbroadcast(g, b.shape))),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._make(-a.data, (a,), lambda g: [-g])


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._make(
        a.data * b.data,
        (a, b),
        lambda g: _pick((a, b), (lambda: _unbroadcast(g * b.data, a.shape),
                                 lambda: _unbroadcast(g * a.data, b.shape))),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return Tensor._make(
        out,
        (a, b),
        lambda g: _pick((a, b), (lambda: _unbroadcast(g / b.data, a.shape),
                                 lambda: _unbroadcast(-g * out / b.data, b.shape))),
    )


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)

    def back(g):
        if exponent == 0:
            return [np.zeros_like(a.data)]
        if exponent < 1:
            safe = np.where(a.data == 0, 1.0, a.data)
            return [np.where(a.data == 0, 0.0, g * exponent * safe ** (exponent - 1))]
        return [g * exponent * a.data ** (exponent - 1)]

    return Tensor._make(a.data ** exponent, (a,), back)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: [g * out])


def log(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._make(np.log(a.data), (a,), lambda g: [g / a.data])


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return Tensor._make(out, (a,), lambda g: [g * 0.5 / out])


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return Tensor._make(out, (a,), lambda g: [g * (1.0 - out * out)])


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _np_sigmoid(a.data)
    return Tensor._make(out, (a,), lambda g: [g * out * (1.0 - out)])


def _np_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a) -> Tensor:
    """log(1 + e^x), evaluated without overflow."""
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return Tensor._make(out, (a,), lambda g: [g * _np_sigmoid(x)])


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor._make(np.where(mask, a.data, 0.0), (a,), lambda g: [g * mask])


def gelu(a) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT_2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return Tensor._make(x * cdf, (a,), lambda g: [g * (cdf + x * pdf)])


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; the gradient is zero where clamping is active."""
    a = as_tensor(a)
    mask = (a.data >= lo) & (a.data <= hi)
    return Tensor._make(np.clip(a.data, lo, hi), (a,), lambda g: [g * mask])


# -- reductions and shape ----------------------------------------------------------


def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)) if g.ndim == 0 else g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return Tensor._make(
        a.data.sum(axis=axis, keepdims=keepdims),
        (a,),
        lambda g: [np.array(_expand_reduced(g, shape, axis, keepdims))],
    )


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size // max(out.size, 1) if a.data.size else 1
    return Tensor._make(
        out,
        (a,),
        lambda g: [np.array(_expand_reduced(g, shape, axis, keepdims)) / count],
    )


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: [g.reshape(old)])


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor._make(a.data.transpose(axes), (a,), lambda g: [g.transpose(inv)])


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(p is None or p is Ellipsis or isinstance(p, (int, slice)) for p in parts)

    def back(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return [full]

    return Tensor._make(a.data[index], (a,), back)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        parts = np.split(g, splits, axis=axis)
        return [p for t, p in zip(ts, parts) if t.requires_grad]

    return Tensor._make(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), back)


# -- linear algebra --------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product with numpy's batching rules (leading dims broadcast)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != (b.shape[-2] if b.ndim > 1 else b.shape[0]):
        raise ShapeError(f"matmul: inner dimensions disagree, {a.shape} @ {b.shape}")
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul expects at least 2-D operands")
    if b.ndim == 2 and a.ndim > 2:
        # activations (..., P) times a weight matrix: one flat GEMM each way
        lead = a.shape[:-1]
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(lead + (b.shape[1],))

        def back_flat(g):
            g2 = g.reshape(-1, g.shape[-1])
            return _pick((a, b), (lambda: (g2 @ b.data.T).reshape(a.shape),
                                  lambda: a2.T @ g2))

        return Tensor._make(out, (a, b), back_flat)
    out = a.data @ b.data

    def back(g):
        return _pick((a, b), (
            lambda: _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape),
            lambda: _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape),
        ))

    return Tensor._make(out, (a, b), back)


def l2_norm(a, axis=-1, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    if np.any(n == 0):
        raise DegenerateInputError("l2_norm: zero vector has no gradient")
    out = n if keepdims else np.squeeze(n, axis=axis)
    return Tensor._make(out, (a,), lambda g: [(g if keepdims else np.expand_dims(g, axis)) * a.data / n])


def normalize(a, axis=-1) -> Tensor:
    """Scale to unit L2 norm along ``axis``. Zero vectors are rejected."""
    a = as_tensor(a)
    n = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    if np.any(n == 0) or not np.all(np.isfinite(n)):
        raise DegenerateInputError("normalize: zero-norm vector")
    u = a.data / n

    def back(g):
        return [(g - u * (g * u).sum(axis=axis, keepdims=True)) / n]

    return Tensor._make(u, (a,), back)


def cosine_sim(u, v) -> Tensor:
    """Cosine similarity along the last axis."""
    return tsum(mul(normalize(u), normalize(v)), axis=-1)


def cosine_matrix(a, b) -> Tensor:
    """Pairwise cosine similarities between rows of ``a`` (N x d) and ``b`` (K x d)."""
    return matmul(normalize(a), transpose(normalize(b)))


def solve_spd(a, b) -> Tensor:
    """Solve ``a @ x = b`` for symmetric positive definite ``a`` via Cholesky.

    Differentiable in ``b`` and in ``a`` (treated as symmetric).
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or b.shape[0] != a.shape[0]:
        raise ShapeError(f"solve_spd: incompatible shapes {a.shape}, {b.shape}")
    try:
        factor = sla.cho_factor(a.data, lower=True, check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericalError(
            f"solve_spd: matrix is not positive definite (cond={_cond(a.data):.3e}); "
            "add a ridge term") from exc
    x = sla.cho_solve(factor, b.data)

    def back(g):
        gb = sla.cho_solve(factor, g)
        return _pick((a, b), (lambda: -gb @ x.T if x.ndim == 2 else -np.outer(gb, x),
                              lambda: gb))

    return Tensor._make(x, (a, b), back)


def _cond(a: np.ndarray) -> float:
    try:
        return float(np.linalg.cond(a))
    except np.linalg.LinAlgError:
        return float("inf")


# -- composite layers ----------------------------------------------------------


def softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return [out * (g - (g * out).sum(axis=axis, keepdims=True))]

    return Tensor._make(out, (a,), back)


def logsumexp(a, axis=-1, weights=None) -> Tensor:
    """log sum_j w_j exp(a_j) along ``axis``; entries with zero weight are ignored.

    ``weights`` is a constant non-negative array broadcastable to ``a``.
    """
    a = as_tensor(a)
    x = a.data
    if weights is None:
        m = x.max(axis=axis, keepdims=True)
        e = np.exp(x - m)
    else:
        w = np.broadcast_to(np.asarray(weights, dtype=np.float64), x.shape)
        active = w > 0
        m = np.where(active, x, -np.inf).max(axis=axis, keepdims=True)
        if not np.all(np.isfinite(m)):
            raise DegenerateInputError("logsumexp: a row has no positive weight")
        e = np.where(active, w * np.exp(np.where(active, x - m, 0.0)), 0.0)
    s = e.sum(axis=axis, keepdims=True)
    out = np.squeeze(np.log(s) + m, axis=axis)

    def back(g):
        return [np.expand_dims(g, axis) * e / s]

    return Tensor._make(out, (a,), back)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def back(g):
        def gx():
            gh = g * gain.data
            return inv * (gh - gh.mean(axis=-1, keepdims=True)
                          - xhat * (gh * xhat).mean(axis=-1, keepdims=True))

        return _pick((x, gain, bias), (
            gx,
            lambda: _unbroadcast(g * xhat, gain.shape),
            lambda: _unbroadcast(g, bias.shape),
        ))

    return Tensor._make(out, (x, gain, bias), back)


# -- gradient checking -----------------------------------------------------------


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    analytic: np.ndarray = field(repr=False)
    numeric: np.ndarray = field(repr=False)
    worst_index: tuple = ()


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5, tol: float = 1e-5) -> GradCheckReport:
    """Compare the reverse-mode gradient of scalar ``f`` at ``x`` with central differences.

    The relative error of each coordinate is
    ``|a - n| / max(|a|, |n|, 1e-8)``; the check passes when the largest one
    is at most ``tol``.
    """
    x0 = np.array(as_tensor(x).data, dtype=np.float64)
    leaf = parameter(x0)
    out = f(leaf)
    if out.data.size != 1 or not np.isfinite(out.data).all():
        raise NumericalError("grad_check: f must return a finite scalar")
    out.backward()
    analytic = np.zeros_like(x0) if leaf.grad is None else leaf.grad.reshape(x0.shape)

    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    for i in range(x0.size):
        xp = x0.copy().reshape(-1)
        xm = x0.copy().reshape(-1)
        xp[i] += eps
        xm[i] -= eps
        step = xp[i] - xm[i]
        fp = f(Tensor(xp.reshape(x0.shape))).item()
        fm = f(Tensor(xm.reshape(x0.shape))).item()
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"grad_check: f is not finite near coordinate {i}")
        flat[i] = (fp - fm) / step

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    worst = np.unravel_index(int(np.argmax(rel)), rel.shape) if rel.size else ()
    max_rel = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(max_rel <= tol, max_rel, analytic, numeric, tuple(int(i) for i in worst))
