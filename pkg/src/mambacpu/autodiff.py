"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tensor` wraps a numpy array plus gradient bookkeeping. Every
operation records its parents and the vector-Jacobian products needed to
push gradients back through it, so the graph is rebuilt on every forward
pass (define-by-run). Creation order gives a valid topological order;
:func:`backward` walks reachable nodes once, newest first.

The op set is exactly what the MaC forward pass needs: elementwise
arithmetic with numpy broadcasting, 2-D matmul, activations, row softmax,
causal depthwise convolution, row gather/concat, reductions, and the fused
selective-scan recurrence.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

__all__ = [
    "Tensor",
    "add",
    "backward",
    "causal_depthwise_conv",
    "concat",
    "div",
    "exp",
    "finite_diff_check",
    "gather_rows",
    "make_node",
    "matmul",
    "mean",
    "mul",
    "neg",
    "phi_zoh",
    "reshape",
    "selective_scan",
    "set_debug",
    "sigmoid",
    "silu",
    "softmax_rows",
    "softplus",
    "sqrt",
    "sub",
    "tsum",
    "transpose",
]

_ids = itertools.count()
_debug = False


def set_debug(on: bool) -> None:
    """Toggle debug checks (finite outputs after every op)."""
    global _debug
    _debug = bool(on)


def debug_enabled() -> bool:
    return _debug


class Tensor:
    """Dense float64 array participating in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjps", "_nid", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjps: tuple[Callable[[np.ndarray], np.ndarray] | None, ...] = ()
        self._nid = next(_ids)
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # operator sugar; non-Tensor operands are wrapped as constants
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(
    data: np.ndarray,
    parents: Sequence[Tensor],
    vjps: Sequence[Callable[[np.ndarray], np.ndarray] | None],
    op: str,
) -> Tensor:
    """Create a graph node. `vjps[i]` maps the output gradient to parent i's gradient."""
    if _debug and not np.all(np.isfinite(data)):
        raise ArithmeticError(f"non-finite values produced by op '{op}'")
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._vjps = tuple(vjps)
    out._op = op
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into `t.grad` for every requires_grad tensor reachable from `loss`.

    Gradients from multiple uses of the same tensor add; repeated backward
    calls also add (callers zero grads between steps).
    """
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    nodes = [loss]
    seen = {id(loss)}
    stack = [loss]
    while stack:
        t = stack.pop()
        for p in t._parents:
            if p.requires_grad and id(p) not in seen:
                seen.add(id(p))
                nodes.append(p)
                stack.append(p)
    nodes.sort(key=lambda t: t._nid, reverse=True)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in nodes:
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.grad is None:
            t.grad = g.copy()
        else:
            t.grad = t.grad + g
        for p, vjp in zip(t._parents, t._vjps):
            if vjp is None or not p.requires_grad:
                continue
            pg = vjp(g)
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` over axes that numpy broadcasting expanded, back to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic (numpy broadcasting rules)

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return make_node(
        a.data + b.data,
        (a, b),
        (lambda g: _unbroadcast(g, a.data.shape), lambda g: _unbroadcast(g, b.data.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return make_node(
        a.data - b.data,
        (a, b),
        (lambda g: _unbroadcast(g, a.data.shape), lambda g: _unbroadcast(-g, b.data.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return make_node(
        a.data * b.data,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.data, a.data.shape),
            lambda g: _unbroadcast(g * a.data, b.data.shape),
        ),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return make_node(
        a.data / b.data,
        (a, b),
        (
            lambda g: _unbroadcast(g / b.data, a.data.shape),
            lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        ),
        "div",
    )


def neg(a) -> Tensor:
    a = _wrap(a)
    return make_node(-a.data, (a,), (lambda g: -g,), "neg")


# ---------------------------------------------------------------------------
# linear algebra and shape ops

def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul requires (m,k) @ (k,n); got {a.data.shape} @ {b.data.shape}"
        )
    return make_node(
        a.data @ b.data,
        (a, b),
        (lambda g: g @ b.data.T, lambda g: a.data.T @ g),
        "matmul",
    )


def transpose(a) -> Tensor:
    a = _wrap(a)
    if a.data.ndim != 2:
        raise DimensionError(f"transpose requires a 2-D tensor, got shape {a.data.shape}")
    return make_node(a.data.T.copy(), (a,), (lambda g: g.T,), "transpose")


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    old = a.data.shape
    return make_node(a.data.reshape(shape), (a,), (lambda g: g.reshape(old),), "reshape")


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_wrap(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def slicer(i):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            return g[tuple(idx)]

        return vjp

    return make_node(data, tuple(parts), tuple(slicer(i) for i in range(len(parts))), "concat")


def gather_rows(a, indices) -> Tensor:
    """Select rows (axis 0) by integer index; duplicate indices accumulate on backward."""
    a = _wrap(a)
    idx = np.asarray(indices, dtype=np.intp)

    def vjp(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        return buf

    return make_node(a.data[idx], (a,), (vjp,), "gather_rows")


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    shape = a.data.shape

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, shape).copy()

    return make_node(a.data.sum(axis=axis, keepdims=keepdims), (a,), (vjp,), "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    shape = a.data.shape
    if axis is None:
        n = a.data.size
    else:
        n = shape[axis]

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g / n, shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg / n, shape).copy()

    return make_node(a.data.mean(axis=axis, keepdims=keepdims), (a,), (vjp,), "mean")


# ---------------------------------------------------------------------------
# nonlinearities

def exp(a) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)
    return make_node(out, (a,), (lambda g: g * out,), "exp")


def sqrt(a) -> Tensor:
    a = _wrap(a)
    out = np.sqrt(a.data)
    return make_node(out, (a,), (lambda g: g * 0.5 / out,), "sqrt")


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    # split by sign to avoid overflow in exp
    out = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                   np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
    return make_node(out, (a,), (lambda g: g * out * (1.0 - out),), "sigmoid")


def silu(a) -> Tensor:
    """x * sigmoid(x); gradient sigmoid(x) * (1 + x * (1 - sigmoid(x)))."""
    a = _wrap(a)
    s = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                 np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
    return make_node(a.data * s, (a,), (lambda g: g * s * (1.0 + a.data * (1.0 - s)),), "silu")


def softplus(a) -> Tensor:
    """log(1 + exp(x)), computed as max(x,0) + log1p(exp(-|x|)); gradient sigmoid(x)."""
    a = _wrap(a)
    out = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))
    s = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                 np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
    return make_node(out, (a,), (lambda g: g * s,), "softplus")


def softmax_rows(a) -> Tensor:
    """Row-wise softmax of a 2-D tensor, stabilized by subtracting the row max."""
    a = _wrap(a)
    if a.data.ndim != 2:
        raise DimensionError(f"softmax_rows requires a 2-D tensor, got shape {a.data.shape}")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return y * (g - (g * y).sum(axis=1, keepdims=True))

    return make_node(y, (a,), (vjp,), "softmax_rows")


def phi_zoh(z) -> Tensor:
    """(exp(z) - 1) / z elementwise, with a series branch near 0.

    This is the input-discretization factor of the zero-order hold:
    b_bar = delta * phi_zoh(delta * a) * b. Below |z| < 1e-5 the direct
    quotient loses precision to cancellation, so value and derivative
    switch to their Taylor series (error O(z^3), far below 1e-12).
    """
    z = _wrap(z)
    x = z.data
    small = np.abs(x) < 1e-5
    xs = np.where(small, 1.0, x)  # placeholder keeps the quotient well-defined
    out = np.where(small, 1.0 + x / 2.0 + x * x / 6.0, np.expm1(xs) / xs)

    def vjp(g):
        # d/dz[(e^z - 1)/z] = (e^z (z - 1) + 1) / z^2
        d = np.where(
            small,
            0.5 + x / 3.0 + x * x / 8.0,
            (np.exp(xs) * (xs - 1.0) + 1.0) / (xs * xs),
        )
        return g * d

    return make_node(out, (z,), (vjp,), "phi_zoh")


# ---------------------------------------------------------------------------
# structured ops

def causal_depthwise_conv(x, kernel) -> Tensor:
    """Depthwise causal convolution over a (T, D) sequence with (W, D) taps.

    y[t, d] = sum_w kernel[w, d] * x[t - (W-1) + w, d], out-of-range x = 0,
    so position t only ever sees positions <= t and tap w = W-1 is "now".
    """
    x, kernel = _wrap(x), _wrap(kernel)
    if x.data.ndim != 2 or kernel.data.ndim != 2 or x.data.shape[1] != kernel.data.shape[1]:
        raise DimensionError(
            f"conv requires x (T,D) and kernel (W,D) with matching D; got {x.data.shape}, {kernel.data.shape}"
        )
    T, D = x.data.shape
    W = kernel.data.shape[0]
    xp = np.vstack([np.zeros((W - 1, D)), x.data])
    y = np.zeros((T, D))
    for w in range(W):
        y += kernel.data[w] * xp[w : w + T]

    def vjp_x(g):
        # dL/dx[s] = sum_w kernel[w] * g[s + (W-1) - w], g out-of-range = 0
        gp = np.vstack([g, np.zeros((W - 1, D))])
        dx = np.zeros((T, D))
        for w in range(W):
            dx += kernel.data[w] * gp[W - 1 - w : W - 1 - w + T]
        return dx

    def vjp_k(g):
        dk = np.zeros((W, D))
        for w in range(W):
            dk[w] = (g * xp[w : w + T]).sum(axis=0)
        return dk

    return make_node(y, (x, kernel), (vjp_x, vjp_k), "causal_depthwise_conv")


def selective_scan(a_bar, b_bar, c, x) -> Tensor:
    """Run the input-dependent state recurrence and readout in one fused op.

    Shapes: a_bar, b_bar (T, D, N); c (T, N); x (T, D). Per step t,
    h[t] = a_bar[t] * h[t-1] + b_bar[t] * x[t, :, None] with h[-1] = 0 and
    y[t, d] = sum_n h[t, d, n] * c[t, n]. The backward pass replays the
    recurrence in reverse, carrying dL/dh.
    """
    a_bar, b_bar, c, x = _wrap(a_bar), _wrap(b_bar), _wrap(c), _wrap(x)
    T, D, N = a_bar.data.shape
    if b_bar.data.shape != (T, D, N) or c.data.shape != (T, N) or x.data.shape != (T, D):
        raise DimensionError(
            "selective_scan shape mismatch: "
            f"a_bar {a_bar.data.shape}, b_bar {b_bar.data.shape}, c {c.data.shape}, x {x.data.shape}"
        )
    hs = np.zeros((T, D, N))
    h = np.zeros((D, N))
    for t in range(T):
        h = a_bar.data[t] * h + b_bar.data[t] * x.data[t][:, None]
        hs[t] = h
    y = np.einsum("tdn,tn->td", hs, c.data)

    def vjps(g):
        da = np.zeros((T, D, N))
        db = np.zeros((T, D, N))
        dc = np.einsum("td,tdn->tn", g, hs)
        dx = np.zeros((T, D))
        gh = np.zeros((D, N))
        for t in range(T - 1, -1, -1):
            gh = gh + g[t][:, None] * c.data[t][None, :]
            h_prev = hs[t - 1] if t > 0 else np.zeros((D, N))
            da[t] = gh * h_prev
            db[t] = gh * x.data[t][:, None]
            dx[t] = (gh * b_bar.data[t]).sum(axis=1)
            gh = gh * a_bar.data[t]
        return da, db, dc, dx

    cache: dict[str, object] = {}

    def run(g):
        # all four vjps need the same reverse sweep; compute once per backward
        if cache.get("g") is not g:
            cache["g"] = g
            cache["val"] = vjps(g)
        return cache["val"]

    return make_node(
        y,
        (a_bar, b_bar, c, x),
        (
            lambda g: run(g)[0],
            lambda g: run(g)[1],
            lambda g: run(g)[2],
            lambda g: run(g)[3],
        ),
        "selective_scan",
    )


# ---------------------------------------------------------------------------
# gradient checking

def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-6) -> float:
    """Compare f's analytic gradient at x against central finite differences.

    Returns max over coordinates of |analytic - numeric| / max(|analytic|,
    |numeric|, 1e-12). `f` must return a scalar Tensor and may close over
    other tensors; only the gradient w.r.t. `x` is checked.
    """
    if not x.requires_grad:
        raise ContractError("finite_diff_check needs x.requires_grad=True")
    x.zero_grad()
    loss = f(x)
    backward(loss)
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x).data)
        flat[i] = orig - h
        fm = float(f(x).data)
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric) / denom))
