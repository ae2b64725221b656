"""Dense tensors over numpy with a small tape-based reverse-mode engine.

A :class:`Tensor` is an immutable wrapper around an ``np.ndarray``.  When at
least one input of an op is tracked on a :class:`Tape`, the op records a node
holding a vector-Jacobian closure; :func:`backward` walks the tape in reverse
creation order (which is a reverse topological order) and accumulates
gradients.

Leading batch dimensions are supported wherever the trailing dimensions make
the op well defined (``matmul`` of ``[..., m, k] @ [k, n]``, row ops on
``[..., n, c]``).  Binary elementwise ops follow numpy broadcasting and reduce
gradients back to the operand shape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError

_SQRT_2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass
class _Node:
    op: str
    parents: tuple
    vjp: Optional[Callable]
    shape: tuple


@dataclass
class Tape:
    """Append-only record of tracked ops.  Single writer per forward/backward."""

    nodes: list = field(default_factory=list)

    def _push(self, op, parents, vjp, shape) -> int:
        self.nodes.append(_Node(op, parents, vjp, shape))
        return len(self.nodes) - 1

    def watch(self, value, dtype=None) -> "Tensor":
        """Register ``value`` as a leaf whose gradient will be reported."""
        data = value.data if isinstance(value, Tensor) else value
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        arr.setflags(write=False)
        node = self._push("leaf", (), None, arr.shape)
        return Tensor(arr, tape=self, node=node)

    def leaves(self) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if n.op == "leaf"]


class Tensor:
    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: Optional[Tape] = None, node: Optional[int] = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if arr.flags.writeable:
            arr = arr.view()
            arr.setflags(write=False)
        self.data = arr
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = f", node={self.node}" if self.tracked else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return swap_last(self)


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _tape_of(*xs: Tensor) -> Optional[Tape]:
    tape = None
    for x in xs:
        if x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise ContractError("tensors tracked on different tapes")
            tape = x.tape
    return tape


def _record(op: str, out: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap ``out`` and, if any input is tracked, push a node.

    ``vjp(g)`` must return one gradient (or None) per input.
    """
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(out)
    parents = tuple(x.node if x.tape is not None else None for x in inputs)
    node = tape._push(op, parents, vjp, out.shape)
    return Tensor(out, tape=tape, node=node)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    sa, sb = a.shape, b.shape
    return _record("add", out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    sa, sb = a.shape, b.shape
    return _record("sub", out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad * bd
    return _record(
        "mul", out, (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _record(
        "div", out, (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)),
    )


def scale(x: Tensor, c: float) -> Tensor:
    out = x.data * x.data.dtype.type(c)
    return _record("scale", out, (x,), lambda g: (g * c,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _record("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _record("log", np.log(xd), (x,), lambda g: (g / xd,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _record("sqrt", out, (x,), lambda g: (g * 0.5 / out,))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the erf form of the normal CDF."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT_2))
    out = (xd * cdf).astype(xd.dtype, copy=False)
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
    return _record("gelu", out, (x,), lambda g: ((g * (cdf + xd * pdf)).astype(xd.dtype, copy=False),))


# ---------------------------------------------------------------- reductions


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", out, (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def norm_lastdim(x: Tensor) -> Tensor:
    """Euclidean norm over the last axis; subgradient 0 at the origin."""
    xd = x.data
    n = np.sqrt((xd * xd).sum(axis=-1))

    def vjp(g):
        safe = np.where(n > 0, n, 1.0)
        return (g[..., None] * np.where(n[..., None] > 0, xd / safe[..., None], 0.0),)

    return _record("norm", n, (x,), vjp)


def logsumexp_lastdim(x: Tensor) -> Tensor:
    xd = x.data
    m = xd.max(axis=-1, keepdims=True)
    e = np.exp(xd - m)
    s = e.sum(axis=-1, keepdims=True)
    out = (np.log(s) + m)[..., 0]
    return _record("logsumexp", out, (x,), lambda g: (g[..., None] * e / s,))


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    out = x.data.reshape(shape)
    return _record("reshape", out, (x,), lambda g: (g.reshape(src),))


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(a % x.ndim for a in axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _record("permute", out, (x,), lambda g: (g.transpose(inv),))


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(x, axes)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    axis = axis % xs[0].ndim
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([x.data for x in xs], axis=axis)

    def vjp(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs))
        )

    return _record("concat", out, tuple(xs), vjp)


def slice_axis(x: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    axis = axis % x.ndim
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = np.ascontiguousarray(x.data[idx])
    shape, dtype = x.shape, x.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return _record("slice", out, (x,), vjp)


def take(x: Tensor, index, axis: int) -> Tensor:
    """Gather entries along ``axis``; repeated indices accumulate in backward."""
    axis = axis % x.ndim
    index = np.asarray(index, dtype=np.intp)
    out = np.take(x.data, index, axis=axis)
    shape, dtype = x.shape, x.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, index, np.moveaxis(g, axis, 0))
        return (full,)

    return _record("take", out, (x,), vjp)


def scatter(x: Tensor, index, size: int, axis: int) -> Tensor:
    """Place slices of ``x`` at positions ``index`` of a zero tensor of extent ``size``.

    Positions not named by ``index`` stay exactly zero.
    """
    axis = axis % x.ndim
    index = np.asarray(index, dtype=np.intp)
    if index.shape != (x.shape[axis],):
        raise DimensionError(f"scatter index length {index.shape} vs extent {x.shape[axis]}")
    if index.size and (index.min() < 0 or index.max() >= size):
        raise DimensionError("scatter index out of range")
    shape = list(x.shape)
    shape[axis] = size
    out = np.zeros(shape, dtype=x.dtype)
    np.add.at(np.moveaxis(out, axis, 0), index, np.moveaxis(x.data, axis, 0))
    return _record("scatter", out, (x,), lambda g: (np.take(g, index, axis=axis),))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """``a @ b`` over the last two axes; leading axes broadcast numpy-style."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape) if a.tracked else None
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape) if b.tracked else None
        return ga, gb

    return _record("matmul", out, (a, b), vjp)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w + b``; a 1-D ``x`` is treated as a single row."""
    x = as_tensor(x)
    if x.ndim == 1:
        y = reshape(matmul(reshape(x, (1, x.shape[0])), w), (as_tensor(w).shape[-1],))
    else:
        y = matmul(x, w)
    return y if b is None else add(y, b)


def softmax_lastdim(x: Tensor) -> Tensor:
    if x.shape[-1] < 1:
        raise DimensionError("softmax over an empty axis")
    xd = x.data
    e = np.exp(xd - xd.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record("softmax", out, (x,), vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise DimensionError(f"layer_norm affine shape {gamma.shape}/{beta.shape} vs {x.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data
    n = xd.shape[-1]

    def vjp(g):
        gx = gg = gb = None
        if x.tracked:
            dxhat = g * gd
            gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True) / n)
        if gamma.tracked:
            gg = (g * xhat).reshape(-1, n).sum(axis=0)
        if beta.tracked:
            gb = g.reshape(-1, n).sum(axis=0)
        return gx, gg, gb

    return _record("layer_norm", out.astype(xd.dtype, copy=False), (x, gamma, beta), vjp)


def _window_index(n: int, kernel: int, stride: int) -> np.ndarray:
    n_out = (n - kernel) // stride + 1
    return np.arange(n_out)[:, None] * stride + np.arange(kernel)[None, :]


def conv1d_strided(x: Tensor, w: Tensor, b: Optional[Tensor] = None, *, stride: int) -> Tensor:
    """Valid (unpadded) 1-D convolution over the row axis.

    ``x`` is ``[..., n, c_in]``, ``w`` is ``[kernel, c_in, c_out]``; returns
    ``[..., (n - kernel) // stride + 1, c_out]``.
    """
    kernel, c_in, c_out = w.shape
    n = x.shape[-2]
    if stride < 1:
        raise ContractError("stride must be >= 1")
    if n < kernel:
        raise DimensionError(f"conv1d: {n} rows < kernel {kernel}")
    if x.shape[-1] != c_in:
        raise DimensionError(f"conv1d: input channels {x.shape[-1]} vs weight {c_in}")
    idx = _window_index(n, kernel, stride)
    n_out = idx.shape[0]
    xd, wd = x.data, w.data
    windows = xd[..., idx, :]  # [..., n_out, kernel, c_in]
    flat = windows.reshape(*xd.shape[:-2], n_out, kernel * c_in)
    wf = wd.reshape(kernel * c_in, c_out)
    out = flat @ wf
    if b is not None:
        out = out + b.data

    def vjp(g):
        gx = gw = gb = None
        if x.tracked:
            gflat = (g @ wf.T).reshape(*xd.shape[:-2], n_out, kernel, c_in)
            gx = np.zeros(xd.shape, dtype=xd.dtype)
            moved = np.moveaxis(gx, -2, 0)
            np.add.at(moved, idx.reshape(-1), np.moveaxis(
                gflat.reshape(*xd.shape[:-2], n_out * kernel, c_in), -2, 0))
        if w.tracked:
            gw = (flat.reshape(-1, kernel * c_in).T @ g.reshape(-1, c_out)).reshape(wd.shape)
        if b is not None and b.tracked:
            gb = g.reshape(-1, c_out).sum(axis=0)
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return _record("conv1d", out, inputs, vjp if b is not None else (lambda g: vjp(g)[:2]))


def l2_normalize(x: Tensor) -> Tensor:
    n = norm_lastdim(x)
    return div(x, reshape(n, n.shape + (1,)))


# ---------------------------------------------------------------- backward


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar ``loss``.

    Returns a mapping from every leaf node id on ``tape`` to its gradient.
    Leaves the loss does not depend on get zeros.
    """
    if loss.tape is not tape or loss.node is None:
        raise ContractError("loss is not tracked on this tape")
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.node: np.ones(loss.shape, dtype=loss.dtype)}
    for nid in range(loss.node, -1, -1):
        g = grads.get(nid)
        node = tape.nodes[nid]
        if g is None or node.vjp is None:
            continue
        parent_grads = node.vjp(g)
        for pid, pg in zip(node.parents, parent_grads):
            if pid is None or pg is None:
                continue
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
        # interior gradients are not needed once propagated
        del grads[nid]
    out = {}
    for nid in tape.leaves():
        shape = tape.nodes[nid].shape
        g = grads.get(nid)
        out[nid] = np.zeros(shape, dtype=loss.dtype) if g is None else np.asarray(g).reshape(shape)
    return out


def grad(fn: Callable[..., Tensor], *values) -> tuple[float, list[np.ndarray]]:
    """Evaluate ``fn`` on freshly watched copies of ``values``; return (loss, grads)."""
    tape = Tape()
    watched = [tape.watch(v) for v in values]
    loss = fn(*watched)
    g = backward(tape, loss)
    return float(loss.data), [g[t.node] for t in watched]


def grad_check(
    fn: Callable[[Tensor], Tensor],
    theta,
    step: float = 1e-5,
    *,
    samples: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Max over coordinates of ``|analytic - central| / max(1, |analytic|)``.

    The finite-difference step for coordinate i is ``step * max(1, |theta_i|)``.
    With ``samples`` set, only that many randomly chosen coordinates are probed.
    """
    if step <= 0:
        raise ContractError("step must be positive")
    theta = np.array(theta.data if isinstance(theta, Tensor) else theta, dtype=np.float64)
    _, (analytic,) = grad(fn, theta)
    flat = theta.reshape(-1)
    coords = np.arange(flat.size)
    if samples is not None and samples < flat.size:
        rng = rng if rng is not None else np.random.default_rng(0)
        coords = rng.choice(flat.size, size=samples, replace=False)
    worst = 0.0
    an = analytic.reshape(-1)
    for i in coords:
        h = step * max(1.0, abs(flat[i]))
        plus, minus = flat.copy(), flat.copy()
        plus[i] += h
        minus[i] -= h
        fp = float(fn(Tensor(plus.reshape(theta.shape))).data)
        fm = float(fn(Tensor(minus.reshape(theta.shape))).data)
        numeric = (fp - fm) / (2.0 * h)
        worst = max(worst, abs(an[i] - numeric) / max(1.0, abs(an[i])))
    return worst
