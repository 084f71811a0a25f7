"""A small dense tensor type with reverse-mode automatic differentiation.

Each operation on tensors that require gradients records its inputs and an
adjoint rule on the output. :func:`backward` walks that dynamic graph in
reverse topological order, returns the gradient of every leaf it reaches and
then releases the graph.

Broadcasting is limited to tensor-with-scalar and equal shapes; anything else
must go through :func:`broadcast_to` explicitly.
"""
from __future__ import annotations

import numpy as np

from . import kernels


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


_grad_enabled = [True]


class no_grad:
    """Context manager that suspends graph recording."""

    def __enter__(self):
        self._prev = _grad_enabled[0]
        _grad_enabled[0] = False

    def __exit__(self, *exc):
        _grad_enabled[0] = self._prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_released")

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._released = False

    @classmethod
    def _result(cls, data, parents, backward, op):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._released = False
        out._op = op
        if _grad_enabled[0] and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.data.shape[0]

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(self, o)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: add(neg(self), o)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(self, o)
    __truediv__ = lambda self, o: div(self, o)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, o: matmul(self, o)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} do not match")


def _first_index(mask):
    return tuple(int(i) for i in np.unravel_index(int(np.argmax(mask)), mask.shape))


# --- elementwise ---------------------------------------------------------

def add(a, b):
    if isinstance(b, Tensor):
        _check_same(a, b, "add")
        return Tensor._result(a.data + b.data, (a, b), lambda g: (g, g), "add")
    return Tensor._result(a.data + float(b), (a,), lambda g: (g,), "add")


def sub(a, b):
    if isinstance(b, Tensor):
        _check_same(a, b, "sub")
        return Tensor._result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")
    return Tensor._result(a.data - float(b), (a,), lambda g: (g,), "sub")


def mul(a, b):
    if isinstance(b, Tensor):
        _check_same(a, b, "mul")
        ad, bd = a.data, b.data
        return Tensor._result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")
    s = float(b)
    return Tensor._result(a.data * s, (a,), lambda g: (g * s,), "mul")


def div(a, b):
    if isinstance(b, Tensor):
        _check_same(a, b, "div")
        bd = b.data
        zero = bd == 0
        if zero.any():
            raise DomainError(f"div: zero divisor at index {_first_index(zero)}")
        out = a.data / bd
        return Tensor._result(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")
    s = float(b)
    if s == 0.0:
        raise DomainError("div: zero divisor at index ()")
    return Tensor._result(a.data / s, (a,), lambda g: (g / s,), "div")


def neg(a):
    return Tensor._result(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a):
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    bad = ~(a.data > 0)
    if bad.any():
        raise DomainError(f"log: nonpositive operand at index {_first_index(bad)}")
    ad = a.data
    return Tensor._result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def tanh(a):
    out = np.tanh(a.data)
    return Tensor._result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a):
    pos = a.data > 0
    return Tensor._result(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


def abs_(a):
    ad = a.data
    return Tensor._result(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def square(a):
    ad = a.data
    return Tensor._result(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def elementwise(op_kind, a, b=None):
    """Dispatch by name: add, sub, mul, div (binary) or exp, log, tanh, relu."""
    binary = {"add": add, "sub": sub, "mul": mul, "div": div}
    unary = {"exp": exp, "log": log, "tanh": tanh, "relu": relu}
    if op_kind in binary:
        return binary[op_kind](a, b)
    if op_kind in unary:
        return unary[op_kind](a)
    raise ValueError(f"unknown op_kind {op_kind!r}")


# --- reductions and shape ------------------------------------------------

def sum_(a, axis=None):
    shape = a.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return Tensor._result(np.asarray(a.data.sum(axis=axis)), (a,), bw, "sum")


def mean(a, axis=None):
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum_(a, axis), 1.0 / n)


def reshape(a, shape):
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    old = a.shape
    return Tensor._result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None):
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._result(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                          lambda g: (g.transpose(inv),), "transpose")


def broadcast_to(a, shape):
    """Explicit numpy-style broadcast; the adjoint sums over expanded axes."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: {a.shape} cannot broadcast to {shape}") from None
    src = a.shape
    lead = len(shape) - len(src)

    def bw(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return Tensor._result(out, (a,), bw, "broadcast")


def take(a, start, stop, axis=1):
    """Contiguous slice ``start:stop`` along ``axis``."""
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return Tensor._result(a.data[idx].copy(), (a,), bw, "take")


def concat(parts, axis=1):
    parts = list(parts)
    if not parts:
        raise ShapeError("concat: no parts")
    if len(parts) == 1:
        return parts[0]
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != len(ref) or any(p.shape[i] != ref[i] for i in range(len(ref)) if i != axis % len(ref)):
            raise ShapeError(f"concat: shapes {ref} and {p.shape} are incompatible on axis {axis}")
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return Tensor._result(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bw, "concat")


# --- linear algebra ------------------------------------------------------

def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions of {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return Tensor._result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def conv2d(x, kernels_, bias=None, stride=1, padding=0):
    """2-D cross-correlation of ``x`` ([C,H,W] or [B,C,H,W]) with zero padding."""
    single = x.ndim == 3
    if single:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or kernels_.ndim != 4:
        raise ShapeError(f"conv2d: bad ranks {x.shape}, {kernels_.shape}")
    B, C, H, W = x.shape
    Co, Ci, kh, kw = kernels_.shape
    if Ci != C:
        raise ShapeError(f"conv2d: input has {C} channels, kernels expect {Ci}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel size {kh}x{kw} must be odd")
    if stride < 1:
        raise ShapeError("conv2d: stride must be >= 1")
    if (H + 2 * padding - kh) % stride or (W + 2 * padding - kw) % stride:
        raise ShapeError(f"conv2d: output size for {H}x{W}, kernel {kh}x{kw}, "
                         f"stride {stride}, padding {padding} is not an integer")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else np.ascontiguousarray(x.data)
    cols = kernels.im2col(xp, kh, kw, stride)
    Ho, Wo = cols.shape[1], cols.shape[2]
    wmat = kernels_.data.reshape(Co, -1)
    out = cols.reshape(-1, wmat.shape[1]) @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, Co).transpose(0, 3, 1, 2))

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, Co)
        dw = (g2.T @ cols.reshape(-1, wmat.shape[1])).reshape(kernels_.shape)
        dcols = np.ascontiguousarray((g2 @ wmat).reshape(B, Ho, Wo, -1))
        dxp = kernels.col2im(dcols, C, Hp, Wp, kh, kw, stride)
        dx = dxp[:, :, padding:padding + H, padding:padding + W] if padding else dxp
        grads = (np.ascontiguousarray(dx), dw)
        if bias is not None:
            grads += (g2.sum(axis=0),)
        return grads

    parents = (x, kernels_) if bias is None else (x, kernels_, bias)
    res = Tensor._result(out, parents, bw, "conv2d")
    return reshape(res, res.shape[1:]) if single else res


# --- normalisation and pooling -------------------------------------------

def softmax(v, axis=-1):
    if np.isnan(v.data).any():
        raise DomainError("softmax: NaN input")
    z = v.data - v.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._result(out, (v,), bw, "softmax")


def log_softmax(v, axis=-1):
    if np.isnan(v.data).any():
        raise DomainError("log_softmax: NaN input")
    z = v.data - v.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return Tensor._result(out, (v,), bw, "log_softmax")


def global_avg_pool(x):
    """Per-channel spatial mean: [C,H,W] -> [C] or [B,C,H,W] -> [B,C]."""
    if x.ndim not in (3, 4):
        raise ShapeError(f"global_avg_pool: expects [C,H,W] or [B,C,H,W], got {x.shape}")
    return mean(x, axis=(-2, -1))


def _check_perm(perm, n):
    perm = np.asarray(perm)
    if perm.ndim != 1 or perm.shape[0] != n or not np.array_equal(np.sort(perm), np.arange(n)):
        raise ShapeError(f"gather_channels: {perm.tolist()} is not a bijection on 0..{n - 1}")
    return perm.astype(np.intp)


def gather_channels(x, perm):
    """Output channel ``i`` is input channel ``perm[i]``."""
    axis = x.ndim - 3
    perm = _check_perm(perm, x.shape[axis])
    inv = np.argsort(perm)
    return Tensor._result(np.take(x.data, perm, axis=axis), (x,),
                          lambda g: (np.take(g, inv, axis=axis),), "gather")


# --- graph traversal -----------------------------------------------------

def _topo(root):
    order, seen = [], set()
    stack = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss, params=None):
    """Gradients of a scalar ``loss`` with respect to every leaf on its graph.

    Returns a dict keyed by leaf tensor; leaves listed in ``params`` that the
    loss does not reach get zero gradients. The graph is released afterwards,
    so a second call on the same loss raises :class:`GraphError`.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if loss._released:
        raise GraphError("backward: graph already consumed; run a new forward pass")
    result = {}
    if loss.requires_grad:
        order = _topo(loss)
        pending = {id(loss): np.ones_like(loss.data)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                result[node] = g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None
                node._released = True
    loss._released = True
    if params is not None:
        result = {p: result.get(p, np.zeros_like(p.data)) for p in params}
    for p, g in result.items():
        p.grad = g
    return result
