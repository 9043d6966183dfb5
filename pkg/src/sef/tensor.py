"""Dense float64 tensors with graph-based reverse-mode differentiation.

Every operation returns a new :class:`Tensor` that remembers its parents and
a closure mapping the upstream gradient to one gradient per parent.
:func:`backward` walks the graph in reverse topological order. Leaf tensors
created with ``requires_grad=True`` accumulate into ``.grad``; intermediate
gradients live only for the duration of one backward pass.
"""

from dataclasses import dataclass, field
from math import prod

import numpy as np

from . import kernels

LOG_FLOOR = 1e-12
NORM_FLOOR = 1e-12


class ShapeError(ValueError):
    pass


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op=""):
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return not self._parents

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}{flag}, op={self.op or 'leaf'!r})"

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def tensor_new(shape, values, requires_grad=False):
    """Build a tensor of ``shape`` from a flat, row-major list of values."""
    shape = tuple(int(d) for d in shape)
    if any(d < 1 for d in shape):
        raise ShapeError(f"all dimensions must be >= 1, got {list(shape)}")
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    expected = prod(shape)
    if values.size != expected:
        raise ShapeError(f"length {values.size} ≠ product {expected}")
    return Tensor(values.reshape(shape).copy(), requires_grad=requires_grad)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data, parents, backward_fn, op):
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward_fn, op)
    return Tensor(data, op=op)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {list(a.shape)} and {list(b.shape)}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")

    def bw(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data / b.data, (a, b), bw, "div")


def scale(a, c):
    """Multiply by a python scalar (no graph edge for the scalar)."""
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(x):
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def exp(x):
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x):
    """Natural log with the argument clamped below at ``LOG_FLOOR``."""
    clamped = np.maximum(x.data, LOG_FLOOR)
    live = x.data > LOG_FLOOR

    def bw(g):
        return (np.where(live, g / clamped, 0.0),)

    return _make(np.log(clamped), (x,), bw, "log")


def clamp_min(x, floor):
    live = x.data > floor
    return _make(np.maximum(x.data, floor), (x,), lambda g: (g * live,), "clamp_min")


# ---------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _expand(g, shape, axes, keepdims):
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def tsum(x, axis=None, keepdims=False):
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)
    return _make(out, (x,), lambda g: (_expand(g, x.shape, axes, keepdims).copy(),), "sum")


def mean(x, axis=None, keepdims=False):
    axes = _norm_axis(axis, x.ndim)
    count = prod(x.shape[a] for a in axes)
    out = x.data.mean(axis=axes, keepdims=keepdims)
    return _make(out, (x,), lambda g: (_expand(g, x.shape, axes, keepdims) / count,), "mean")


def tmax(x, axis, keepdims=False):
    """Max along one axis; the gradient goes to the first maximal entry."""
    axis = axis % x.ndim
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, idx, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        grad = np.zeros_like(x.data)
        np.put_along_axis(grad, idx, g, axis=axis)
        return (grad,)

    return _make(out, (x,), bw, "max")


def l2norm(x, axis, keepdims=False):
    axis = axis % x.ndim
    out = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g * x.data / safe, 0.0),)

    return _make(out if keepdims else np.squeeze(out, axis), (x,), bw, "l2norm")


def softmax(x):
    """Softmax over the last axis (row max subtracted first)."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, (x,), bw, "softmax")


def log_softmax(x):
    z = x.data - x.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    s = np.exp(out)

    def bw(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax")


# ---------------------------------------------------------------- linear algebra / layout

def matmul(a, b):
    """Matrix product with numpy's batching rules (2-D or batched N-D)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >= 2-D operands, got {list(a.shape)} and {list(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {list(a.shape)} @ {list(b.shape)}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: cannot batch {list(a.shape)} @ {list(b.shape)}") from None

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw, "matmul")


def reshape(x, shape):
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {list(x.shape)} to {list(shape)}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "transpose")


def getitem(x, index):
    out = x.data[index]

    def bw(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, index, g)
        return (grad,)

    return _make(np.array(out), (x,), bw, "getitem")


# ---------------------------------------------------------------- convolution / pooling

def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation of ``x[N,Cin,H,W]`` with ``weight[Cout,Cin,kh,kw]``."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {list(x.shape)}, {list(weight.shape)}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, weight expects {wcin}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"conv2d: padded input {h}x{w} (+{padding}) smaller than kernel {kh}x{kw}")
    ho = kernels.conv_output_size(h, kh, stride, padding)
    wo = kernels.conv_output_size(w, kw, stride, padding)
    cols = kernels.im2col(x.data, kh, kw, stride, padding)
    wmat = weight.data.reshape(cout, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, cout, ho, wo)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(n, cout, ho * wo)
        gflat = g2.transpose(1, 0, 2).reshape(cout, -1)
        cflat = cols.transpose(1, 0, 2).reshape(cols.shape[1], -1)
        gw = np.matmul(gflat, cflat.T).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gx = kernels.col2im(np.matmul(wmat.T, g2), x.shape, kh, kw, stride, padding)
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=(0, 2))

    return _make(out, parents, bw, "conv2d")


def maxpool2d(x, k=2):
    if x.shape[2] < k or x.shape[3] < k:
        raise ShapeError(f"maxpool2d: spatial size {x.shape[2:]} smaller than window {k}")
    out, idx = kernels.maxpool_forward(x.data, k)
    return _make(out, (x,), lambda g: (kernels.maxpool_backward(g, idx, x.shape, k),), "maxpool2d")


# ---------------------------------------------------------------- reverse pass

def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
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


def backward(loss):
    """Accumulate d(loss)/d(leaf) into every trainable leaf's ``.grad``."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    seed = np.ones_like(loss.data)
    if not loss.requires_grad:
        loss.grad = seed
        return
    grads = {id(loss): seed}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if node is loss:
            node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------- gradient checking

@dataclass
class GradCheckReport:
    errors: dict
    h: float
    tol: float
    worst: dict = field(default_factory=dict)

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self):
        return self.max_error < self.tol

    def summary(self):
        lines = [f"h={self.h:g} tol={self.tol:g} max_rel_err={self.max_error:.3e} "
                 f"{'PASS' if self.passed else 'FAIL'}"]
        for name, err in self.errors.items():
            lines.append(f"  {name}: {err:.3e}")
        return "\n".join(lines)


def _value(out):
    return out.item() if isinstance(out, Tensor) else float(out)


def finite_diff_check(f, params, h=1e-5, tol=1e-4):
    """Compare analytic gradients with central differences.

    ``f`` is a zero-argument callable that rebuilds the scalar loss from the
    current parameter values. ``params`` is a dict of name -> Tensor (or a
    list, named by position). The relative error per entry is
    ``|a - n| / max(1, |a|, |n|)``.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    if not isinstance(params, dict):
        params = {f"param{i}": p for i, p in enumerate(params)}
    for p in params.values():
        p.grad = None
    loss = f()
    if isinstance(loss, Tensor) and loss.requires_grad:
        backward(loss)
    errors, worst = {}, {}
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        numeric = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = _value(f())
            flat[i] = orig - h
            fm = _value(f())
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"non-finite objective perturbing {name}[{i}]")
            numeric[i] = (fp - fm) / (2 * h)
        a = analytic.reshape(-1)
        rel = np.abs(a - numeric) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(numeric)))
        errors[name] = float(rel.max()) if rel.size else 0.0
        worst[name] = int(rel.argmax()) if rel.size else 0
    return GradCheckReport(errors, h, tol, worst)
