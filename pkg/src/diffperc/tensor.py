"""Dense float32 N-d arrays with reverse-mode automatic differentiation.

Small define-by-run engine over numpy: every operation returns a new
Tensor holding the forward value and, when any input requires gradients,
a closure that routes the upstream gradient to its parents. ``backward()``
on a scalar walks the recorded graph in reverse topological order.

Only the operations this package needs are provided; broadcasting follows
numpy semantics in the elementwise ops (gradients are summed back over
broadcast axes).
"""

from __future__ import annotations

import contextlib

import numpy as np

from . import kernels
from .errors import ConfigError, ContractError, DimensionError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float32)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise ContractError("backward: root must be a scalar tensor")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        return div(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _result(data, parents, backward_fn):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._backward = None
    out._parents = ()
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._backward = backward_fn
        out._parents = tuple(parents)
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float32, copy=True)
    else:
        t.grad += g


def _const(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float32))


def _unbroadcast(g, shape):
    """Sum gradient over axes that were broadcast in the forward pass."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / arithmetic
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = _const(a), _const(b)
    data = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _result(data, (a, b), backward)


def sub(a, b):
    a, b = _const(a), _const(b)
    data = a.data - b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _result(data, (a, b), backward)


def mul(a, b):
    a, b = _const(a), _const(b)
    data = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _result(data, (a, b), backward)


def div(a, b):
    a, b = _const(a), _const(b)
    data = a.data / b.data

    def backward(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _result(data, (a, b), backward)


def square(a):
    data = a.data * a.data

    def backward(g):
        _accum(a, g * 2.0 * a.data)

    return _result(data, (a,), backward)


def sqrt(a):
    data = np.sqrt(a.data)

    def backward(g):
        _accum(a, g * 0.5 / np.maximum(data, 1e-12))

    return _result(data, (a,), backward)


def exp(a):
    data = np.exp(a.data)

    def backward(g):
        _accum(a, g * data)

    return _result(data, (a,), backward)


def log(a):
    data = np.log(a.data)

    def backward(g):
        _accum(a, g / a.data)

    return _result(data, (a,), backward)


def clip(a, lo, hi):
    """Clamp values; gradient passes through only where unclipped."""
    data = np.clip(a.data, lo, hi)
    inside = ((a.data > lo) & (a.data < hi)).astype(np.float32)

    def backward(g):
        _accum(a, g * inside)

    return _result(data, (a,), backward)


def silu(a):
    sig = 1.0 / (1.0 + np.exp(-a.data))
    data = a.data * sig

    def backward(g):
        _accum(a, g * sig * (1.0 + a.data * (1.0 - sig)))

    return _result(data, (a,), backward)


def softmax(a, axis):
    if axis is None:
        raise ContractError("softmax: axis must be given explicitly")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        _accum(a, data * (g - inner))

    return _result(data, (a,), backward)


# ---------------------------------------------------------------------------
# reductions / shape
# ---------------------------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    data = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float32)
    data = np.asarray(data, dtype=np.float32)

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape))

    return _result(data, (a,), backward)


def tmean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.data.shape[ax]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape):
    data = a.data.reshape(shape)

    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return _result(data, (a,), backward)


def transpose(a, axes):
    data = a.data.transpose(axes)
    inverse = np.argsort(axes)

    def backward(g):
        _accum(a, g.transpose(inverse))

    return _result(data, (a,), backward)


def expand0(a, n):
    """Insert a broadcast leading axis of length n; backward sums it away."""
    data = np.broadcast_to(a.data[None], (n,) + a.data.shape)

    def backward(g):
        _accum(a, g.sum(axis=0))

    return _result(data, (a,), backward)


def concat(tensors, axis):
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(start, stop)
            _accum(t, g[tuple(idx)])

    return _result(data, tuple(tensors), backward)


def concat_channels(*tensors):
    """Concatenate NCHW tensors along the channel axis."""
    first = tensors[0]
    for t in tensors[1:]:
        if t.data.shape[0] != first.data.shape[0] or t.data.shape[2:] != first.data.shape[2:]:
            raise DimensionError(
                f"concat_channels: incompatible shapes {first.data.shape} vs {t.data.shape}"
            )
    return concat(tensors, axis=1)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b):
    a, b = _const(a), _const(b)
    if a.ndim == 2 and b.ndim == 2:
        if a.data.shape[1] != b.data.shape[0]:
            raise DimensionError(
                f"matmul: inner dims differ, {a.data.shape} @ {b.data.shape}"
            )
        data = a.data @ b.data

        def backward(g):
            _accum(a, g @ b.data.T)
            _accum(b, a.data.T @ g)

        return _result(data, (a, b), backward)

    if a.ndim == 3 and b.ndim == 2:
        if a.data.shape[2] != b.data.shape[0]:
            raise DimensionError(
                f"matmul: inner dims differ, {a.data.shape} @ {b.data.shape}"
            )
        data = a.data @ b.data

        def backward(g):
            _accum(a, g @ b.data.T)
            flat_a = a.data.reshape(-1, a.data.shape[2])
            flat_g = g.reshape(-1, g.shape[2])
            _accum(b, flat_a.T @ flat_g)

        return _result(data, (a, b), backward)

    if a.ndim == 3 and b.ndim == 3:
        if a.data.shape[0] != b.data.shape[0] or a.data.shape[2] != b.data.shape[1]:
            raise DimensionError(
                f"matmul: batched shapes incompatible, {a.data.shape} @ {b.data.shape}"
            )
        data = a.data @ b.data

        def backward(g):
            _accum(a, g @ b.data.swapaxes(1, 2))
            _accum(b, a.data.swapaxes(1, 2) @ g)

        return _result(data, (a, b), backward)

    raise DimensionError(
        f"matmul: unsupported ranks {a.ndim} @ {b.ndim} (2d, 3d@2d, 3d@3d only)"
    )


# ---------------------------------------------------------------------------
# neural-net ops
# ---------------------------------------------------------------------------


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-d cross-correlation, NCHW layout, square stride/padding."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError("conv2d: expected 4-d input and weight")
    bsz, cin, h, w = x.data.shape
    cout, wcin, kh, kw = weight.data.shape
    if cin != wcin:
        raise DimensionError(
            f"conv2d: input has {cin} channels but weight expects {wcin}"
        )
    s, p = int(stride), int(padding)
    oh = (h + 2 * p - kh) // s + 1
    ow = (w + 2 * p - kw) // s + 1
    if oh < 1 or ow < 1:
        raise DimensionError(
            f"conv2d: kernel {kh}x{kw} does not fit input {h}x{w} with padding {p}"
        )
    wmat = weight.data.reshape(cout, cin * kh * kw)

    if kh == 1 and kw == 1 and s == 1 and p == 0:
        xm = x.data.transpose(0, 2, 3, 1).reshape(-1, cin)
        y2 = xm @ wmat.T
        if bias is not None:
            y2 = y2 + bias.data
        data = y2.reshape(bsz, h, w, cout).transpose(0, 3, 1, 2)

        def backward(g):
            g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, cout)
            if bias is not None:
                _accum(bias, g2.sum(axis=0))
            _accum(weight, (g2.T @ xm).reshape(weight.data.shape))
            if x.requires_grad:
                gx = (g2 @ wmat).reshape(bsz, h, w, cin).transpose(0, 3, 1, 2)
                _accum(x, gx)

        parents = (x, weight) if bias is None else (x, weight, bias)
        return _result(data, parents, backward)

    if p > 0:
        xp = np.zeros((bsz, cin, h + 2 * p, w + 2 * p), dtype=np.float32)
        xp[:, :, p : p + h, p : p + w] = x.data
    else:
        xp = np.ascontiguousarray(x.data)
    cols = kernels.im2col(xp, kh, kw, s, s, oh, ow)
    y2 = cols @ wmat.T
    if bias is not None:
        y2 = y2 + bias.data
    data = y2.reshape(bsz, oh, ow, cout).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, cout)
        if bias is not None:
            _accum(bias, g2.sum(axis=0))
        _accum(weight, (g2.T @ cols).reshape(weight.data.shape))
        if x.requires_grad:
            gcols = np.ascontiguousarray(g2 @ wmat)
            gxp = kernels.col2im(
                gcols, bsz, cin, h + 2 * p, w + 2 * p, kh, kw, s, s, oh, ow
            )
            gx = gxp[:, :, p : p + h, p : p + w] if p > 0 else gxp
            _accum(x, gx)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(data, parents, backward)


def _norm_backward(g, xhat, gamma_data, inv_std, reduce_axes):
    dxhat = g * gamma_data
    m = dxhat.mean(axis=reduce_axes, keepdims=True)
    mx = (dxhat * xhat).mean(axis=reduce_axes, keepdims=True)
    return inv_std * (dxhat - m - xhat * mx)


def group_norm(x, gamma, beta, num_groups, eps=1e-5):
    """GroupNorm over an NCHW tensor with per-channel affine parameters."""
    bsz, c, h, w = x.data.shape
    if c % num_groups != 0:
        raise DimensionError(
            f"group_norm: {c} channels not divisible into {num_groups} groups"
        )
    xg = x.data.reshape(bsz, num_groups, -1)
    mean = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mean) * inv_std).reshape(bsz, c, h, w)
    gview = gamma.data.reshape(1, c, 1, 1)
    data = xhat * gview + beta.data.reshape(1, c, 1, 1)

    def backward(g):
        _accum(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        _accum(beta, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gg = (g * gview).reshape(bsz, num_groups, -1)
            xh = xhat.reshape(bsz, num_groups, -1)
            gx = _norm_backward(gg, xh, 1.0, inv_std, reduce_axes=2)
            _accum(x, gx.reshape(bsz, c, h, w))

    return _result(data, (x, gamma, beta), backward)


def layer_norm(x, gamma, beta, eps=1e-5):
    """LayerNorm over the last axis."""
    if x.data.shape[-1] != gamma.data.shape[0]:
        raise DimensionError(
            f"layer_norm: feature width {x.data.shape[-1]} vs gamma {gamma.data.shape}"
        )
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    data = xhat * gamma.data + beta.data

    def backward(g):
        axes = tuple(range(g.ndim - 1))
        _accum(gamma, (g * xhat).sum(axis=axes))
        _accum(beta, g.sum(axis=axes))
        if x.requires_grad:
            _accum(x, _norm_backward(g, xhat, gamma.data, inv_std, reduce_axes=-1))

    return _result(data, (x, gamma, beta), backward)


def interpolate_nearest(x, scale):
    """Nearest-neighbor upsampling of an NCHW tensor by an integer factor."""
    f = int(scale)
    if f < 1:
        raise ConfigError(f"interpolate_nearest: scale must be >= 1, got {scale}")
    if x.ndim != 4:
        raise DimensionError("interpolate_nearest: expected 4-d input")
    if f == 1:
        return x
    bsz, c, h, w = x.data.shape
    data = x.data.repeat(f, axis=2).repeat(f, axis=3)

    def backward(g):
        _accum(x, g.reshape(bsz, c, h, f, w, f).sum(axis=(3, 5)))

    return _result(data, (x,), backward)


def embedding(weight, ids):
    """Row lookup: weight (V, D) indexed by an integer array of any shape."""
    ids = np.asarray(ids)
    data = weight.data[ids]

    def backward(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids, g)
        _accum(weight, gw)

    return _result(data, (weight,), backward)


def rows_at(x, positions):
    """Select x[b, positions[b], :] for each batch row: (B, L, D) -> (B, D)."""
    positions = np.asarray(positions)
    bidx = np.arange(x.data.shape[0])
    data = x.data[bidx, positions]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[bidx, positions] = g
        _accum(x, gx)

    return _result(data, (x,), backward)


def custom_op(data, parents, backward_fn):
    """Build a graph node for a fused operation defined outside this module.

    ``backward_fn`` receives the upstream gradient and must route it to the
    parents with ``accumulate_grad``.
    """
    return _result(np.asarray(data, dtype=np.float32), parents, backward_fn)


accumulate_grad = _accum


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(f, point, eps=1e-3):
    """Compare analytic gradients of a scalar function against central differences.

    Returns the max over coordinates of |analytic - numeric| / (|numeric| + 1e-8).
    """
    if not 1e-5 <= eps <= 1e-2:
        raise ConfigError(f"grad_check: eps {eps} outside [1e-5, 1e-2]")
    p = Tensor(point.data.copy(), requires_grad=True)
    out = f(p)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ContractError("grad_check: f must return a scalar tensor")
    out.backward()
    analytic = (
        p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
    ).ravel()

    flat = p.data.ravel()
    numeric = np.zeros(flat.size, dtype=np.float64)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(p).data)
            flat[i] = orig - eps
            lo = float(f(p).data)
            flat[i] = orig
            numeric[i] = (hi - lo) / (2.0 * eps)

    err = np.abs(analytic.astype(np.float64) - numeric) / (np.abs(numeric) + 1e-8)
    return float(err.max())
