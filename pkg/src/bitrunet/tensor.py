"""N-dimensional tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a C-contiguous numpy array plus an optional gradient
buffer. Differentiable operations are free functions; when a ``Tape`` is
active and any input requires a gradient, the op appends a node holding the
backward rule. ``backward(loss)`` walks the tape in exact reverse recording
order, accumulating into ``.grad``.

Tape lifetime is one forward pass: enter a fresh ``Tape`` context for each
training step, run inference with no tape at all.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from . import kernels


class Tensor:
    """Array container: shape, row-major data, dtype, optional grad."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in (
                np.float32,
                np.float64,
            ) else np.float64
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        """A view of the same data with no tape participation."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)


class Node:
    """One recorded operation: input/output references plus a backward rule."""

    __slots__ = ("inputs", "output", "rule")

    def __init__(self, inputs, output, rule):
        self.inputs = inputs
        self.output = output
        self.rule = rule


_ACTIVE_TAPE = None


class Tape:
    """Ordered record of operations for one forward pass."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a Tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def backward(self, loss):
        """Populate grads of everything the scalar ``loss`` depends on."""
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self.nodes:
            raise ValueError("backward on an empty tape")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            gy = node.output.grad
            if gy is None:
                continue
            node.rule(gy)


def backward(loss):
    """Reverse pass over the currently active tape."""
    if _ACTIVE_TAPE is None:
        raise RuntimeError("backward called with no active Tape")
    _ACTIVE_TAPE.backward(loss)


def _recording(*tensors):
    return _ACTIVE_TAPE is not None and any(
        isinstance(t, Tensor) and t.requires_grad for t in tensors
    )


def _record(inputs, output, rule):
    output.requires_grad = True
    _ACTIVE_TAPE.nodes.append(Node(inputs, output, rule))


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _as_tensor(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


# ---------------------------------------------------------------------------
# elementwise arithmetic (broadcasting allowed for bias-add / attention maps)
# ---------------------------------------------------------------------------

def add(a, b):
    b = _as_tensor(b, a)
    out = Tensor(a.data + b.data)
    if _recording(a, b):
        def rule(gy):
            _accum(a, _unbroadcast(gy, a.shape))
            _accum(b, _unbroadcast(gy, b.shape))
        _record((a, b), out, rule)
    return out


def sub(a, b):
    b = _as_tensor(b, a)
    out = Tensor(a.data - b.data)
    if _recording(a, b):
        def rule(gy):
            _accum(a, _unbroadcast(gy, a.shape))
            _accum(b, _unbroadcast(-gy, b.shape))
        _record((a, b), out, rule)
    return out


def mul(a, b):
    b = _as_tensor(b, a)
    out = Tensor(a.data * b.data)
    if _recording(a, b):
        ad, bd = a.data, b.data
        def rule(gy):
            _accum(a, _unbroadcast(gy * bd, a.shape))
            _accum(b, _unbroadcast(gy * ad, b.shape))
        _record((a, b), out, rule)
    return out


def div(a, b):
    b = _as_tensor(b, a)
    out = Tensor(a.data / b.data)
    if _recording(a, b):
        ad, bd = a.data, b.data
        def rule(gy):
            _accum(a, _unbroadcast(gy / bd, a.shape))
            _accum(b, _unbroadcast(-gy * ad / (bd * bd), b.shape))
        _record((a, b), out, rule)
    return out


# ---------------------------------------------------------------------------
# matrix product
# ---------------------------------------------------------------------------

def matmul(a, b):
    """Matrix product; leading axes broadcast, last two contract."""
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(
            f"matmul inner dimensions differ: {a.shape} @ {b.shape}"
        )
    out = Tensor(np.matmul(a.data, b.data))
    if _recording(a, b):
        ad, bd = a.data, b.data
        def rule(gy):
            _accum(a, _unbroadcast(np.matmul(gy, bd.swapaxes(-1, -2)), a.shape))
            _accum(b, _unbroadcast(np.matmul(ad.swapaxes(-1, -2), gy), b.shape))
        _record((a, b), out, rule)
    return out


# ---------------------------------------------------------------------------
# activations and pointwise transcendentals
# ---------------------------------------------------------------------------

def relu(x):
    out = Tensor(np.maximum(x.data, 0.0))
    if _recording(x):
        mask = x.data > 0
        def rule(gy):
            _accum(x, gy * mask)
        _record((x,), out, rule)
    return out


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x):
    """Exact Gaussian error linear unit, x * Phi(x)."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = Tensor(x.data * cdf)
    if _recording(x):
        xd = x.data
        def rule(gy):
            pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT2PI
            _accum(x, gy * (cdf + xd * pdf))
        _record((x,), out, rule)
    return out


def sigmoid(x):
    out = Tensor(1.0 / (1.0 + np.exp(-x.data)))
    if _recording(x):
        y = out.data
        def rule(gy):
            _accum(x, gy * y * (1.0 - y))
        _record((x,), out, rule)
    return out


def exp(x):
    out = Tensor(np.exp(x.data))
    if _recording(x):
        y = out.data
        def rule(gy):
            _accum(x, gy * y)
        _record((x,), out, rule)
    return out


def log(x):
    out = Tensor(np.log(x.data))
    if _recording(x):
        xd = x.data
        def rule(gy):
            _accum(x, gy / xd)
        _record((x,), out, rule)
    return out


def softmax(x, axis):
    """Softmax along ``axis``; output rows are probability vectors."""
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = Tensor(e / e.sum(axis=axis, keepdims=True))
    if _recording(x):
        y = out.data
        def rule(gy):
            _accum(x, y * (gy - (gy * y).sum(axis=axis, keepdims=True)))
        _record((x,), out, rule)
    return out


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    m = x.shape[-1]
    if gamma.shape != (m,) or beta.shape != (m,):
        raise ValueError(
            f"layer_norm affine params must have shape ({m},), "
            f"got {gamma.shape} and {beta.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(gamma.data * xhat + beta.data)
    if _recording(x, gamma, beta):
        lead = tuple(range(x.ndim - 1))
        def rule(gy):
            _accum(gamma, (gy * xhat).sum(axis=lead))
            _accum(beta, gy.sum(axis=lead))
            dxh = gy * gamma.data
            _accum(
                x,
                inv
                * (
                    dxh
                    - dxh.mean(axis=-1, keepdims=True)
                    - xhat * (dxh * xhat).mean(axis=-1, keepdims=True)
                ),
            )
        _record((x, gamma, beta), out, rule)
    return out


# ---------------------------------------------------------------------------
# 3D convolution
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one convolution: 3x3x3 kernel, stride 1 or 2, zero pad."""

    in_channels: int
    out_channels: int
    stride: int = 1
    padding: int = 1
    kernel: tuple = (3, 3, 3)
    transposed: bool = False


def _check_conv_input(x, spec, opname):
    if x.ndim != 5:
        raise ValueError(f"{opname}: input must be 5D (N,C,H,W,D), got {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise ValueError(
            f"{opname}: channel axis 1 has size {x.shape[1]}, "
            f"expected {spec.in_channels}"
        )
    for ax in (2, 3, 4):
        if x.shape[ax] == 0:
            raise ValueError(f"{opname}: spatial axis {ax} has zero size")


def conv3d(x, spec, weight, bias):
    """Forward 3D convolution. Weight (Cout, Cin, kh, kw, kd), bias (Cout,)."""
    if spec.transposed:
        raise ValueError("conv3d: spec is transposed; use conv_transpose3d")
    _check_conv_input(x, spec, "conv3d")
    wshape = (spec.out_channels, spec.in_channels) + tuple(spec.kernel)
    if weight.shape != wshape:
        raise ValueError(f"conv3d: weight shape {weight.shape}, expected {wshape}")
    out = Tensor(kernels.conv3d_forward(x.data, weight.data, spec.stride, spec.padding))
    if _recording(x, weight):
        xd, wd = x.data, weight.data
        stride, pad = spec.stride, spec.padding
        in_spatial = x.shape[2:]
        def rule(gy):
            _accum(x, kernels.conv3d_input_grad(gy, wd, stride, pad, in_spatial))
            _accum(weight, kernels.conv3d_weight_grad(xd, gy, stride, pad, spec.kernel))
        _record((x, weight), out, rule)
    if bias is not None:
        out = add(out, reshape(bias, (spec.out_channels, 1, 1, 1)))
    return out


def conv_transpose3d(x, spec, weight, bias, output_size=None):
    """Transposed 3D convolution. Weight (Cin, Cout, kh, kw, kd), bias (Cout,).

    Stride 2 doubles each spatial size exactly; stride 1 preserves it.
    ``output_size`` pins the exact spatial output when the default rule is
    not wanted (the adjoint of a stride-2 conv over an odd extent).
    """
    if not spec.transposed:
        raise ValueError("conv_transpose3d: spec is not transposed")
    _check_conv_input(x, spec, "conv_transpose3d")
    wshape = (spec.in_channels, spec.out_channels) + tuple(spec.kernel)
    if weight.shape != wshape:
        raise ValueError(
            f"conv_transpose3d: weight shape {weight.shape}, expected {wshape}"
        )
    if output_size is None:
        output_size = tuple(spec.stride * n for n in x.shape[2:])
    for ax, (n, m) in enumerate(zip(x.shape[2:], output_size)):
        if kernels.conv_out_size(m, spec.kernel[ax], spec.stride, spec.padding) != n:
            raise ValueError(
                f"conv_transpose3d: output size {m} on spatial axis {ax + 2} "
                f"is inconsistent with input size {n}"
            )
    out = Tensor(
        kernels.conv3d_input_grad(
            x.data, weight.data, spec.stride, spec.padding, output_size
        )
    )
    if _recording(x, weight):
        xd, wd = x.data, weight.data
        stride, pad = spec.stride, spec.padding
        def rule(gy):
            _accum(x, kernels.conv3d_forward(gy, wd, stride, pad))
            _accum(weight, kernels.conv3d_weight_grad(gy, xd, stride, pad, spec.kernel))
        _record((x, weight), out, rule)
    if bias is not None:
        out = add(out, reshape(bias, (spec.out_channels, 1, 1, 1)))
    return out


# ---------------------------------------------------------------------------
# pooling, concatenation, flips, shape moves
# ---------------------------------------------------------------------------

def global_avg_pool(x):
    """Mean over the spatial axes of (N,C,H,W,D), keeping them as size 1."""
    if x.ndim != 5:
        raise ValueError(f"global_avg_pool expects 5D input, got {x.shape}")
    n_sp = x.shape[2] * x.shape[3] * x.shape[4]
    out = Tensor(x.data.mean(axis=(2, 3, 4), keepdims=True))
    if _recording(x):
        def rule(gy):
            _accum(x, np.broadcast_to(gy / n_sp, x.shape).copy())
        _record((x,), out, rule)
    return out


def global_max_pool(x):
    """Max over the spatial axes of (N,C,H,W,D), keeping them as size 1."""
    if x.ndim != 5:
        raise ValueError(f"global_max_pool expects 5D input, got {x.shape}")
    n, c = x.shape[:2]
    flat = x.data.reshape(n, c, -1)
    idx = flat.argmax(axis=-1)
    out = Tensor(flat.max(axis=-1).reshape(n, c, 1, 1, 1))
    if _recording(x):
        def rule(gy):
            g = np.zeros_like(flat)
            ii, jj = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
            g[ii, jj, idx] = gy.reshape(n, c)
            _accum(x, g.reshape(x.shape))
        _record((x,), out, rule)
    return out


def concat(xs, axis):
    """Concatenate tensors along ``axis``."""
    if not xs:
        raise ValueError("concat of an empty sequence")
    if not -xs[0].ndim <= axis < xs[0].ndim:
        raise ValueError(f"concat axis {axis} invalid for shape {xs[0].shape}")
    out = Tensor(np.concatenate([t.data for t in xs], axis=axis))
    if _recording(*xs):
        sizes = [t.shape[axis] for t in xs]
        splits = np.cumsum(sizes)[:-1]
        def rule(gy):
            for t, g in zip(xs, np.split(gy, splits, axis=axis)):
                _accum(t, g)
        _record(tuple(xs), out, rule)
    return out


def flip(x, axes):
    """Reverse the listed spatial axes (the trailing three)."""
    axes = tuple(sorted(axes))
    spatial = set(range(x.ndim - 3, x.ndim))
    if not set(axes) <= spatial:
        raise ValueError(
            f"flip axes {axes} must be spatial axes {sorted(spatial)} "
            f"for shape {x.shape}"
        )
    out = Tensor(np.flip(x.data, axes).copy())
    if _recording(x):
        def rule(gy):
            _accum(x, np.flip(gy, axes))
        _record((x,), out, rule)
    return out


def reshape(x, shape):
    out = Tensor(x.data.reshape(shape))
    if _recording(x):
        old = x.shape
        def rule(gy):
            _accum(x, gy.reshape(old))
        _record((x,), out, rule)
    return out


def transpose_last2(x):
    """Swap the last two axes."""
    out = Tensor(np.ascontiguousarray(x.data.swapaxes(-1, -2)))
    if _recording(x):
        def rule(gy):
            _accum(x, gy.swapaxes(-1, -2))
        _record((x,), out, rule)
    return out


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def tsum(x, axis=None, keepdims=False):
    """Sum over ``axis`` (all elements when None)."""
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims))
    if _recording(x):
        def rule(gy):
            g = gy
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accum(x, np.broadcast_to(g, x.shape).copy())
        _record((x,), out, rule)
    return out


def tmean(x):
    """Mean of all elements (scalar)."""
    n = x.size
    out = Tensor(x.data.mean(keepdims=True).reshape(()))
    if _recording(x):
        def rule(gy):
            _accum(x, np.broadcast_to(gy / n, x.shape).copy())
        _record((x,), out, rule)
    return out


def tmax(x, axis, keepdims=False):
    """Max along one axis; gradient flows to the first maximal element."""
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"max axis {axis} invalid for shape {x.shape}")
    idx = x.data.argmax(axis=axis)
    out = Tensor(x.data.max(axis=axis, keepdims=keepdims))
    if _recording(x):
        def rule(gy):
            g = np.zeros_like(x.data)
            gk = gy if keepdims else np.expand_dims(gy, axis)
            np.put_along_axis(g, np.expand_dims(idx, axis), gk, axis)
            _accum(x, g)
        _record((x,), out, rule)
    return out
