"""
Dense-tensor reverse-mode automatic differentiation on numpy arrays.

Every primitive records its parents and a closure that maps the output
gradient to one gradient per parent. ``backward`` orders the recorded graph
topologically (the tape), runs the closures in reverse and accumulates into
leaf ``grad`` buffers. A tape is consumed by its backward pass; running the
forward again builds a fresh one.

Training runs in float32, gradient checking in float64: the precision is a
constructor argument of ``Tensor`` and every primitive preserves it.
"""
import contextlib
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import GroupDivisibility, NotScalar, ShapeMismatch, TapeConsumed

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Run operations without recording them on a tape."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class Tensor:
    """N-D array that can take part in a reverse-mode tape."""

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
        self.data = np.array(data, dtype=dtype, order="C", copy=True)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = np.zeros_like(self.data) if requires_grad else None
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable] = None
        self._op = ""
        self._consumed = False

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._op = op
        out._consumed = False
        out.requires_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def backward(self) -> None:
        backward(self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}, op={self._op!r})"


@dataclass
class Tape:
    """Recorded operations in topological order: inputs precede their users."""

    nodes: List[Tensor] = field(default_factory=list)
    consumed: bool = False

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        order: List[Tensor] = []
        visited = set()
        stack = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every leaf reachable from ``loss``."""
    if loss.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise TapeConsumed("this tape was already consumed by a backward pass; rerun the forward")
    loss._consumed = True
    if not loss.requires_grad:
        return

    tape = Tape.from_loss(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg

    for node in tape.nodes:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node._consumed = True
    tape.consumed = True


# --- elementwise suite -----------------------------------------------------

def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype), dtype=like.dtype)


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeMismatch(f"cannot broadcast {a.shape} with {b.shape}") from e


def add(a, b) -> Tensor:
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)
    _check_broadcast(a, b)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), _backward, "add")


def sub(a, b) -> Tensor:
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)
    _check_broadcast(a, b)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), _backward, "sub")


def mul(a, b) -> Tensor:
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)
    _check_broadcast(a, b)

    def _backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(a.data * b.data, (a, b), _backward, "mul")


def relu(x: Tensor) -> Tensor:
    positive = x.data > 0

    def _backward(g):
        return (g * positive,)

    return Tensor._from_op(np.where(positive, x.data, 0).astype(x.dtype), (x,), _backward, "relu")


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    positive = x.data > 0
    factor = np.where(positive, 1.0, slope).astype(x.dtype)

    def _backward(g):
        return (g * factor,)

    return Tensor._from_op(x.data * factor, (x,), _backward, "leaky_relu")


def sigmoid(x: Tensor) -> Tensor:
    # tanh form is overflow-free and exact at 0
    s = (0.5 * (1.0 + np.tanh(0.5 * x.data))).astype(x.dtype)

    def _backward(g):
        return (g * s * (1.0 - s),)

    return Tensor._from_op(s, (x,), _backward, "sigmoid")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeMismatch("concat needs at least one tensor")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
                n != m for i, (n, m) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)):
            raise ShapeMismatch(f"concat along axis {axis}: incompatible shapes {ref} and {t.shape}")
    cuts = list(itertools.accumulate(t.shape[axis] for t in tensors))[:-1]

    def _backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, _backward, "concat")


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeMismatch(f"channel range [{start}, {stop}) outside 0..{x.shape[1]}")

    def _backward(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return Tensor._from_op(np.ascontiguousarray(x.data[:, start:stop]), (x,), _backward, "slice_channels")


def crop_spatial(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Keep the leading ``shape`` voxels of each spatial axis."""
    shape = tuple(int(n) for n in shape)
    if len(shape) != 3 or any(n > m for n, m in zip(shape, x.shape[2:])):
        raise ShapeMismatch(f"cannot crop {x.shape} to spatial {shape}")
    if shape == tuple(x.shape[2:]):
        return x
    window = (slice(None), slice(None)) + tuple(slice(0, n) for n in shape)

    def _backward(g):
        full = np.zeros_like(x.data)
        full[window] = g
        return (full,)

    return Tensor._from_op(np.ascontiguousarray(x.data[window]), (x,), _backward, "crop_spatial")


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors the array vocabulary
    def _backward(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return Tensor._from_op(np.asarray(x.data.sum(), dtype=x.dtype), (x,), _backward, "sum")


def mean(x: Tensor) -> Tensor:
    n = x.size

    def _backward(g):
        return (np.broadcast_to(g / n, x.shape).astype(x.dtype),)

    return Tensor._from_op(np.asarray(x.data.mean(), dtype=x.dtype), (x,), _backward, "mean")


# --- convolution -----------------------------------------------------------

def _triple(v) -> Tuple[int, int, int]:
    if isinstance(v, int):
        return v, v, v
    v = tuple(int(n) for n in v)
    if len(v) != 3:
        raise ShapeMismatch(f"expected three values, got {v}")
    return v


def conv_output_shape(size: Sequence[int], kernel, stride, padding) -> Tuple[int, int, int]:
    kernel, stride, padding = _triple(kernel), _triple(stride), _triple(padding)
    return tuple((n + 2 * p - k) // s + 1 for n, k, s, p in zip(size, kernel, stride, padding))


def _pad(x: np.ndarray, padding) -> np.ndarray:
    if not any(padding):
        return x
    pd, ph, pw = padding
    return np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))


def _tap(xp: np.ndarray, offset, stride, out_shape) -> np.ndarray:
    """Strided view of the padded input seen by one kernel tap."""
    return xp[(slice(None), slice(None)) + tuple(
        slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(offset, stride, out_shape))]


def _conv_direct(xp, w, stride, groups, out_shape):
    n = xp.shape[0]
    cout, cin_g = w.shape[:2]
    cout_g = cout // groups
    out = np.zeros((n, cout) + out_shape, dtype=xp.dtype)
    for offset in itertools.product(*(range(k) for k in w.shape[2:])):
        tap = _tap(xp, offset, stride, out_shape)
        for gi in range(groups):
            ci = slice(gi * cin_g, (gi + 1) * cin_g)
            co = slice(gi * cout_g, (gi + 1) * cout_g)
            contrib = np.tensordot(tap[:, ci], w[(co, slice(None)) + offset], axes=([1], [1]))
            out[:, co] += np.moveaxis(contrib, -1, 1)
    return out


def _conv_im2col(xp, w, stride, groups, out_shape):
    n = xp.shape[0]
    cout, cin_g = w.shape[:2]
    cout_g = cout // groups
    k = w.shape[2:]
    windows = sliding_window_view(xp, k, axis=(2, 3, 4))
    windows = windows[:, :, ::stride[0], ::stride[1], ::stride[2]][:, :, :out_shape[0], :out_shape[1], :out_shape[2]]
    out = np.empty((n, cout) + out_shape, dtype=xp.dtype)
    for gi in range(groups):
        ci = slice(gi * cin_g, (gi + 1) * cin_g)
        co = slice(gi * cout_g, (gi + 1) * cout_g)
        res = np.tensordot(windows[:, ci], w[co], axes=([1, 5, 6, 7], [1, 2, 3, 4]))
        out[:, co] = np.moveaxis(res, -1, 1)
    return out


def conv3d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride=1, padding=0,
           groups: int = 1, method: str = "direct") -> Tensor:
    """Grouped 3D cross-correlation: input [N,Cin,D,H,W], weight [Cout,Cin/g,kd,kh,kw]."""
    stride, padding = _triple(stride), _triple(padding)
    if x.data.ndim != 5 or weight.data.ndim != 5:
        raise ShapeMismatch(f"conv3d expects 5D input and weight, got {x.shape} and {weight.shape}")
    cin, cout = x.shape[1], weight.shape[0]
    if groups < 1 or cin % groups or cout % groups:
        raise GroupDivisibility(f"channels in={cin} out={cout} not divisible by groups={groups}")
    if weight.shape[1] != cin // groups:
        raise ShapeMismatch(f"weight expects {weight.shape[1] * groups} input channels, input has {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeMismatch(f"bias shape {bias.shape} != ({cout},)")
    kernel = weight.shape[2:]
    if any(n + 2 * p < k for n, p, k in zip(x.shape[2:], padding, kernel)):
        raise ShapeMismatch(f"kernel {kernel} does not fit padded input {x.shape[2:]} (padding {padding})")
    out_shape = conv_output_shape(x.shape[2:], kernel, stride, padding)

    xp = _pad(x.data, padding)
    if method == "direct":
        out = _conv_direct(xp, weight.data, stride, groups, out_shape)
    elif method == "im2col":
        out = _conv_im2col(xp, weight.data, stride, groups, out_shape)
    else:
        raise ValueError(f"unknown conv3d method {method!r}")
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1, 1)

    def _backward(g):
        w = weight.data
        cin_g = w.shape[1]
        cout_g = cout // groups
        gxp = np.zeros_like(xp) if x.requires_grad else None
        gw = np.zeros_like(w) if weight.requires_grad else None
        for offset in itertools.product(*(range(k) for k in kernel)):
            tap = _tap(xp, offset, stride, out_shape)
            gtap = _tap(gxp, offset, stride, out_shape) if gxp is not None else None
            for gi in range(groups):
                ci = slice(gi * cin_g, (gi + 1) * cin_g)
                co = slice(gi * cout_g, (gi + 1) * cout_g)
                if gw is not None:
                    gw[(co, slice(None)) + offset] = np.tensordot(
                        g[:, co], tap[:, ci], axes=([0, 2, 3, 4], [0, 2, 3, 4]))
                if gtap is not None:
                    contrib = np.tensordot(g[:, co], w[(co, slice(None)) + offset], axes=([1], [0]))
                    gtap[:, ci] += np.moveaxis(contrib, -1, 1)
        gx = None
        if gxp is not None:
            pd, ph, pw = padding
            d, h, wd = x.shape[2:]
            gx = np.ascontiguousarray(gxp[:, :, pd:pd + d, ph:ph + h, pw:pw + wd])
        gb = g.sum(axis=(0, 2, 3, 4)) if bias is not None and bias.requires_grad else None
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, _backward, "conv3d")


# --- normalization and resampling -----------------------------------------

def instance_norm3d(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per (n, c) normalization over D, H, W with population variance."""
    if x.data.ndim != 5:
        raise ShapeMismatch(f"instance_norm3d expects [N,C,D,H,W], got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatch(f"affine parameters must have shape ({c},)")
    axes = (2, 3, 4)
    m = x.shape[2] * x.shape[3] * x.shape[4]
    mu = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    g_r = gamma.data.reshape(1, c, 1, 1, 1)
    out = (g_r * xhat + beta.data.reshape(1, c, 1, 1, 1)).astype(x.dtype)

    def _backward(g):
        gx = None
        if x.requires_grad:
            dxhat = g * g_r
            gx = (inv_std / m) * (m * dxhat - dxhat.sum(axis=axes, keepdims=True)
                                  - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
            gx = gx.astype(x.dtype)
        ggamma = (g * xhat).sum(axis=(0, 2, 3, 4)).astype(x.dtype) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3, 4)) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return Tensor._from_op(out, (x, gamma, beta), _backward, "instance_norm3d")


def interpolation_matrix(n: int, factor: int, dtype=np.float64) -> np.ndarray:
    """1D linear upsampling operator with half-pixel (align-corners false) centers."""
    if factor == 1:
        return np.eye(n, dtype=dtype)
    m = np.zeros((n * factor, n), dtype=dtype)
    for o in range(n * factor):
        s = min(max((o + 0.5) / factor - 0.5, 0.0), n - 1.0)
        i0 = int(math.floor(s))
        i1 = min(i0 + 1, n - 1)
        t = s - i0
        m[o, i0] += 1.0 - t
        m[o, i1] += t
    return m


def _apply_axis(mat: np.ndarray, x: np.ndarray, axis: int) -> np.ndarray:
    return np.moveaxis(np.tensordot(mat, x, axes=([1], [axis])), 0, axis)


def upsample_trilinear(x: Tensor, factor=2) -> Tensor:
    """Trilinear upsampling by 2 (per-axis factors of 1 leave that axis unchanged)."""
    factors = _triple(factor)
    if any(f not in (1, 2) for f in factors):
        raise ValueError(f"upsampling factors must be 1 or 2, got {factors}")
    if x.data.ndim != 5:
        raise ShapeMismatch(f"upsample_trilinear expects [N,C,D,H,W], got {x.shape}")
    mats = [interpolation_matrix(n, f, x.dtype) for n, f in zip(x.shape[2:], factors)]
    out = x.data
    for axis, (mat, f) in enumerate(zip(mats, factors), start=2):
        if f != 1:
            out = _apply_axis(mat, out, axis)
    out = np.ascontiguousarray(out, dtype=x.dtype)

    def _backward(g):
        for axis, (mat, f) in enumerate(zip(mats, factors), start=2):
            if f != 1:
                g = _apply_axis(mat.T, g, axis)
        return (np.ascontiguousarray(g, dtype=x.dtype),)

    return Tensor._from_op(out, (x,), _backward, "upsample_trilinear")


# --- gradient checking -----------------------------------------------------

@dataclass
class GradCheckReport:
    errors: List[float]
    tol: float
    checked: List[int] = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max(self.errors) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-4, tol: float = 1e-5,
               max_entries: Optional[int] = None, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients with central differences, one relative error per input.

    The error of an input is ||analytic - numeric|| / max(||analytic||, ||numeric||)
    over the checked entries; ``max_entries`` samples that many entries per input.
    """
    for t in inputs:
        t.requires_grad = True
        t.zero_grad()
    backward(f(*inputs))
    analytic = [t.grad.copy() for t in inputs]

    rng = np.random.default_rng(seed)
    errors, checked = [], []
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(idx.size, dtype=np.float64)
        with no_grad():
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f(*inputs).data)
                flat[i] = orig - h
                fm = float(f(*inputs).data)
                flat[i] = orig
                numeric[j] = (fp - fm) / (2.0 * h)
        a_sel = a.reshape(-1)[idx].astype(np.float64)
        scale = max(np.linalg.norm(a_sel), np.linalg.norm(numeric))
        errors.append(float(np.linalg.norm(a_sel - numeric) / scale) if scale > 0 else 0.0)
        checked.append(int(idx.size))
    return GradCheckReport(errors, tol, checked)
