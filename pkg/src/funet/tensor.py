"""Dense tensors with reverse-mode automatic differentiation.

The op set is deliberately small: exactly what an encoder/decoder
segmentation network with frame and channel attention needs. Ops execute
eagerly on numpy buffers; when a `Tape` is active and an input tracks
gradients, the op appends a node (inputs, backward rule, saved arrays) to
the tape. `Tape.backward` walks the node list in reverse, which is a valid
reverse-topological order because nodes were appended in execution order.

Broadcasting is restricted on purpose: elementwise ops accept equal shapes,
or equal-rank shapes where mismatched axes have extent 1 on one side (this
covers bias adds, per-frame (B,T,1,1) gates and per-pixel gate maps).
Anything else is a `ShapeError`, which keeps every backward rule auditable.
"""

from __future__ import annotations

import functools
import math
from typing import Optional, Sequence

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operand extents violate an op's contract."""


class NumericError(ArithmeticError):
    """An op produced NaN/Inf while checked mode is on."""


_CHECKED = False


def set_checked(flag: bool) -> bool:
    """Toggle NaN/Inf screening after every forward op; returns previous value."""
    global _CHECKED
    prev = _CHECKED
    _CHECKED = bool(flag)
    return prev


def checked_mode() -> bool:
    return _CHECKED


class Tensor:
    """N-d numeric array with an optional gradient buffer.

    Data is contiguous float32 or float64 and treated as immutable once
    created (the training step mutates parameter data in place, which is
    the single sanctioned exception). `grad` always matches `data`'s shape.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

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
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g: np.ndarray):
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # arithmetic sugar; python scalars are constants, tensors follow the
    # restricted broadcast rule
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def permute(self, *axes):
        return permute(self, axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else axes)

    def sum(self, axis=None):
        return tensor_sum(self, axis)

    def mean(self, axis=None):
        return tensor_mean(self, axis)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


class Tape:
    """Append-only record of executed ops, for one reverse sweep.

    Use as a context manager around the forward pass; ops self-register
    while any tape is active. Not thread-shareable: one owner per tape.
    """

    def __init__(self):
        self.nodes = []  # (out, inputs, backward_fn)
        self._produced = set()  # ids of tensors created by this tape's nodes

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        assert _TAPES and _TAPES[-1] is self
        _TAPES.pop()
        return False

    def backward(self, loss: Tensor):
        """Accumulate d(loss)/d(leaf) into every requires_grad leaf's .grad.

        Repeated calls accumulate. Each node is visited exactly once, in
        reverse execution order.
        """
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        flows = {id(loss): np.ones_like(loss.data)}
        holders = {id(loss): loss}
        for out, inputs, backward_fn in reversed(self.nodes):
            g = flows.pop(id(out), None)
            holders.pop(id(out), None)
            if g is None:
                continue
            for t, gt in zip(inputs, backward_fn(g)):
                if gt is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in flows:
                    flows[key] = flows[key] + gt
                else:
                    flows[key] = gt
                    holders[key] = t
        for key, g in flows.items():
            t = holders[key]
            if t.requires_grad and key not in self._produced:
                t.accumulate_grad(g)


_TAPES: list[Tape] = []


def _finite_check(arr, op_name):
    if _CHECKED and not np.isfinite(arr).all():
        raise NumericError(f"{op_name} produced non-finite values")


def _make(out_data, inputs, backward_fn, op_name):
    """Wrap an op result, registering it on the active tape when needed."""
    _finite_check(out_data, op_name)
    record = bool(_TAPES) and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=record)
    if record:
        tape = _TAPES[-1]
        tape.nodes.append((out, inputs, backward_fn))
        tape._produced.add(id(out))
    return out


def _check_broadcast(sa, sb, op_name):
    if sa == sb:
        return
    if len(sa) != len(sb):
        raise ShapeError(f"{op_name}: rank mismatch {sa} vs {sb}")
    for ax, (m, n) in enumerate(zip(sa, sb)):
        if m != n and m != 1 and n != 1:
            raise ShapeError(f"{op_name}: axis {ax} has extents {m} vs {n} (only 1-extent broadcast allowed)")


def _unbroadcast(grad, shape):
    """Sum grad back down to `shape` (the inverse of 1-extent broadcasting)."""
    if grad.shape == shape:
        return grad
    axes = tuple(ax for ax, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    return grad.sum(axis=axes, keepdims=True)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor) and not isinstance(a, Tensor):
        raise TypeError("add needs at least one Tensor")
    if not isinstance(b, Tensor):
        out = a.data + b
        return _make(out, (a,), lambda g: (g,), "add")
    if not isinstance(a, Tensor):
        out = b.data + a
        return _make(out, (b,), lambda g: (g,), "add")
    _check_broadcast(a.shape, b.shape, "add")
    out = a.data + b.data
    sa, sb = a.shape, b.shape
    return _make(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return _make(a.data - b, (a,), lambda g: (g,), "sub")
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return _make(a - b.data, (b,), lambda g: (-g,), "sub")
    _check_broadcast(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return _make(a.data * b, (a,), lambda g, k=b: (g * k,), "mul")
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return _make(b.data * a, (b,), lambda g, k=a: (g * k,), "mul")
    _check_broadcast(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape
    return _make(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)), "mul")


def div(a, b) -> Tensor:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return _make(a.data / b, (a,), lambda g, k=b: (g / k,), "div")
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        bd = b.data
        return _make(a / bd, (b,), lambda g, k=a: (-g * k / (bd * bd),), "div")
    _check_broadcast(a.shape, b.shape, "div")
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape
    return _make(
        ad / bd,
        (a, b),
        lambda g: (_unbroadcast(g / bd, sa), _unbroadcast(-g * ad / (bd * bd), sb)),
        "div",
    )


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


# ---------------------------------------------------------------------------
# activations and normalization


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softmax(x: Tensor, axis: int) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} out of bounds for rank {x.ndim}")
    # attention score arrays get large; keep the temporaries to one buffer
    out = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=axis, keepdims=True)

    def backward(g):
        tmp = g * out
        inner = tmp.sum(axis=axis, keepdims=True)
        np.subtract(g, inner, out=tmp)
        tmp *= out
        return (tmp,)

    return _make(out, (x,), backward, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine params must have shape ({d},), got {gamma.shape} and {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gamma.data * xhat + beta.data

    def backward(g):
        dgamma = (g * xhat).reshape(-1, d).sum(axis=0)
        dbeta = g.reshape(-1, d).sum(axis=0)
        dxhat = g * gamma.data
        dx = inv / d * (d * dxhat - dxhat.sum(axis=-1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        return (dx, dgamma, dbeta)

    return _make(out, (x, gamma, beta), backward, "layer_norm")


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    b, c = x.shape[0], x.shape[1]
    if c % groups != 0:
        raise ShapeError(f"group_norm: {c} channels not divisible by {groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"group_norm affine params must have shape ({c},)")
    xg = x.data.reshape(b, groups, -1)
    n = xg.shape[2]
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(x.shape)
    gshape = (1, c) + (1,) * (x.ndim - 2)
    out = gamma.data.reshape(gshape) * xhat + beta.data.reshape(gshape)

    def backward(g):
        red = tuple(ax for ax in range(x.ndim) if ax != 1)
        dgamma = (g * xhat).sum(axis=red)
        dbeta = g.sum(axis=red)
        dxhat = (g * gamma.data.reshape(gshape)).reshape(b, groups, n)
        xh = xhat.reshape(b, groups, n)
        dx = inv / n * (n * dxhat - dxhat.sum(axis=2, keepdims=True) - xh * (dxhat * xh).sum(axis=2, keepdims=True))
        return (dx.reshape(x.shape), dgamma, dbeta)

    return _make(out, (x, gamma, beta), backward, "group_norm")


# ---------------------------------------------------------------------------
# shape moves


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} ({x.size} elements) to {shape}")
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"permute axes {axes} are not a permutation of rank {x.ndim}")
    inverse = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inverse),), "permute")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref):
            raise ShapeError(f"concat: rank mismatch {t.shape} vs {ref}")
        for ax in range(t.ndim):
            if ax != axis % t.ndim and t.shape[ax] != ref[ax]:
                raise ShapeError(f"concat: axis {ax} extents differ ({t.shape[ax]} vs {ref[ax]})")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.ascontiguousarray(np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)) for i in range(len(sizes)))

    return _make(out, tuple(tensors), backward, "concat")


# ---------------------------------------------------------------------------
# reductions


def tensor_sum(x: Tensor, axis=None) -> Tensor:
    if axis is None:
        out = x.data.sum()
        shape = x.shape
        return _make(out, (x,), lambda g: (np.broadcast_to(g, shape).astype(g.dtype),), "sum")
    axis = int(axis)
    out = x.data.sum(axis=axis)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).astype(g.dtype),)

    return _make(out, (x,), backward, "sum")


def tensor_mean(x: Tensor, axis=None) -> Tensor:
    if axis is None:
        n = x.size
        out = x.data.mean()
        shape = x.shape
        return _make(out, (x,), lambda g: (np.broadcast_to(g / n, shape).astype(g.dtype),), "mean")
    axis = int(axis)
    n = x.shape[axis]
    out = x.data.mean(axis=axis)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g / n, axis), x.shape).astype(g.dtype),)

    return _make(out, (x,), backward, "mean")


# ---------------------------------------------------------------------------
# linear algebra


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    din = x.shape[-1]
    dout, din_w = weight.shape
    if din != din_w:
        raise ShapeError(f"linear: input feature extent {din} != weight in-extent {din_w}")
    if bias is not None and bias.shape != (dout,):
        raise ShapeError(f"linear: bias shape {bias.shape} != ({dout},)")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        g2 = g.reshape(-1, dout)
        x2 = x.data.reshape(-1, din)
        dx = (g @ weight.data).reshape(x.shape)
        dw = g2.T @ x2
        db = g2.sum(axis=0) if bias is not None else None
        return (dx, dw, db) if bias is not None else (dx, dw)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, inputs, backward, "linear")


def matmul_batched(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 3 or b.ndim != 3:
        raise ShapeError(f"matmul_batched needs rank-3 operands, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul_batched: batch extents differ ({a.shape[0]} vs {b.shape[0]})")
    if a.shape[2] != b.shape[1]:
        raise ShapeError(f"matmul_batched: inner extents differ ({a.shape[2]} vs {b.shape[1]})")
    out = a.data @ b.data

    def backward(g):
        da = g @ b.data.transpose(0, 2, 1)
        db = a.data.transpose(0, 2, 1) @ g
        return (da, db)

    return _make(out, (a, b), backward, "matmul_batched")


# ---------------------------------------------------------------------------
# convolution and pooling


def _pair(v):
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride=1,
    padding=0,
    dilation=1,
) -> Tensor:
    """2-d cross-correlation over (B, Cin, H, W) with an OIHW kernel.

    Forward and backward both run through the im2col/col2im kernels (see
    `funet.kernels`) plus BLAS matmuls; the weight gradient accumulates
    per-sample in a fixed order so results are batch-deterministic.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be rank 4 (B,Cin,H,W), got {x.shape}")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d weight must be rank 4 (Cout,Cin,kh,kw), got {weight.shape}")
    b, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input channels {cin} != weight in-channels {cin_w}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    dh, dw = _pair(dilation)
    eff_kh = dh * (kh - 1) + 1
    eff_kw = dw * (kw - 1) + 1
    if h + 2 * ph < eff_kh:
        raise ShapeError(f"conv2d: padded height {h + 2 * ph} smaller than effective kernel height {eff_kh}")
    if w + 2 * pw < eff_kw:
        raise ShapeError(f"conv2d: padded width {w + 2 * pw} smaller than effective kernel width {eff_kw}")
    oh = (h + 2 * ph - eff_kh) // sh + 1
    ow = (w + 2 * pw - eff_kw) // sw + 1

    # pointwise convolutions skip the gather: columns are just a channel view
    pointwise = kh == kw == 1 and sh == sw == 1 and ph == pw == 0
    if pointwise:
        xp = x.data
        cols = x.data.reshape(b, cin, h * w)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
        cols = kernels.im2col(xp, kh, kw, sh, sw, dh, dw, oh, ow)
    wm = weight.data.reshape(cout, -1)
    out = np.matmul(wm, cols).reshape(b, cout, oh, ow)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)

    hp, wp = xp.shape[2], xp.shape[3]

    def backward(g):
        g2 = g.reshape(b, cout, oh * ow)
        dw_mat = np.zeros_like(wm)
        for bi in range(b):
            dw_mat += g2[bi] @ cols[bi].T
        dcols = np.matmul(wm.T, g2)
        if pointwise:
            dx = dcols.reshape(b, cin, h, w)
        else:
            dxp = kernels.col2im(dcols, hp, wp, kh, kw, sh, sw, dh, dw, oh, ow)
            dx = np.ascontiguousarray(dxp[:, :, ph : ph + h, pw : pw + w]) if (ph or pw) else dxp
        grads = [dx, dw_mat.reshape(weight.shape)]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, inputs, backward, "conv2d")


def adaptive_global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"adaptive_global_avg_pool needs rank 4, got {x.shape}")
    b, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def backward(g):
        return (np.broadcast_to(g / (h * w), x.shape).astype(g.dtype),)

    return _make(out, (x,), backward, "adaptive_global_avg_pool")


def avg_pool2x2(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"avg_pool2x2 needs rank 4, got {x.shape}")
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2x2 needs even spatial extents, got {h}x{w}")
    out = x.data.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return _make(out, (x,), backward, "avg_pool2x2")


# ---------------------------------------------------------------------------
# interpolation


@functools.lru_cache(maxsize=256)
def _interp_rows(n_in: int, n_out: int):
    """Bilinear row-interpolation matrix (n_out, n_in), half-pixel centers."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        f = src - i0
        m[i, i0] += 1.0 - f
        m[i, i1] += f
    return m


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Separable bilinear resize of (B,C,H,W); exact linear map, so the
    backward pass is just the transposed interpolation matrices."""
    if x.ndim != 4:
        raise ShapeError(f"resize_bilinear needs rank 4, got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"resize_bilinear target {out_h}x{out_w} must be positive")
    h, w = x.shape[2], x.shape[3]
    my = _interp_rows(h, out_h).astype(x.dtype)
    mx = _interp_rows(w, out_w).astype(x.dtype)
    out = np.matmul(np.matmul(my, x.data), mx.T)

    def backward(g):
        return (np.matmul(np.matmul(my.T, g), mx),)

    return _make(out, (x,), backward, "resize_bilinear")


def upsample2x(x: Tensor) -> Tensor:
    """Double H and W with bilinear interpolation."""
    return resize_bilinear(x, 2 * x.shape[2], 2 * x.shape[3])


# ---------------------------------------------------------------------------
# losses


def bce_with_logits(logits: Tensor, targets: Tensor) -> Tensor:
    """Elementwise binary cross entropy on raw logits, overflow-safe."""
    if logits.shape != targets.shape:
        raise ShapeError(f"bce_with_logits: shape mismatch {logits.shape} vs {targets.shape}")
    z, y = logits.data, targets.data
    out = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))

    def backward(g):
        p = np.empty_like(z)
        pos = z >= 0
        p[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        p[~pos] = ez / (1.0 + ez)
        return (g * (p - y), g * (-z))

    return _make(out, (logits, targets), backward, "bce_with_logits")
