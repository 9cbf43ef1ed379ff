"""Reverse-mode automatic differentiation over dense numpy arrays.

A :class:`Tensor` wraps a numpy array together with an optional gradient
buffer and a record of the operation that produced it (parent tensors plus
a backward closure).  Calling :meth:`Tensor.backward` on a scalar walks the
graph once in reverse topological order and accumulates gradients into every
tensor with ``requires_grad=True``.

Only the operations needed by the segmentation network are provided, but each
is a proper differentiable primitive: elementwise arithmetic with numpy
broadcasting, matmul, reductions, softmax / L2-normalisation, slicing,
concatenation, nearest-neighbour upsampling, average pooling, batch
normalisation and 3D (transposed) convolution.  Convolution uses an im2col
formulation so the heavy lifting is a single BLAS matmul in both directions.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float64

# Guard for L2 normalisation: keeps the derivative finite at the origin.
NORM_EPS = 1e-12


class ConfigError(ValueError):
    """Inconsistent shapes or settings (a configuration problem, not a bug)."""


_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph recording (for inference)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _as_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(DEFAULT_DTYPE)


class Tensor:
    """A numpy array plus gradient buffer and autodiff bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_done")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None
        self._done = False

    # -- introspection -------------------------------------------------

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

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- graph ----------------------------------------------------------

    def backward(self):
        """Accumulate d(self)/d(leaf) into ``grad`` for every reachable tensor.

        ``self`` must be a scalar.  A graph can only be walked once; a second
        call on the same root raises ``RuntimeError``.
        """
        if self.data.size != 1:
            raise ValueError(
                f"backward() requires a scalar loss, got shape {self.data.shape}"
            )
        if self._done:
            raise RuntimeError("backward() was already called on this graph")
        self._done = True

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other, self.dtype))

    def __radd__(self, other):
        return add(_lift(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self.dtype))

    def __rsub__(self, other):
        return sub(_lift(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _lift(other, self.dtype))

    def __rmul__(self, other):
        return mul(_lift(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _lift(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_lift(other, self.dtype), self)

    def __neg__(self):
        return mul(self, _lift(-1.0, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)


def _lift(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _node(data, parents, backward_fn) -> Tensor:
    """Build a result tensor, recording the graph edge if grads are enabled."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic ----------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def backward(go):
        a._accumulate(_unbroadcast(go, a.data.shape))
        b._accumulate(_unbroadcast(go, b.data.shape))

    return _node(out_data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data - b.data

    def backward(go):
        a._accumulate(_unbroadcast(go, a.data.shape))
        b._accumulate(_unbroadcast(-go, b.data.shape))

    return _node(out_data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def backward(go):
        a._accumulate(_unbroadcast(go * b.data, a.data.shape))
        b._accumulate(_unbroadcast(go * a.data, b.data.shape))

    return _node(out_data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data / b.data

    def backward(go):
        a._accumulate(_unbroadcast(go / b.data, a.data.shape))
        b._accumulate(_unbroadcast(-go * a.data / (b.data * b.data), b.data.shape))

    return _node(out_data, (a, b), backward)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(go):
        a._accumulate(go * out_data)

    return _node(out_data, (a,), backward)


def log(a: Tensor) -> Tensor:
    out_data = np.log(a.data)

    def backward(go):
        a._accumulate(go / a.data)

    return _node(out_data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0.0)

    def backward(go):
        a._accumulate(go * (a.data > 0))

    return _node(out_data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(go):
        a._accumulate(go * out_data * (1.0 - out_data))

    return _node(out_data, (a,), backward)


def square(a: Tensor) -> Tensor:
    out_data = a.data * a.data

    def backward(go):
        a._accumulate(go * 2.0 * a.data)

    return _node(out_data, (a,), backward)


# -- structural ops -------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    out_data = a.data.reshape(shape)

    def backward(go):
        a._accumulate(go.reshape(a.data.shape))

    return _node(out_data, (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out_data = a.data.transpose(axes)
    inv = tuple(np.argsort(axes))

    def backward(go):
        a._accumulate(go.transpose(inv))

    return _node(out_data, (a,), backward)


def getitem(a: Tensor, idx) -> Tensor:
    out_data = a.data[idx]

    def backward(go):
        g = np.zeros_like(a.data)
        np.add.at(g, idx, go)
        a._accumulate(g)

    return _node(out_data, (a,), backward)


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(go):
        for t, piece in zip(tensors, np.split(go, splits, axis=axis)):
            t._accumulate(piece)

    return _node(out_data, tuple(tensors), backward)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(go):
        g = go
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.data.shape))

    return _node(out_data, (a,), backward)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.data.shape[i] for i in ax]))
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), _lift(1.0 / n, a.dtype))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` where ``a`` is [..., K] and ``b`` is [K, N]."""
    if b.data.ndim != 2:
        raise ConfigError(f"matmul expects a 2D right operand, got {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[0]:
        raise ConfigError(
            f"matmul inner dimensions disagree: {a.data.shape} @ {b.data.shape}"
        )
    out_data = a.data @ b.data

    def backward(go):
        a._accumulate(go @ b.data.T)
        go_flat = go.reshape(-1, go.shape[-1])
        a_flat = a.data.reshape(-1, a.data.shape[-1])
        b._accumulate(a_flat.T @ go_flat)

    return _node(out_data, (a, b), backward)


# -- normalisations --------------------------------------------------------


def softmax(a: Tensor, axis: int) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(go):
        dot = (go * out_data).sum(axis=axis, keepdims=True)
        a._accumulate(out_data * (go - dot))

    return _node(out_data, (a,), backward)


def l2_normalize(a: Tensor, axis: int) -> Tensor:
    """``a / (||a|| + eps)`` along ``axis`` with a small stabilising epsilon."""
    n = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    denom = n + NORM_EPS
    out_data = a.data / denom

    def backward(go):
        dot = (go * a.data).sum(axis=axis, keepdims=True)
        safe_n = np.maximum(n, 1e-300)
        coef = (dot / safe_n) / (denom * denom)
        a._accumulate(go / denom - a.data * coef)

    return _node(out_data, (a,), backward)


# -- spatial ops ------------------------------------------------------------
#
# Volumetric tensors are laid out [B, C, D, H, W]; a 4D input [C, D, H, W] is
# treated as batch size one and the batch axis is stripped from the result.


def _spatial_triplet(value, name):
    if isinstance(value, int):
        return (value, value, value)
    t = tuple(int(v) for v in value)
    if len(t) != 3:
        raise ConfigError(f"{name} must have three entries, got {value!r}")
    return t


def _with_batch(a: Tensor):
    if a.data.ndim == 4:
        return reshape(a, (1,) + a.data.shape), True
    if a.data.ndim == 5:
        return a, False
    raise ConfigError(f"expected a 4D or 5D volumetric tensor, got shape {a.data.shape}")


def _maybe_strip_batch(out: Tensor, squeezed: bool) -> Tensor:
    if squeezed:
        return reshape(out, out.data.shape[1:])
    return out


def conv3d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride=1, padding=0, dilation=1) -> Tensor:
    """3D cross-correlation.

    ``x`` is [B, C_in, D, H, W] (or unbatched [C_in, D, H, W]), ``kernel`` is
    [C_out, C_in, kd, kh, kw], ``bias`` is [C_out].  Output extents follow
    floor((n + 2p - d*(k-1) - 1)/s) + 1 per axis.
    """
    x5, squeezed = _with_batch(x)
    stride = _spatial_triplet(stride, "stride")
    padding = _spatial_triplet(padding, "padding")
    dilation = _spatial_triplet(dilation, "dilation")
    if kernel.data.ndim != 5:
        raise ConfigError(f"conv3d kernel must be 5D, got shape {kernel.data.shape}")
    if kernel.data.shape[1] != x5.data.shape[1]:
        raise ConfigError(
            f"conv3d channel mismatch: input has shape {x5.data.shape}, "
            f"kernel has shape {kernel.data.shape}"
        )
    b_n, c_in, d_in, h_in, w_in = x5.data.shape
    c_out = kernel.data.shape[0]
    ksize = kernel.data.shape[2:]
    out_ext = []
    for n, k, s, p, d in zip((d_in, h_in, w_in), ksize, stride, padding, dilation):
        eff = d * (k - 1) + 1
        if n + 2 * p < eff:
            raise ConfigError(
                f"conv3d kernel (effective extent {eff}) does not fit input extent "
                f"{n} with padding {p}"
            )
        out_ext.append((n + 2 * p - eff) // s + 1)
    if stride == (1, 1, 1):
        out_data, backward = _conv3d_stride1(
            x5, kernel, bias, padding, dilation, out_ext)
    else:
        out_data, backward = _conv3d_strided(
            x5, kernel, bias, stride, padding, dilation, out_ext)

    parents = (x5, kernel) if bias is None else (x5, kernel, bias)
    out = _node(out_data, parents, backward)
    return _maybe_strip_batch(out, squeezed)


def _tap_spans(n, out_n, k, p, d):
    """Index spans per kernel tap along one axis at stride 1.

    Tap ``j`` pairs output index ``o`` with input index ``o + j*d - p``; the
    span is clipped to the input so padding never has to be materialized.
    ``None`` marks taps that miss the input entirely, which happens for every
    off-centre tap once the dilation exceeds the extent.
    """
    spans = []
    for j in range(k):
        shift = j * d - p
        lo = max(0, -shift)
        hi = min(out_n, n - shift)
        spans.append((j, lo, hi, lo + shift, hi + shift) if hi > lo else None)
    return spans


def _conv3d_stride1(x5, kernel, bias, padding, dilation, out_ext):
    """Stride-1 convolution as one channels-last matmul per kernel tap.

    Each surviving tap contributes ``x[input span] @ w[tap]`` into the
    matching output span; skipped taps make heavily dilated kernels on small
    patches nearly free, and the backward pass only has to hold the
    channels-last input rather than an im2col matrix.
    """
    b_n = x5.data.shape[0]
    c_out = kernel.data.shape[0]
    d_out, h_out, w_out = out_ext
    spans = [_tap_spans(n, o, k, p, d) for n, o, k, p, d in
             zip(x5.data.shape[2:], out_ext, kernel.data.shape[2:],
                 padding, dilation)]
    taps = [(sd, sh, sw)
            for sd in spans[0] if sd is not None
            for sh in spans[1] if sh is not None
            for sw in spans[2] if sw is not None]

    xt = np.ascontiguousarray(x5.data.transpose(0, 2, 3, 4, 1))
    wt = np.ascontiguousarray(kernel.data.transpose(2, 3, 4, 1, 0))
    out_t = np.zeros((b_n, d_out, h_out, w_out, c_out), dtype=x5.data.dtype)
    for (jd, dlo, dhi, dslo, dshi), (jh, hlo, hhi, hslo, hshi), \
            (jw, wlo, whi, wslo, wshi) in taps:
        xs = xt[:, dslo:dshi, hslo:hshi, wslo:wshi, :]
        out_t[:, dlo:dhi, hlo:hhi, wlo:whi, :] += xs @ wt[jd, jh, jw]
    if bias is not None:
        out_t += bias.data
    out_data = np.ascontiguousarray(out_t.transpose(0, 4, 1, 2, 3))

    def backward(go):
        go_t = np.ascontiguousarray(go.transpose(0, 2, 3, 4, 1))
        need_w = kernel.requires_grad
        need_x = x5.requires_grad
        gw = np.zeros_like(kernel.data) if need_w else None
        gx_t = np.zeros_like(xt) if need_x else None
        if need_w or need_x:
            for (jd, dlo, dhi, dslo, dshi), (jh, hlo, hhi, hslo, hshi), \
                    (jw, wlo, whi, wslo, wshi) in taps:
                gs = go_t[:, dlo:dhi, hlo:hhi, wlo:whi, :]
                if need_w:
                    xs = xt[:, dslo:dshi, hslo:hshi, wslo:wshi, :]
                    gw[:, :, jd, jh, jw] = np.einsum(
                        "bdhwo,bdhwc->oc", gs, xs, optimize=True)
                if need_x:
                    gx_t[:, dslo:dshi, hslo:hshi, wslo:wshi, :] += \
                        gs @ wt[jd, jh, jw].T
        if need_w:
            kernel._accumulate(gw)
        if bias is not None and bias.requires_grad:
            bias._accumulate(go_t.sum(axis=(0, 1, 2, 3)))
        if need_x:
            x5._accumulate(np.ascontiguousarray(gx_t.transpose(0, 4, 1, 2, 3)))

    return out_data, backward


def _conv3d_strided(x5, kernel, bias, stride, padding, dilation, out_ext):
    """General convolution via explicit padding and im2col columns."""
    b_n, c_in, d_in, h_in, w_in = x5.data.shape
    c_out = kernel.data.shape[0]
    ksize = kernel.data.shape[2:]
    d_out, h_out, w_out = out_ext

    xp = x5.data
    if any(padding):
        pd, ph, pw = padding
        xp = np.pad(xp, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))

    # Window extraction: take windows of the dilated effective extent, then
    # subsample inside each window by the dilation and across positions by
    # the stride.  Result axes: [B, C_in, D_out, H_out, W_out, kd, kh, kw].
    eff = tuple(d * (k - 1) + 1 for k, d in zip(ksize, dilation))
    win = sliding_window_view(xp, eff, axis=(2, 3, 4))
    win = win[:, :,
              :: stride[0], :: stride[1], :: stride[2],
              :: dilation[0], :: dilation[1], :: dilation[2]]
    win = win[:, :, :d_out, :h_out, :w_out]

    # Columns: [B*D_out*H_out*W_out, C_in*kd*kh*kw], channels fastest-varying
    # after the kernel offsets so a plain reshape of the kernel matches.
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 4, 1, 5, 6, 7))
    cols_mat = cols.reshape(b_n * d_out * h_out * w_out, -1)
    w_mat = kernel.data.reshape(c_out, -1)
    out_flat = cols_mat @ w_mat.T
    if bias is not None:
        out_flat = out_flat + bias.data
    out_data = out_flat.reshape(b_n, d_out, h_out, w_out, c_out)
    out_data = np.ascontiguousarray(out_data.transpose(0, 4, 1, 2, 3))

    def backward(go):
        go_flat = np.ascontiguousarray(go.transpose(0, 2, 3, 4, 1))
        go_flat = go_flat.reshape(-1, c_out)
        if kernel.requires_grad:
            kernel._accumulate((go_flat.T @ cols_mat).reshape(kernel.data.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(go_flat.sum(axis=0))
        if x5.requires_grad:
            gcols = (go_flat @ w_mat).reshape(
                b_n, d_out, h_out, w_out, c_in, *ksize)
            gx = np.zeros(
                (b_n, c_in,
                 d_in + 2 * padding[0], h_in + 2 * padding[1], w_in + 2 * padding[2]),
                dtype=go.dtype)
            gk = np.ascontiguousarray(gcols.transpose(5, 6, 7, 0, 4, 1, 2, 3))
            for od in range(ksize[0]):
                for oh in range(ksize[1]):
                    for ow in range(ksize[2]):
                        d0 = od * dilation[0]
                        h0 = oh * dilation[1]
                        w0 = ow * dilation[2]
                        gx[:, :,
                           d0: d0 + stride[0] * d_out: stride[0],
                           h0: h0 + stride[1] * h_out: stride[1],
                           w0: w0 + stride[2] * w_out: stride[2]] += gk[od, oh, ow]
            pd, ph, pw = padding
            gx = gx[:, :, pd: pd + d_in, ph: ph + h_in, pw: pw + w_in]
            x5._accumulate(gx)

    return out_data, backward


def conv_transpose3d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
                     stride=1) -> Tensor:
    """Transposed 3D convolution (no padding).

    ``kernel`` is [C_in, C_out, kd, kh, kw]; output extents are
    ``(n - 1) * s + k`` per axis.  Used here with kernel == stride, in which
    case it tiles each input voxel into an s-sized block.
    """
    x5, squeezed = _with_batch(x)
    stride = _spatial_triplet(stride, "stride")
    if kernel.data.ndim != 5:
        raise ConfigError(f"conv_transpose3d kernel must be 5D, got {kernel.data.shape}")
    if kernel.data.shape[0] != x5.data.shape[1]:
        raise ConfigError(
            f"conv_transpose3d channel mismatch: input has shape {x5.data.shape}, "
            f"kernel has shape {kernel.data.shape}"
        )
    b_n, c_in, d_in, h_in, w_in = x5.data.shape
    c_out = kernel.data.shape[1]
    ksize = kernel.data.shape[2:]
    out_ext = tuple((n - 1) * s + k
                    for n, s, k in zip((d_in, h_in, w_in), stride, ksize))

    x_flat = np.ascontiguousarray(x5.data.transpose(0, 2, 3, 4, 1))
    x_mat = x_flat.reshape(-1, c_in)
    out_data = np.zeros((b_n, c_out) + out_ext, dtype=x5.data.dtype)
    for od in range(ksize[0]):
        for oh in range(ksize[1]):
            for ow in range(ksize[2]):
                contrib = x_mat @ kernel.data[:, :, od, oh, ow]
                contrib = contrib.reshape(b_n, d_in, h_in, w_in, c_out)
                contrib = contrib.transpose(0, 4, 1, 2, 3)
                out_data[:, :,
                         od: od + stride[0] * d_in: stride[0],
                         oh: oh + stride[1] * h_in: stride[1],
                         ow: ow + stride[2] * w_in: stride[2]] += contrib
    if bias is not None:
        out_data += bias.data.reshape(1, c_out, 1, 1, 1)

    parents = (x5, kernel) if bias is None else (x5, kernel, bias)

    def backward(go):
        if bias is not None and bias.requires_grad:
            bias._accumulate(go.sum(axis=(0, 2, 3, 4)))
        gx = np.zeros_like(x5.data) if x5.requires_grad else None
        gw = np.zeros_like(kernel.data) if kernel.requires_grad else None
        for od in range(ksize[0]):
            for oh in range(ksize[1]):
                for ow in range(ksize[2]):
                    go_slice = go[:, :,
                                  od: od + stride[0] * d_in: stride[0],
                                  oh: oh + stride[1] * h_in: stride[1],
                                  ow: ow + stride[2] * w_in: stride[2]]
                    go_mat = np.ascontiguousarray(
                        go_slice.transpose(0, 2, 3, 4, 1)).reshape(-1, c_out)
                    if gw is not None:
                        gw[:, :, od, oh, ow] = x_mat.T @ go_mat
                    if gx is not None:
                        gx += (go_mat @ kernel.data[:, :, od, oh, ow].T).reshape(
                            b_n, d_in, h_in, w_in, c_in).transpose(0, 4, 1, 2, 3)
        if gw is not None:
            kernel._accumulate(gw)
        if gx is not None:
            x5._accumulate(gx)

    out = _node(out_data, parents, backward)
    return _maybe_strip_batch(out, squeezed)


def avg_pool3d(x: Tensor, stride) -> Tensor:
    """Average pooling with kernel == stride (non-overlapping blocks).

    Raises ``ConfigError`` naming the offending axis when a spatial extent is
    not divisible by its stride.
    """
    x5, squeezed = _with_batch(x)
    stride = _spatial_triplet(stride, "stride")
    b_n, c, d_in, h_in, w_in = x5.data.shape
    for axis_name, n, s in zip("DHW", (d_in, h_in, w_in), stride):
        if n % s != 0:
            raise ConfigError(
                f"avg_pool3d: axis {axis_name} extent {n} is not divisible by "
                f"stride {s}"
            )
    sd, sh, sw = stride
    d_out, h_out, w_out = d_in // sd, h_in // sh, w_in // sw
    blocks = x5.data.reshape(b_n, c, d_out, sd, h_out, sh, w_out, sw)
    out_data = blocks.mean(axis=(3, 5, 7))
    inv = 1.0 / (sd * sh * sw)

    def backward(go):
        g = np.broadcast_to(
            (go * inv)[:, :, :, None, :, None, :, None],
            (b_n, c, d_out, sd, h_out, sh, w_out, sw))
        x5._accumulate(g.reshape(x5.data.shape))

    out = _node(out_data, (x5,), backward)
    return _maybe_strip_batch(out, squeezed)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes, keeping them as size-1: [B,C,1,1,1]."""
    x5, squeezed = _with_batch(x)
    out = reduce_mean(x5, axis=(2, 3, 4), keepdims=True)
    return _maybe_strip_batch(out, squeezed)


def upsample_nearest(x: Tensor, extents) -> Tensor:
    """Nearest-neighbour resize of the spatial axes to ``extents`` (D, H, W).

    Output voxel i along an axis of target extent m samples input voxel
    floor(i * n / m); for integer upscaling factors this tiles each input
    voxel into a block.
    """
    x5, squeezed = _with_batch(x)
    extents = _spatial_triplet(extents, "extents")
    b_n, c, d_in, h_in, w_in = x5.data.shape
    idx = [np.arange(m) * n // m
           for m, n in zip(extents, (d_in, h_in, w_in))]
    out_data = x5.data[:, :, idx[0]][:, :, :, idx[1]][:, :, :, :, idx[2]]
    flat_in = np.ravel_multi_index(np.ix_(idx[0], idx[1], idx[2]),
                                   (d_in, h_in, w_in)).ravel()

    def backward(go):
        # Scatter on the leading axis: [DHW_in, B*C] += [DHW_out, B*C].
        go_mat = go.reshape(b_n * c, -1).T
        gflat = np.zeros((d_in * h_in * w_in, b_n * c), dtype=go.dtype)
        np.add.at(gflat, flat_in, go_mat)
        x5._accumulate(gflat.T.reshape(x5.data.shape))

    out = _node(out_data, (x5,), backward)
    return _maybe_strip_batch(out, squeezed)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.9, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalisation over (batch, spatial) positions.

    In training mode the batch statistics normalise the activations and the
    running buffers are updated in place as
    ``running = momentum * running + (1 - momentum) * batch`` (biased
    variance).  In eval mode the running buffers are used and are left
    untouched.
    """
    x5, squeezed = _with_batch(x)
    axes = (0, 2, 3, 4)
    c = x5.data.shape[1]
    brd = (1, c, 1, 1, 1)
    if training:
        count = x5.data.size // max(c, 1)
        if count <= 1:
            raise ConfigError(
                "batch normalisation in training mode needs more than one "
                f"value per channel, got batch x spatial = {count} for input "
                f"{x5.data.shape}; with a single value the normalised "
                "activation is identically zero and no gradient can flow — "
                "increase the batch or the spatial extents")
        mean = x5.data.mean(axis=axes)
        var = x5.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mean = running_mean
        var = running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x5.data - mean.reshape(brd)) * inv_std.reshape(brd)
    out_data = xhat * gamma.data.reshape(brd) + beta.data.reshape(brd)

    def backward(go):
        if gamma.requires_grad:
            gamma._accumulate((go * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta._accumulate(go.sum(axis=axes))
        if x5.requires_grad:
            gxhat = go * gamma.data.reshape(brd)
            if training:
                mean_g = gxhat.mean(axis=axes, keepdims=True)
                mean_gx = (gxhat * xhat).mean(axis=axes, keepdims=True)
                gx = (gxhat - mean_g - xhat * mean_gx) * inv_std.reshape(brd)
            else:
                gx = gxhat * inv_std.reshape(brd)
            x5._accumulate(gx)

    out = _node(out_data, (x5, gamma, beta), backward)
    return _maybe_strip_batch(out, squeezed)
