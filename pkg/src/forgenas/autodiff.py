"""Minimal dense tensors with reverse-mode automatic differentiation.

Everything is dense numpy under the hood, float64 by default (see
``using_dtype`` for the float32 fast path). A Tensor produced by an
operation remembers its parents and a closure that routes the output
gradient back to them; ``backward()`` on a scalar loss replays the tape
in reverse topological order. Gradients are written to ``.grad`` on every
node reached by the sweep (intermediate activations included, which the
class-activation-map code relies on).
"""

from __future__ import annotations

import contextlib

import numpy as np

_grad_enabled = True
_default_dtype = np.float64


def default_dtype():
    """Dtype newly constructed Tensors are cast to (float64 by default)."""
    return _default_dtype


@contextlib.contextmanager
def using_dtype(dtype):
    """Switch the default Tensor dtype inside the block.

    float32 roughly halves memory traffic, which dominates the cost of the
    convolution heavy search/training loops; float64 stays the default so
    finite-difference gradient checks keep full precision.
    """
    global _default_dtype
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported tensor dtype {dtype!r}")
    prev = _default_dtype
    _default_dtype = dt.type
    try:
        yield
    finally:
        _default_dtype = prev


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (probe/eval forwards)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward",
                 "_backward_done")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_default_dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._backward_done = False

    # -- construction helpers -------------------------------------------

    @staticmethod
    def _make(data, parents, backward_fn):
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward_fn
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- elementwise arithmetic ------------------------------------------

    @staticmethod
    def _coerce(other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other)

    def __add__(self, other):
        other = self._coerce(other)
        out_data = self.data + other.data

        def bwd(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g, other.data.shape))

        return Tensor._make(out_data, (self, other), bwd)

    __radd__ = __add__

    def __neg__(self):
        def bwd(g):
            if self.requires_grad:
                self._accum(-g)

        return Tensor._make(-self.data, (self,), bwd)

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) + (-self)

    def __mul__(self, other):
        other = self._coerce(other)
        out_data = self.data * other.data

        def bwd(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g * self.data, other.data.shape))

        return Tensor._make(out_data, (self, other), bwd)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        return self * other.pow(-1.0)

    def __rtruediv__(self, other):
        return self._coerce(other) * self.pow(-1.0)

    def pow(self, exponent: float):
        """Elementwise power with a constant exponent."""
        out_data = self.data ** exponent
        base = self.data

        def bwd(g):
            if self.requires_grad:
                self._accum(g * exponent * base ** (exponent - 1.0))

        return Tensor._make(out_data, (self,), bwd)

    __pow__ = pow

    def exp(self):
        out_data = np.exp(self.data)

        def bwd(g):
            if self.requires_grad:
                self._accum(g * out_data)

        return Tensor._make(out_data, (self,), bwd)

    def log(self):
        def bwd(g):
            if self.requires_grad:
                self._accum(g / self.data)

        return Tensor._make(np.log(self.data), (self,), bwd)

    def relu(self):
        mask = self.data > 0

        def bwd(g):
            if self.requires_grad:
                self._accum(g * mask)

        return Tensor._make(self.data * mask, (self,), bwd)

    # -- reductions / shape ----------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)
        in_shape = self.data.shape

        def bwd(g):
            if not self.requires_grad:
                return
            if axis is None:
                self._accum(np.full(in_shape, g, dtype=self.data.dtype))
            else:
                if not keepdims:
                    axes = axis if isinstance(axis, tuple) else (axis,)
                    g = np.expand_dims(g, tuple(a % len(in_shape) for a in axes))
                self._accum(np.broadcast_to(g, in_shape).copy())

        return Tensor._make(out_data, (self,), bwd)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = 1
            for a in axes:
                n *= self.data.shape[a]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        in_shape = self.data.shape

        def bwd(g):
            if self.requires_grad:
                self._accum(g.reshape(in_shape))

        return Tensor._make(self.data.reshape(shape), (self,), bwd)

    def __getitem__(self, key):
        in_shape = self.data.shape

        def bwd(g):
            if self.requires_grad:
                full = np.zeros(in_shape, dtype=self.data.dtype)
                full[key] = g
                self._accum(full)

        return Tensor._make(self.data[key], (self,), bwd)

    def matmul(self, other: "Tensor"):
        out_data = self.data @ other.data

        def bwd(g):
            if self.requires_grad:
                self._accum(g @ other.data.T)
            if other.requires_grad:
                other._accum(self.data.T @ g)

        return Tensor._make(out_data, (self, other), bwd)

    __matmul__ = matmul

    # -- autodiff plumbing -------------------------------------------------

    def _accum(self, g: np.ndarray):
        if self.grad is None:
            self.grad = g.copy() if isinstance(g, np.ndarray) \
                else np.asarray(g, dtype=self.data.dtype)
        else:
            self.grad = self.grad + g

    def backward(self, retain_grads: bool = False):
        """Reverse-mode sweep from a scalar loss.

        Unless retain_grads is set, gradients of interior nodes are released
        as soon as they have been propagated, and the tape is dismantled so
        activations can be reclaimed during the sweep.
        """
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss, got shape "
                             f"{self.data.shape}")
        if self._backward_done:
            raise RuntimeError("backward() already called on this tape; "
                               "rebuild the graph before differentiating again")
        self._backward_done = True

        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if not retain_grads:
                if node._backward is not None:
                    # interior node: drop its gradient and detach the tape
                    node.grad = None
                node._backward = None
                node._parents = ()


# -- convolution and pooling primitives -----------------------------------


def _conv_out_size(extent, k, stride, padding, dilation):
    return (extent + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _pad2d(img, padding, fill=0.0):
    """Spatial zero/constant padding (faster than np.pad for this layout)."""
    n, c, h, w = img.shape
    out = np.full((n, c, h + 2 * padding, w + 2 * padding), fill,
                  dtype=img.dtype)
    out[:, :, padding:padding + h, padding:padding + w] = img
    return out


def _im2col(img, kh, kw, stride, padding, dilation, oh, ow):
    n, c, _, _ = img.shape
    if padding:
        img = _pad2d(img, padding)
    col = np.empty((n, c, kh, kw, oh, ow), dtype=img.dtype)
    for y in range(kh):
        y0 = y * dilation
        for x in range(kw):
            x0 = x * dilation
            col[:, :, y, x] = img[:, :, y0:y0 + stride * oh:stride,
                                  x0:x0 + stride * ow:stride]
    return col


def _col2im(col, in_shape, kh, kw, stride, padding, dilation, oh, ow):
    n, c, h, w = in_shape
    img = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=col.dtype)
    for y in range(kh):
        y0 = y * dilation
        for x in range(kw):
            x0 = x * dilation
            img[:, :, y0:y0 + stride * oh:stride,
                x0:x0 + stride * ow:stride] += col[:, :, y, x]
    if padding:
        img = img[:, :, padding:padding + h, padding:padding + w]
    return img


def _conv2d_depthwise(x: Tensor, weight: Tensor, stride, padding, dilation,
                      oh, ow) -> Tensor:
    """One-channel-per-group convolution as shifted multiply-accumulates,
    avoiding the im2col buffer entirely."""
    n, c, h, w = x.shape
    _, _, kh, kw = weight.shape
    img = x.data
    if padding:
        img = _pad2d(img, padding)
    out = np.zeros((n, c, oh, ow), dtype=img.dtype)
    wd = weight.data
    for y in range(kh):
        y0 = y * dilation
        for xx in range(kw):
            x0 = xx * dilation
            out += img[:, :, y0:y0 + stride * oh:stride,
                       x0:x0 + stride * ow:stride] \
                * wd[:, 0, y, xx][None, :, None, None]

    def bwd(g):
        img_b = x.data
        if padding:
            img_b = _pad2d(img_b, padding)
        if weight.requires_grad:
            gw = np.empty_like(wd)
            for y in range(kh):
                y0 = y * dilation
                for xx in range(kw):
                    x0 = xx * dilation
                    gw[:, 0, y, xx] = (
                        g * img_b[:, :, y0:y0 + stride * oh:stride,
                                  x0:x0 + stride * ow:stride]).sum(axis=(0, 2, 3))
            weight._accum(gw)
        if x.requires_grad:
            gx = np.zeros((n, c, h + 2 * padding, w + 2 * padding),
                          dtype=g.dtype)
            for y in range(kh):
                y0 = y * dilation
                for xx in range(kw):
                    x0 = xx * dilation
                    gx[:, :, y0:y0 + stride * oh:stride,
                       x0:x0 + stride * ow:stride] \
                        += g * wd[:, 0, y, xx][None, :, None, None]
            if padding:
                gx = gx[:, :, padding:padding + h, padding:padding + w]
            x._accum(gx)

    return Tensor._make(out, (x, weight), bwd)


def _conv2d_pointwise(x: Tensor, weight: Tensor, oh, ow) -> Tensor:
    """1x1 stride-1 convolution as a single matrix product (no im2col)."""
    n, c, _, _ = x.shape
    o = weight.shape[0]
    xr = x.data.reshape(n, c, oh * ow)
    wr = weight.data.reshape(o, c)
    out = (wr @ xr).reshape(n, o, oh, ow)

    def bwd(g):
        gr = g.reshape(n, o, oh * ow)
        if weight.requires_grad:
            gw = np.einsum("nop,ncp->oc", gr, x.data.reshape(n, c, oh * ow),
                           optimize=True)
            weight._accum(gw.reshape(o, c, 1, 1))
        if x.requires_grad:
            x._accum((wr.T @ gr).reshape(n, c, oh, ow))

    return Tensor._make(out, (x, weight), bwd)


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0,
           dilation: int = 1, groups: int = 1) -> Tensor:
    """Grouped 2D cross-correlation, NCHW layout."""
    n, c, h, w = x.shape
    o, cg, kh, kw = weight.shape
    if c % groups != 0 or o % groups != 0:
        raise ValueError(f"channels {c}/{o} not divisible by groups={groups}")
    if cg != c // groups:
        raise ValueError(f"kernel expects {cg} in-channels per group, input has "
                         f"{c // groups}")
    oh = _conv_out_size(h, kh, stride, padding, dilation)
    ow = _conv_out_size(w, kw, stride, padding, dilation)
    if oh < 1 or ow < 1:
        raise ValueError(f"non-positive output extent {oh}x{ow} for input "
                         f"{h}x{w}, kernel {kh}x{kw}, stride {stride}, "
                         f"padding {padding}, dilation {dilation}")
    if groups == c and o == c and cg == 1:
        return _conv2d_depthwise(x, weight, stride, padding, dilation, oh, ow)
    if kh == 1 and kw == 1 and groups == 1 and stride == 1 and padding == 0:
        return _conv2d_pointwise(x, weight, oh, ow)

    col = _im2col(x.data, kh, kw, stride, padding, dilation, oh, ow)
    colr = col.reshape(n, groups, cg * kh * kw, oh * ow)
    wr = weight.data.reshape(groups, o // groups, cg * kh * kw)
    out = (wr[None] @ colr).reshape(n, o, oh, ow)
    del col, colr  # recomputed in backward; keeping it would dominate memory

    def bwd(g):
        gr = g.reshape(n, groups, o // groups, oh * ow)
        colr_b = _im2col(x.data, kh, kw, stride, padding, dilation, oh, ow) \
            .reshape(n, groups, cg * kh * kw, oh * ow)
        if weight.requires_grad:
            gw = (gr @ colr_b.transpose(0, 1, 3, 2)).sum(axis=0)
            weight._accum(gw.reshape(o, cg, kh, kw))
        if x.requires_grad:
            gcol = (wr.transpose(0, 2, 1)[None] @ gr) \
                .reshape(n, c, kh, kw, oh, ow)
            x._accum(_col2im(gcol, x.shape, kh, kw, stride, padding, dilation,
                             oh, ow))

    return Tensor._make(out, (x, weight), bwd)


def max_pool2d(x: Tensor, kernel: int = 3, stride: int = 1,
               padding: int = 1) -> Tensor:
    n, c, h, w = x.shape
    oh = _conv_out_size(h, kernel, stride, padding, 1)
    ow = _conv_out_size(w, kernel, stride, padding, 1)
    img = x.data
    if padding:
        img = np.pad(img, ((0, 0), (0, 0), (padding, padding),
                           (padding, padding)), constant_values=-np.inf)
    col = np.empty((n, c, kernel * kernel, oh, ow), dtype=img.dtype)
    i = 0
    for y in range(kernel):
        for xx in range(kernel):
            col[:, :, i] = img[:, :, y:y + stride * oh:stride,
                               xx:xx + stride * ow:stride]
            i += 1
    arg = col.argmax(axis=2)
    out = np.take_along_axis(col, arg[:, :, None], axis=2)[:, :, 0]

    def bwd(g):
        if not x.requires_grad:
            return
        gcol = np.zeros((n, c, kernel * kernel, oh, ow), dtype=g.dtype)
        np.put_along_axis(gcol, arg[:, :, None], g[:, :, None], axis=2)
        gcol = gcol.reshape(n, c, kernel, kernel, oh, ow)
        x._accum(_col2im(gcol, x.shape, kernel, kernel, stride, padding, 1,
                         oh, ow))

    return Tensor._make(out, (x,), bwd)


def avg_pool2d(x: Tensor, kernel: int = 2, stride: int = 2) -> Tensor:
    n, c, h, w = x.shape
    oh = _conv_out_size(h, kernel, stride, 0, 1)
    ow = _conv_out_size(w, kernel, stride, 0, 1)
    col = _im2col(x.data, kernel, kernel, stride, 0, 1, oh, ow)
    out = col.mean(axis=(2, 3))
    inv = 1.0 / (kernel * kernel)

    def bwd(g):
        if not x.requires_grad:
            return
        gcol = np.broadcast_to(g[:, :, None, None] * inv,
                               (n, c, kernel, kernel, oh, ow))
        x._accum(_col2im(gcol, x.shape, kernel, kernel, stride, 0, 1, oh, ow))

    return Tensor._make(out, (x,), bwd)


def concat(tensors, axis: int = 1) -> Tensor:
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, a, b in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(a, b)
                t._accum(g[tuple(idx)])

    return Tensor._make(out, tuple(tensors), bwd)


# -- composite numerics ----------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x - Tensor(x.data.max(axis=axis, keepdims=True))
    e = shifted.exp()
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x - Tensor(x.data.max(axis=axis, keepdims=True))
    return shifted - shifted.exp().sum(axis=axis, keepdims=True).log()


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k})")
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    lsm = log_softmax(logits, axis=1)
    return -(lsm * Tensor(onehot)).sum() * (1.0 / n)


def batch_norm(x: Tensor, gamma: Tensor | None, beta: Tensor | None,
               running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, eps: float = 1e-5,
               momentum: float = 0.1) -> Tensor:
    """Per-channel normalization over (N, H, W); updates running stats in place."""
    n, c, h, w = x.shape
    if training:
        if n * h * w < 2:
            raise ValueError("batch_norm training mode needs >= 2 elements "
                             "per channel")
        axes = (0, 2, 3)
        mu = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        inv = (var + eps) ** -0.5
        xhat_data = (x.data - mu) * inv
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(c)
        running_var *= 1.0 - momentum
        running_var += momentum * var.reshape(c)
        out = xhat_data if gamma is None \
            else xhat_data * gamma.data + beta.data

        def bwd(g):
            if gamma is not None:
                if gamma.requires_grad:
                    gamma._accum((g * xhat_data).sum(axis=axes, keepdims=True))
                if beta.requires_grad:
                    beta._accum(g.sum(axis=axes, keepdims=True))
                gx_hat = g * gamma.data
            else:
                gx_hat = g
            if x.requires_grad:
                corr = (gx_hat * xhat_data).mean(axis=axes, keepdims=True)
                x._accum(inv * (gx_hat - gx_hat.mean(axis=axes, keepdims=True)
                                - xhat_data * corr))

        parents = (x,) if gamma is None else (x, gamma, beta)
        return Tensor._make(out, parents, bwd)
    else:
        rm = Tensor(running_mean.reshape(1, c, 1, 1))
        rv = running_var.reshape(1, c, 1, 1)
        xhat = (x - rm) * Tensor((rv + eps) ** -0.5)
    if gamma is not None:
        xhat = xhat * gamma + beta
    return xhat


def global_avg_pool(x: Tensor) -> Tensor:
    """[N, C, H, W] -> [N, C]."""
    n, c, _, _ = x.shape
    return x.mean(axis=(2, 3)).reshape(n, c)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = x @ weight
    if bias is not None:
        out = out + bias
    return out
