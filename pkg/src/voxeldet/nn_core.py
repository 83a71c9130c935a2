"""Dense tensor engine with reverse-mode differentiation.

Everything runs on float64 numpy arrays. A :class:`Tensor` wraps a value
buffer plus an optional gradient buffer; operations record closures that
accumulate gradients when :meth:`Tensor.backward` is called on a scalar.
Feature maps follow the (batch, channel, height, width) layout; sparse
voxel features travel through the same engine as (sites, channels)
matrices.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

# Columns per im2col chunk; keeps the scratch buffer under ~128 MB for
# full-resolution BEV maps.
_IM2COL_CHUNK = 16 * 1024 * 1024


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """A float64 array with an optional gradient slot.

    Tensors produced by engine operations remember their parents and a
    backward closure; leaves created with ``requires_grad=True`` collect
    gradients.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- autodiff ------------------------------------------------------------

    def backward(self):
        """Reverse-mode accumulation from a scalar output.

        The recorded graph is released afterwards (closures capture their
        inputs, which would otherwise pin every intermediate buffer through
        reference cycles); leaves keep their gradients.
        """
        if self.size != 1:
            raise ValueError(f"backward requires a scalar, got shape {self.shape}")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward()
        for node in order:
            if node._parents:
                node._backward = None
                node._parents = ()
                if node is not self:
                    node.grad = None

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -_wrap(other))

    def __rsub__(self, other):
        return add(_wrap(other), -self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _toposort(root: Tensor) -> list[Tensor]:
    # Iterative DFS; graphs can chain a few hundred ops deep.
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


_GRAD_ENABLED = True


class no_grad:
    """Context manager: ops record no graph inside (inference paths)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._saved = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._saved
        return False


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    """Assemble an op output; ``backward`` may be None for constant results."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# -- elementwise arithmetic ----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data + b.data

    def backward():
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(out.grad, b.shape))

    out = _node(out_data, (a, b), backward)
    return out


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data * b.data

    def backward():
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(out.grad * a.data, b.shape))

    out = _node(out_data, (a, b), backward)
    return out


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data / b.data

    def backward():
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-out.grad * a.data / (b.data * b.data), b.shape))

    out = _node(out_data, (a, b), backward)
    return out


def power(a, p: float) -> Tensor:
    a = _wrap(a)
    out_data = a.data ** p

    def backward():
        a._accumulate(out.grad * p * a.data ** (p - 1))

    out = _node(out_data, (a,), backward)
    return out


def exp(a) -> Tensor:
    a = _wrap(a)
    out_data = np.exp(a.data)

    def backward():
        a._accumulate(out.grad * out_data)

    out = _node(out_data, (a,), backward)
    return out


def log(a) -> Tensor:
    a = _wrap(a)
    out_data = np.log(a.data)

    def backward():
        a._accumulate(out.grad / a.data)

    out = _node(out_data, (a,), backward)
    return out


def absolute(a) -> Tensor:
    a = _wrap(a)
    out_data = np.abs(a.data)

    def backward():
        a._accumulate(out.grad * np.sign(a.data))

    out = _node(out_data, (a,), backward)
    return out


def clamp(a, lo: float, hi: float) -> Tensor:
    a = _wrap(a)
    out_data = np.clip(a.data, lo, hi)

    def backward():
        mask = (a.data >= lo) & (a.data <= hi)
        a._accumulate(out.grad * mask)

    out = _node(out_data, (a,), backward)
    return out


def relu(a) -> Tensor:
    a = _wrap(a)
    out_data = np.maximum(a.data, 0.0)

    def backward():
        a._accumulate(out.grad * (a.data > 0))

    out = _node(out_data, (a,), backward)
    return out


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    x = a.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def backward():
        a._accumulate(out.grad * out_data * (1.0 - out_data))

    out = _node(out_data, (a,), backward)
    return out


def softmax(a, axis: int = 1) -> Tensor:
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward():
        g = out.grad
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        a._accumulate(out_data * (g - dot))

    out = _node(out_data, (a,), backward)
    return out


def logsumexp(a, axis: int = 1, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out_data = m + np.log(s)
    if not keepdims:
        out_data = np.squeeze(out_data, axis=axis)

    def backward():
        g = out.grad
        if not keepdims:
            g = np.expand_dims(g, axis=axis)
        a._accumulate(g * (e / s))

    out = _node(out_data, (a,), backward)
    return out


# -- reductions and shape ops ----------------------------------------------------


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis=axis)
        a._accumulate(np.broadcast_to(g, a.shape).copy())

    out = _node(np.asarray(out_data), (a,), backward)
    return out


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    scale = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return reduce_sum(a, axis, keepdims) * (1.0 / float(scale))


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    out_data = a.data.reshape(shape)

    def backward():
        a._accumulate(out.grad.reshape(a.shape))

    out = _node(out_data, (a,), backward)
    return out


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Slice ``length`` entries along ``axis`` starting at ``start``."""
    a = _wrap(a)
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out_data = a.data[index].copy()

    def backward():
        g = np.zeros_like(a.data)
        g[index] = out.grad
        a._accumulate(g)

    out = _node(out_data, (a,), backward)
    return out


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward():
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                index = [slice(None)] * out.grad.ndim
                index[axis] = slice(lo, hi)
                t._accumulate(out.grad[tuple(index)])

    out = _node(out_data, tuple(tensors), backward)
    return out


def concat_channels(tensors) -> Tensor:
    return concat(tensors, axis=1)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data @ b.data

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ out.grad)

    out = _node(out_data, (a, b), backward)
    return out


# -- row gather / scatter (sparse feature plumbing) -------------------------------


def take_rows(a, index: np.ndarray) -> Tensor:
    a = _wrap(a)
    out_data = a.data[index]

    def backward():
        g = np.zeros_like(a.data)
        np.add.at(g, index, out.grad)
        a._accumulate(g)

    out = _node(out_data, (a,), backward)
    return out


def index_add_rows(a, index: np.ndarray, n_out: int) -> Tensor:
    """Scatter-add rows of ``a`` into ``n_out`` output rows at ``index``."""
    a = _wrap(a)
    out_data = np.zeros((n_out,) + a.shape[1:], dtype=np.float64)
    np.add.at(out_data, index, a.data)

    def backward():
        a._accumulate(out.grad[index])

    out = _node(out_data, (a,), backward)
    return out


# -- 2D feature-map operations -----------------------------------------------------


@dataclass(frozen=True)
class ConvSpec:
    """Shape contract for a 2D convolution layer."""

    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    bias: bool = True

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1 or self.dilation < 1:
            raise ValueError(f"invalid conv spec {self}")

    def out_size(self, n: int) -> int:
        eff = self.dilation * (self.kernel - 1) + 1
        return (n + 2 * self.padding - eff) // self.stride + 1


def _conv_indices(spec: ConvSpec, oh: int, ow: int):
    k, s, d = spec.kernel, spec.stride, spec.dilation
    ih = d * np.arange(k)[:, None, None, None] + s * np.arange(oh)[None, None, :, None]
    iw = d * np.arange(k)[None, :, None, None] + s * np.arange(ow)[None, None, None, :]
    ih = np.broadcast_to(ih, (k, k, oh, ow))
    iw = np.broadcast_to(iw, (k, k, oh, ow))
    return ih, iw


# flat gather indices keyed by (spec geometry, input spatial shape); small maps only
_FLAT_INDEX_CACHE: dict = {}
_FLAT_CACHE_LIMIT = 4_000_000


def _flat_conv_indices(spec: ConvSpec, c: int, h: int, w: int, oh: int, ow: int):
    key = (spec.kernel, spec.stride, spec.padding, spec.dilation, c, h, w)
    cached = _FLAT_INDEX_CACHE.get(key)
    if cached is None:
        hp, wp = h + 2 * spec.padding, w + 2 * spec.padding
        ih, iw = _conv_indices(spec, oh, ow)
        kk = spec.kernel * spec.kernel
        plane = (ih * wp + iw).reshape(kk, oh * ow)
        flat = plane[None, :, :] + (np.arange(c) * (hp * wp))[:, None, None]
        cached = flat.reshape(c * kk, oh * ow)
        _FLAT_INDEX_CACHE[key] = cached
    return cached


def conv2d(x, weight, bias, spec: ConvSpec) -> Tensor:
    """Cross-correlation with stride/padding/dilation.

    ``weight`` has shape (out_channels, in_channels, k, k); ``bias`` is a
    (out_channels,) tensor or None. The im2col scratch is chunked along
    output columns so large BEV maps stay within memory.
    """
    x, weight = _wrap(x), _wrap(weight)
    n, c, h, w = x.shape
    if c != spec.in_channels or weight.shape != (spec.out_channels, c, spec.kernel, spec.kernel):
        raise ValueError(
            f"conv2d shape mismatch: input {x.shape}, weight {weight.shape}, spec {spec}"
        )
    oh, ow = spec.out_size(h), spec.out_size(w)
    if oh < 1 or ow < 1:
        raise ValueError(f"conv2d output would be empty for input {x.shape} with {spec}")

    p = spec.padding
    xp = np.zeros((n, c, h + 2 * p, w + 2 * p))
    xp[:, :, p : p + h, p : p + w] = x.data
    w2 = weight.data.reshape(spec.out_channels, -1)

    ckk = c * spec.kernel * spec.kernel
    l_total = oh * ow
    small = ckk * l_total <= _FLAT_CACHE_LIMIT

    if small:
        if spec.stride == 1 and spec.dilation == 1:
            win = np.lib.stride_tricks.sliding_window_view(
                xp, (spec.kernel, spec.kernel), axis=(2, 3)
            )
            cols_full = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, ckk, l_total)
        else:
            flat = _flat_conv_indices(spec, c, h, w, oh, ow)
            cols_full = np.take(xp.reshape(n, -1), flat.reshape(-1), axis=1).reshape(
                n, ckk, l_total
            )
        out_data = np.matmul(w2, cols_full)
    else:
        ih, iw = _conv_indices(spec, oh, ow)
        kk = spec.kernel * spec.kernel
        chunk = max(1, _IM2COL_CHUNK // max(1, n * ckk))

        def _cols(lo, hi):
            block_h = ih.reshape(kk, l_total)[:, lo:hi]
            block_w = iw.reshape(kk, l_total)[:, lo:hi]
            return xp[:, :, block_h, block_w].reshape(n, ckk, hi - lo)

        out_data = np.empty((n, spec.out_channels, l_total))
        for lo in range(0, l_total, chunk):
            hi = min(lo + chunk, l_total)
            out_data[:, :, lo:hi] = np.matmul(w2, _cols(lo, hi))

    out_data = out_data.reshape(n, spec.out_channels, oh, ow)
    if bias is not None:
        bias = _wrap(bias)
        out_data = out_data + bias.data.reshape(1, -1, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward():
        g = out.grad.reshape(n, spec.out_channels, l_total)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2)))
        need_x = x.requires_grad
        need_w = weight.requires_grad
        if not (need_x or need_w):
            return
        hp, wp = xp.shape[2], xp.shape[3]
        if small:
            flat_idx = _flat_conv_indices(spec, c, h, w, oh, ow)
            if need_w:
                gw = np.tensordot(g, cols_full, axes=([0, 2], [0, 2]))
                weight._accumulate(gw.reshape(weight.shape))
            if need_x:
                dcols = np.matmul(w2.T, g)   # (n, ckk, l)
                offsets = (np.arange(n) * (c * hp * wp))[:, None, None]
                all_idx = (flat_idx[None, :, :] + offsets).reshape(-1)
                gxp = np.bincount(all_idx, weights=dcols.reshape(-1),
                                  minlength=xp.size).reshape(xp.shape)
                x._accumulate(gxp[:, :, p : p + h, p : p + w])
            return
        gw = np.zeros((spec.out_channels, ckk)) if need_w else None
        gxp = np.zeros_like(xp) if need_x else None
        kk = spec.kernel * spec.kernel
        ih, iw = _conv_indices(spec, oh, ow)
        chunk = max(1, _IM2COL_CHUNK // max(1, n * ckk))
        for lo in range(0, l_total, chunk):
            hi = min(lo + chunk, l_total)
            block_h = ih.reshape(kk, l_total)[:, lo:hi]
            block_w = iw.reshape(kk, l_total)[:, lo:hi]
            cols = xp[:, :, block_h, block_w].reshape(n, ckk, hi - lo)
            gc = g[:, :, lo:hi]
            if need_w:
                gw += np.tensordot(gc, cols, axes=([0, 2], [0, 2]))
            if need_x:
                dcols = np.matmul(w2.T, gc)
                flat = (block_h * wp + block_w)[None, :, :] + (
                    np.arange(c)[:, None, None] * (hp * wp)
                )
                flat = np.broadcast_to(flat.reshape(1, ckk, hi - lo), dcols.shape)
                flat = (flat + (np.arange(n) * (c * hp * wp))[:, None, None]).reshape(-1)
                gxp += np.bincount(
                    flat, weights=dcols.reshape(-1), minlength=gxp.size
                ).reshape(gxp.shape)
        if need_w:
            weight._accumulate(gw.reshape(weight.shape))
        if need_x:
            x._accumulate(gxp[:, :, p : p + h, p : p + w])

    out = _node(out_data, parents, backward)
    return out


def maxpool2(x) -> Tensor:
    """2x2 max pooling with stride 2; trailing odd rows/columns are dropped."""
    x = _wrap(x)
    n, c, h, w = x.shape
    oh, ow = h // 2, w // 2
    if oh < 1 or ow < 1:
        raise ValueError(f"maxpool2 needs spatial dims >= 2, got {x.shape}")
    view = x.data[:, :, : 2 * oh, : 2 * ow].reshape(n, c, oh, 2, ow, 2)
    windows = view.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, 4)
    arg = windows.argmax(axis=-1)
    out_data = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def backward():
        g = np.zeros((n, c, oh, ow, 4))
        np.put_along_axis(g, arg[..., None], out.grad[..., None], axis=-1)
        g = g.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        gx = np.zeros_like(x.data)
        gx[:, :, : 2 * oh, : 2 * ow] = g.reshape(n, c, 2 * oh, 2 * ow)
        x._accumulate(gx)

    out = _node(out_data, (x,), backward)
    return out


def upsample_nearest2(x) -> Tensor:
    """Double both spatial dims by replication."""
    x = _wrap(x)
    out_data = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward():
        n, c, h2, w2 = out.grad.shape
        g = out.grad.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))
        x._accumulate(g)

    out = _node(out_data, (x,), backward)
    return out


def batch_norm(x, gamma, beta, state: "BatchNormState", training: bool,
               momentum: float = 0.99, eps: float = 1e-5) -> Tensor:
    """Normalize over all axes except channel axis 1.

    Training mode uses batch statistics and folds them into ``state``'s
    running estimates; eval mode reads the running estimates.
    """
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    c = x.shape[1]
    axes = tuple(ax for ax in range(x.ndim) if ax != 1)
    pshape = tuple(c if ax == 1 else 1 for ax in range(x.ndim))
    gamma_b = gamma.data.reshape(pshape)
    beta_b = beta.data.reshape(pshape)

    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        state.running_mean[:] = momentum * state.running_mean + (1 - momentum) * mean
        state.running_var[:] = momentum * state.running_var + (1 - momentum) * var
    else:
        mean, var = state.running_mean, state.running_var

    ivar = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(pshape)) * ivar.reshape(pshape)
    out_data = gamma_b * xhat + beta_b

    def backward():
        g = out.grad
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes))
        if not x.requires_grad:
            return
        gxhat = g * gamma_b
        iv = ivar.reshape(pshape)
        if training:
            m = x.data.size // c
            xc = x.data - mean.reshape(pshape)
            gvar = (gxhat * xc).sum(axis=axes, keepdims=True) * (-0.5) * iv ** 3
            gmean = (-gxhat * iv).sum(axis=axes, keepdims=True) + gvar * (
                -2.0 * xc.sum(axis=axes, keepdims=True) / m
            )
            gx = gxhat * iv + gvar * 2.0 * xc / m + gmean / m
        else:
            gx = gxhat * iv
        x._accumulate(gx)

    out = _node(out_data, (x, gamma, beta), backward)
    return out


# -- parameter containers -----------------------------------------------------------


class BatchNormState:
    """Running statistics shared by train and eval passes."""

    def __init__(self, channels: int):
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)


class Module:
    """Minimal layer base: named parameters, buffers, train/eval mode."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: dict[str, Module] = {}
        self.training = True

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self.__dict__.setdefault("_children", {})[name] = value
        object.__setattr__(self, name, value)

    def register_parameter(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True)
        self._params[name] = t
        return t

    def register_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        self._buffers[name] = value
        return value

    def add_module(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def train(self, mode: bool = True):
        self.training = mode
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + name: t for name, t in self._params.items()}
        for cname, child in self._children.items():
            out.update(child.named_parameters(prefix + cname + "."))
        return out

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {prefix + name: b for name, b in self._buffers.items()}
        for cname, child in self._children.items():
            out.update(child.named_buffers(prefix + cname + "."))
        return out

    def zero_grad(self):
        for t in self.named_parameters().values():
            t.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: t.data for name, t in self.named_parameters().items()}
        out.update(self.named_buffers())
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = self.named_parameters()
        buffers = self.named_buffers()
        known = set(params) | set(buffers)
        missing = known - set(state)
        extra = set(state) - known
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, t in params.items():
            if t.data.shape != state[name].shape:
                raise ValueError(f"shape mismatch for {name}")
            t.data[...] = state[name]
        for name, b in buffers.items():
            b[...] = state[name]


def he_normal(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    """Kaiming-style normal init scaled by 1/sqrt(fan_in)."""
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Conv2d(Module):
    def __init__(self, spec: ConvSpec, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        fan_in = spec.in_channels * spec.kernel * spec.kernel
        shape = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
        self.weight = self.register_parameter("weight", he_normal(rng, shape, fan_in))
        self.bias = (
            self.register_parameter("bias", np.zeros(spec.out_channels)) if spec.bias else None
        )

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.spec)


class BatchNorm(Module):
    """Batch normalization over all axes except channels (axis 1)."""

    def __init__(self, channels: int, momentum: float = 0.99, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = self.register_parameter("gamma", np.ones(channels))
        self.beta = self.register_parameter("beta", np.zeros(channels))
        self.state = BatchNormState(channels)
        self.register_buffer("running_mean", self.state.running_mean)
        self.register_buffer("running_var", self.state.running_var)

    def __call__(self, x: Tensor) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.state, self.training,
                          self.momentum, self.eps)


class AdamW:
    """Decoupled weight-decay Adam over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float, weight_decay: float = 0.01,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 no_decay: tuple[str, ...] = ("bias", "gamma", "beta")):
        self.params = dict(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.no_decay = no_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= self.lr * update
            if self.weight_decay and not name.split(".")[-1] in self.no_decay:
                p.data -= self.lr * self.weight_decay * p.data


# -- checkpoint format ---------------------------------------------------------------
#
# A checkpoint is a flat sequence of records, one per named tensor:
#   u32 LE  name length in bytes
#   bytes   UTF-8 name
#   u32 LE  rank
#   u64 LE  dims[rank]
#   f64 LE  values (C order)


def save_checkpoint(path, tensors: dict[str, np.ndarray]):
    with open(path, "wb") as f:
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype=np.float64)
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.astype("<f8").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    tensors = {}
    with open(path, "rb") as f:
        data = f.read()
    pos = 0
    while pos < len(data):
        if pos + 4 > len(data):
            raise ValueError("truncated checkpoint: bad name header")
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}Q", data, pos)
        pos += 8 * rank
        count = int(np.prod(dims)) if rank else 1
        end = pos + 8 * count
        if end > len(data):
            raise ValueError(f"truncated checkpoint: tensor {name!r}")
        tensors[name] = np.frombuffer(data[pos:end], dtype="<f8").reshape(dims).copy()
        pos = end
    return tensors
