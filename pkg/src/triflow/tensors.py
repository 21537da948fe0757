"""Dense float32 tensor substrate with a small reverse-mode tape.

Every array the network touches lives in a :class:`Tensor`. Operations are
plain functions that return new tensors; when any input requires a gradient
the result remembers its parents and a closure that maps the output gradient
back onto them. Only the operations the flow network needs are provided.

Live tensor bytes are tracked by :data:`ALLOC`, which gives deterministic
peak-memory numbers that can be compared with closed-form models.
"""

from __future__ import annotations

import contextlib
import math
import threading
import weakref
from collections import defaultdict
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float32


class _State(threading.local):
    # per thread, so parallel inference cannot leak no_grad or precision into other threads
    def __init__(self):
        self.dtype = DTYPE
        self.grad_enabled = True


_state = _State()


def compute_dtype():
    """Float type new tensors are stored in (float32 unless inside :func:`precision`)."""
    return _state.dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily store new tensors in ``dtype``; used for float64 verification runs."""
    prev = _state.dtype
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class UnsupportedError(ValueError):
    """Raised for parameter values outside what the substrate implements."""


class AllocationCounter:
    """Byte counter for live tensor payloads, optionally bucketed by tag."""

    def __init__(self) -> None:
        # re-entrant: a finaliser may free a tensor while this thread is inside _alloc
        self._lock = threading.RLock()
        self.reset()

    def reset(self) -> None:
        self.live = 0
        self.peak = 0
        self.live_by_tag: dict[str, int] = defaultdict(int)
        self.peak_by_tag: dict[str, int] = defaultdict(int)

    def reset_peak(self) -> None:
        self.peak = self.live
        for tag, n in self.live_by_tag.items():
            self.peak_by_tag[tag] = n

    def _alloc(self, nbytes: int, tag: str | None) -> None:
        with self._lock:
            self._add(nbytes, tag)

    def _free(self, nbytes: int, tag: str | None) -> None:
        with self._lock:
            self.live -= nbytes
            if tag is not None:
                self.live_by_tag[tag] -= nbytes

    def _add(self, nbytes: int, tag: str | None) -> None:
        self.live += nbytes
        if self.live > self.peak:
            self.peak = self.live
        if tag is not None:
            self.live_by_tag[tag] += nbytes
            if self.live_by_tag[tag] > self.peak_by_tag[tag]:
                self.peak_by_tag[tag] = self.live_by_tag[tag]


ALLOC = AllocationCounter()

@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (for the calling thread)."""
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "tag", "__weakref__")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: Sequence["Tensor"] = (),
        backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
        tag: str | None = None,
    ) -> None:
        arr = np.ascontiguousarray(data, dtype=_state.dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = tuple(parents)
        self._backward = backward
        self.tag = tag
        nbytes = arr.nbytes
        ALLOC._alloc(nbytes, tag)
        weakref.finalize(self, ALLOC._free, nbytes, tag)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
        if grad is None:
            if self.size != 1:
                raise ShapeError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=_state.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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


def tensor(data, requires_grad: bool = False, tag: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=_state.dtype), requires_grad=requires_grad, tag=tag)


def zeros(shape: Iterable[int], tag: str | None = None) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=_state.dtype), tag=tag)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_state.dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, tag: str | None = None) -> Tensor:
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, backward=backward, tag=tag)
    return Tensor(data, tag=tag)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def abs(x: Tensor) -> Tensor:  # noqa: A001
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def relu(x: Tensor) -> Tensor:
    return _make(np.maximum(x.data, 0), (x,), lambda g: (g * (x.data > 0),))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1 / (1 + e), e / (1 + e)).astype(_state.dtype)
    return _make(out, (x,), lambda g: (g * out * (1 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1 - out * out),))


def softmax(x: Tensor, axis: int = 0) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward)


# ---------------------------------------------------------------- reductions / shape


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=_state.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(_state.dtype),)

    return _make(out, (x,), backward)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis), 1.0 / float(n))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _make(
        np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),)
    )


def getitem(x: Tensor, index) -> Tensor:
    def backward(g):
        full = np.zeros(x.shape, dtype=_state.dtype)
        if _is_fancy(index):
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return _make(np.array(x.data[index], dtype=_state.dtype), (x,), backward)


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_wrap(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs))
        )

    return _make(np.concatenate([x.data for x in xs], axis=axis), xs, backward)


def split(x: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    out = []
    start = 0
    for n in sizes:
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(start, start + n)
        out.append(getitem(x, tuple(idx)))
        start += n
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not align")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


# ---------------------------------------------------------------- convolution


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Cross-correlate ``x`` (C, H, W) with ``kernel`` (O, C, kh, kw)."""
    if stride < 1 or padding < 0:
        raise UnsupportedError("stride must be >= 1 and padding >= 0")
    if x.ndim != 3 or kernel.ndim != 4:
        raise ShapeError("conv2d expects input (C, H, W) and kernel (O, C, kh, kw)")
    c, h, w = x.shape
    o, kc, kh, kw = kernel.shape
    if kc != c:
        raise ShapeError(f"input has {c} channels, kernel expects {kc}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError("kernel larger than padded input")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride][:, :ho, :wo]  # (C, ho, wo, kh, kw)
    cols = np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(c * kh * kw, ho * wo)
    kmat = kernel.data.reshape(o, c * kh * kw)
    out = (kmat @ cols).reshape(o, ho, wo)
    if bias is not None:
        out = out + bias.data.reshape(o, 1, 1)

    def backward(g):
        g2 = g.reshape(o, ho * wo)
        gk = (g2 @ cols.T).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (kmat.T @ g2).reshape(c, kh, kw, ho, wo)
            gxp = np.zeros(xp.shape, dtype=_state.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, i, j]
            gx = gxp[:, padding : padding + h, padding : padding + w] if padding else gxp
        gb = g.sum(axis=(1, 2)) if bias is not None and bias.requires_grad else None
        return (gx, gk, gb)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, parents, backward)


# ---------------------------------------------------------------- pooling


def avg_pool2d(x: Tensor, window: int = 2, tag: str | None = None) -> Tensor:
    """Non-overlapping mean over the last two axes.

    Odd trailing rows/columns are replicated first, so the output has
    ``ceil(n / 2)`` entries along each pooled axis.
    """
    if window != 2:
        raise UnsupportedError("only window=2 is supported")
    if x.ndim < 2 or x.shape[-2] < 1 or x.shape[-1] < 1:
        raise ShapeError("avg_pool2d needs two trailing spatial axes")
    h, w = x.shape[-2:]
    ph, pw = h % 2, w % 2
    d = x.data
    if ph or pw:
        pad = [(0, 0)] * (d.ndim - 2) + [(0, ph), (0, pw)]
        d = np.pad(d, pad, mode="edge")
    lead = d.shape[:-2]
    ho, wo = d.shape[-2] // 2, d.shape[-1] // 2
    blocks = d.reshape(*lead, ho, 2, wo, 2)
    out = (blocks[..., 0, :, 0] + blocks[..., 0, :, 1] + blocks[..., 1, :, 0] + blocks[..., 1, :, 1]) * _state.dtype(0.25)

    def backward(g):
        q = np.repeat(np.repeat(g * _state.dtype(0.25), 2, axis=-2), 2, axis=-1)
        if ph:
            q[..., h - 1, :] += q[..., h, :]
        if pw:
            q[..., :, w - 1] += q[..., :, w]
        return (np.ascontiguousarray(q[..., :h, :w]),)

    return _make(out, (x,), backward, tag=tag)


# ---------------------------------------------------------------- sampling


def sample_rows(volume: Tensor, coords: Tensor) -> Tensor:
    """Bilinearly sample each row-image of ``volume`` at its own points.

    ``volume`` is (N, H, W), ``coords`` is (N, K, 2) holding (x, y) pixel
    positions. Returns (N, K). Corners outside the grid contribute zero.
    """
    n, h, w = volume.shape
    if coords.ndim != 3 or coords.shape[0] != n or coords.shape[2] != 2:
        raise ShapeError(f"coords shape {coords.shape} incompatible with volume {volume.shape}")
    k = coords.shape[1]
    x = coords.data[..., 0]
    y = coords.data[..., 1]
    x0 = np.floor(x)
    y0 = np.floor(y)
    wx1 = x - x0
    wy1 = y - y0
    wx0 = 1 - wx1
    wy0 = 1 - wy1
    x0i = x0.astype(np.int64)
    y0i = y0.astype(np.int64)
    flat = volume.data.reshape(n, h * w)
    rows = np.arange(n)[:, None]

    corners = []
    for dy, wy in ((0, wy0), (1, wy1)):
        for dx, wx in ((0, wx0), (1, wx1)):
            xi = x0i + dx
            yi = y0i + dy
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            idx = np.where(valid, yi * w + xi, 0)
            val = np.where(valid, flat[rows, idx], 0).astype(_state.dtype)
            corners.append((idx, valid, val, dx, dy, wx, wy))

    out = np.zeros((n, k), dtype=_state.dtype)
    for _, _, val, _, _, wx, wy in corners:
        out += wx * wy * val

    def backward(g):
        gv = gc = None
        if volume.requires_grad:
            flat_idx = []
            weights = []
            for idx, valid, _, _, _, wx, wy in corners:
                flat_idx.append((rows * (h * w) + idx).ravel())
                weights.append((g * wx * wy * valid).ravel())
            gv = np.bincount(
                np.concatenate(flat_idx), np.concatenate(weights), minlength=n * h * w
            ).astype(_state.dtype).reshape(n, h, w)
        if coords.requires_grad:
            gx = np.zeros((n, k), dtype=_state.dtype)
            gy = np.zeros((n, k), dtype=_state.dtype)
            for _, _, val, dx, dy, wx, wy in corners:
                sx = 1.0 if dx else -1.0
                sy = 1.0 if dy else -1.0
                gx += sx * wy * val
                gy += sy * wx * val
            gc = np.stack([g * gx, g * gy], axis=-1).astype(_state.dtype)
        return (gv, gc)

    return _make(out, (volume, coords), backward)


def bilinear_sample(x: Tensor, coords: Tensor) -> Tensor:
    """Sample ``x`` (C, H, W) at ``coords`` (2, Ho, Wo) of (x, y) positions -> (C, Ho, Wo)."""
    if x.ndim != 3 or coords.ndim != 3 or coords.shape[0] != 2:
        raise ShapeError("bilinear_sample expects input (C, H, W) and coords (2, Ho, Wo)")
    c = x.shape[0]
    ho, wo = coords.shape[1:]
    pts = transpose(reshape(coords, (2, ho * wo)), (1, 0))  # (K, 2)
    pts = reshape(pts, (1, ho * wo, 2))
    if c > 1:
        pts = concat([pts] * c, axis=0)
    return reshape(sample_rows(x, pts), (c, ho, wo))


def unfold3x3(x: Tensor) -> Tensor:
    """3x3 neighbourhoods with replicated borders: (C, H, W) -> (C, 9, H, W)."""
    c, h, w = x.shape
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1)), mode="edge")
    out = np.stack([xp[:, i : i + h, j : j + w] for i in range(3) for j in range(3)], axis=1)

    def backward(g):
        gp = np.zeros(xp.shape, dtype=_state.dtype)
        for n, (i, j) in enumerate((i, j) for i in range(3) for j in range(3)):
            gp[:, i : i + h, j : j + w] += g[:, n]
        gx = gp[:, 1:-1, 1:-1].copy()
        gx[:, 0, :] += gp[:, 0, 1:-1]
        gx[:, -1, :] += gp[:, -1, 1:-1]
        gx[:, :, 0] += gp[:, 1:-1, 0]
        gx[:, :, -1] += gp[:, 1:-1, -1]
        gx[:, 0, 0] += gp[:, 0, 0]
        gx[:, 0, -1] += gp[:, 0, -1]
        gx[:, -1, 0] += gp[:, -1, 0]
        gx[:, -1, -1] += gp[:, -1, -1]
        return (gx,)

    return _make(out, (x,), backward)


def resize_bilinear(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize of (C, H, W) with edge clamping (no tape)."""
    c, h, w = x.shape

    def axis_weights(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        i0 = np.floor(pos).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, (pos - i0).astype(_state.dtype)

    y0, y1, wy = axis_weights(h, out_h)
    x0, x1, wx = axis_weights(w, out_w)
    top = x[:, y0][:, :, x0] * (1 - wx) + x[:, y0][:, :, x1] * wx
    bot = x[:, y1][:, :, x0] * (1 - wx) + x[:, y1][:, :, x1] * wx
    out = top * (1 - wy)[None, :, None] + bot * wy[None, :, None]
    return out.astype(_state.dtype)


def is_finite(x: Tensor) -> bool:
    return bool(np.isfinite(x.data).all())


def scalar(x: Tensor) -> float:
    return float(x.data.reshape(-1)[0]) if x.size == 1 else math.nan
