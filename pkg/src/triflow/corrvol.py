"""All-pairs correlation volumes: construction, pyramids, lookup, reuse, memory model."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensors as T
from .tensors import DTYPE, ShapeError, Tensor

CORR_TAG = "corr"


def build_base(fa: Tensor, fb: Tensor, normalize: bool = True) -> Tensor:
    """Level-0 volume (H*W, H, W): entry (u, v) is <fa(u), fb(v)>.

    The dot products are accumulated one feature channel at a time, in the
    same order for every entry. Each term ``fa[d, u] * fb[d, v]`` is the same
    float as ``fb[d, v] * fa[d, u]``, so the volume for the swapped pair is
    exactly the transpose of this one.
    """
    if fa.ndim != 3 or fa.shape != fb.shape:
        raise ShapeError(f"feature maps must share shape (D, H, W); got {fa.shape} and {fb.shape}")
    d, h, w = fa.shape
    n = h * w
    a = fa.data.reshape(d, n)
    b = fb.data.reshape(d, n)
    acc = np.zeros((n, n), dtype=a.dtype)
    tmp = np.empty((n, n), dtype=a.dtype)
    for k in range(d):
        np.multiply(a[k][:, None], b[k][None, :], out=tmp)
        acc += tmp
    scale = a.dtype.type(1.0 / math.sqrt(d) if normalize else 1.0)
    if normalize:
        acc *= scale

    def backward(g):
        g2 = g.reshape(n, n) * scale
        ga = (b @ g2.T).reshape(d, h, w) if fa.requires_grad else None
        gb = (a @ g2).reshape(d, h, w) if fb.requires_grad else None
        return (ga, gb)

    return T._make(acc.reshape(n, h, w), (fa, fb), backward, tag=CORR_TAG)


def reverse_volume(c_ab: Tensor) -> Tensor:
    """C_ba from C_ab by swapping source and target pixel axes; no products are formed."""
    n, h, w = c_ab.shape
    if n != h * w:
        raise ShapeError(f"volume {c_ab.shape} is not square in pixel indices")
    data = np.ascontiguousarray(c_ab.data.reshape(n, n).T).reshape(n, h, w)

    def backward(g):
        return (np.ascontiguousarray(g.reshape(n, n).T).reshape(n, h, w),)

    return T._make(data, (c_ab,), backward, tag=CORR_TAG)


@dataclass
class CorrelationPyramid:
    levels: list[Tensor]
    scale: int = 16

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    @property
    def base(self) -> Tensor:
        return self.levels[0]

    @property
    def nbytes(self) -> int:
        return sum(lv.data.nbytes for lv in self.levels)


def build_pyramid_fast(base: Tensor, num_levels: int = 4, scale: int = 16) -> CorrelationPyramid:
    """Pool the level-0 volume over its target axes ``num_levels - 1`` times."""
    if num_levels < 1:
        raise ValueError("num_levels must be >= 1")
    levels = [base]
    for _ in range(num_levels - 1):
        levels.append(T.avg_pool2d(levels[-1], 2, tag=CORR_TAG))
    return CorrelationPyramid(levels, scale)


def build_pyramid_naive(
    fa: Tensor, fb: Tensor, num_levels: int = 4, normalize: bool = True, scale: int = 16
) -> CorrelationPyramid:
    """Correlate ``fa`` against ``fb`` average-pooled ``l`` times, for each level ``l``."""
    if num_levels < 1:
        raise ValueError("num_levels must be >= 1")
    d, h, w = fa.shape
    levels = [build_base(fa, fb, normalize)]
    pooled = fb
    for _ in range(num_levels - 1):
        pooled = T.avg_pool2d(pooled)
        levels.append(_cross_volume(fa, pooled, normalize))
    return CorrelationPyramid(levels, scale)


def _cross_volume(fa: Tensor, fb: Tensor, normalize: bool) -> Tensor:
    d, h, w = fa.shape
    _, hb, wb = fb.shape
    a = fa.data.reshape(d, h * w)
    b = fb.data.reshape(d, hb * wb)
    acc = np.zeros((h * w, hb * wb), dtype=a.dtype)
    tmp = np.empty_like(acc)
    for k in range(d):
        np.multiply(a[k][:, None], b[k][None, :], out=tmp)
        acc += tmp
    scale = a.dtype.type(1.0 / math.sqrt(d) if normalize else 1.0)
    if normalize:
        acc *= scale

    def backward(g):
        g2 = g.reshape(h * w, hb * wb) * scale
        ga = (b @ g2.T).reshape(d, h, w) if fa.requires_grad else None
        gb = (a @ g2).reshape(d, hb, wb) if fb.requires_grad else None
        return (ga, gb)

    return T._make(acc.reshape(h * w, hb, wb), (fa, fb), backward, tag=CORR_TAG)


def window_offsets(radius: int) -> np.ndarray:
    """(2r+1)^2 displacement pairs (dx, dy), row-major with dy as the outer index."""
    r = np.arange(-radius, radius + 1, dtype=T.compute_dtype())
    dy, dx = np.meshgrid(r, r, indexing="ij")
    return np.stack([dx.ravel(), dy.ravel()], axis=-1)


def lookup(pyr: CorrelationPyramid, flow: Tensor, radius: int = 4) -> Tensor:
    """Sample every pyramid level around flow-displaced positions.

    ``flow`` is (2, H, W) at correlation resolution. Returns
    (num_levels * (2r+1)^2, H, W).
    """
    if radius < 0:
        raise ValueError("radius must be >= 0")
    _, h, w = flow.shape
    n = h * w
    if pyr.base.shape[0] != n:
        raise ShapeError(f"flow grid {h}x{w} does not match volume with {pyr.base.shape[0]} sources")
    dt = T.compute_dtype()
    ys, xs = np.meshgrid(np.arange(h, dtype=dt), np.arange(w, dtype=dt), indexing="ij")
    grid = T.Tensor(np.stack([xs.ravel(), ys.ravel()], axis=-1))  # (N, 2)
    centers = T.add(grid, T.transpose(T.reshape(flow, (2, n)), (1, 0)))
    offsets = window_offsets(radius)
    k = offsets.shape[0]
    feats = []
    for lvl, vol in enumerate(pyr.levels):
        c = T.mul(centers, DTYPE(1.0 / 2**lvl))
        pts = T.add(T.reshape(c, (n, 1, 2)), offsets[None])
        sampled = T.sample_rows(vol, pts)  # (N, K)
        feats.append(T.reshape(T.transpose(sampled, (1, 0)), (k, h, w)))
    return T.concat(feats, axis=0)


@dataclass(frozen=True)
class MemoryModel:
    height: int
    width: int
    scale: int = 16
    num_levels: int = 4
    bytes_per_entry: int = 4
    num_volumes: int = 2

    @property
    def corr_dims(self) -> tuple[int, int]:
        return -(-self.height // self.scale), -(-self.width // self.scale)

    def level_dims(self) -> list[tuple[int, int]]:
        hc, wc = self.corr_dims
        return [(-(-hc // 2**l), -(-wc // 2**l)) for l in range(self.num_levels)]


def memory_bytes(m: MemoryModel) -> int:
    if m.height <= 0 or m.width <= 0 or m.scale <= 0 or m.num_levels < 1:
        raise ValueError("memory model needs positive dimensions")
    hc, wc = m.corr_dims
    entries = sum(hc * wc * h * w for h, w in m.level_dims())
    return m.num_volumes * m.bytes_per_entry * entries


def memory_gib(m: MemoryModel) -> float:
    return memory_bytes(m) / 1024**3


def nominal_bytes(m: MemoryModel) -> float:
    """Closed form with fractional grid sizes: ``V * B * (HW/s^2)^2 * sum_l 4^-l``.

    Ignores the rounding up of odd level sizes, so halving the resolution
    always divides the volume by exactly 16. :func:`memory_bytes` counts
    what is actually allocated.
    """
    if m.height <= 0 or m.width <= 0 or m.scale <= 0 or m.num_levels < 1:
        raise ValueError("memory model needs positive dimensions")
    cells = m.height * m.width / m.scale**2
    return m.num_volumes * m.bytes_per_entry * cells * cells * sum(4.0**-l for l in range(m.num_levels))
