"""Flow evaluation metrics and the 2D motion-vector histogram.

Flow fields are (2, H, W) arrays with the x component first. Every metric
accepts an optional boolean validity mask of shape (H, W); invalid pixels
are excluded from all aggregates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BUCKETS = {"s0-10": (0.0, 10.0), "s10-40": (10.0, 40.0), "s40+": (40.0, np.inf)}

WAUC_BINS = 100
WAUC_MAX = 5.0


def error_map(pred, gt) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 3 or pred.shape[0] != 2:
        raise ValueError(f"flow shapes must match and be (2, H, W); got {pred.shape} and {gt.shape}")
    return np.sqrt(((pred - gt) ** 2).sum(axis=0))


def _valid(mask, shape) -> np.ndarray:
    if mask is None:
        return np.ones(shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != shape:
        raise ValueError(f"mask shape {mask.shape} does not match flow {shape}")
    return mask


def _bucket_masks(gt, valid) -> dict[str, np.ndarray]:
    mag = np.sqrt((np.asarray(gt, dtype=np.float64) ** 2).sum(axis=0))
    return {name: valid & (mag >= lo) & (mag < hi) for name, (lo, hi) in BUCKETS.items()}


def epe(pred, gt, mask=None) -> float:
    err = error_map(pred, gt)
    v = _valid(mask, err.shape)
    return float(err[v].mean()) if v.any() else float("nan")


def epe_buckets(pred, gt, mask=None) -> dict[str, float | None]:
    """EPE per ground-truth magnitude range; empty ranges map to ``None``."""
    err = error_map(pred, gt)
    masks = _bucket_masks(gt, _valid(mask, err.shape))
    return {k: (float(err[m].mean()) if m.any() else None) for k, m in masks.items()}


def onepx(pred, gt, mask=None) -> float:
    """Percentage of valid pixels with error strictly above 1 px."""
    err = error_map(pred, gt)
    v = _valid(mask, err.shape)
    return float(100.0 * (err[v] > 1.0).mean()) if v.any() else float("nan")


def onepx_buckets(pred, gt, mask=None) -> dict[str, float | None]:
    err = error_map(pred, gt)
    masks = _bucket_masks(gt, _valid(mask, err.shape))
    return {k: (float(100.0 * (err[m] > 1.0).mean()) if m.any() else None) for k, m in masks.items()}


def fl_all(pred, gt, mask=None) -> float:
    """Percentage of valid pixels whose error exceeds both 3 px and 5% of |gt|."""
    err = error_map(pred, gt)
    v = _valid(mask, err.shape)
    mag = np.sqrt((np.asarray(gt, dtype=np.float64) ** 2).sum(axis=0))
    outlier = (err > 3.0) & (err > 0.05 * mag)
    return float(100.0 * outlier[v].mean()) if v.any() else float("nan")


def wauc(pred, gt, mask=None) -> float:
    """Weighted area under the inlier-rate curve for thresholds in [0, 5] px.

    Midpoint rule on 100 bins of 0.05 px; the inlier rate at threshold x is
    the percentage of pixels with error <= x, weighted by (5 - x) / 5.
    """
    err = error_map(pred, gt)
    v = _valid(mask, err.shape)
    if not v.any():
        return float("nan")
    e = np.sort(err[v])
    dx = WAUC_MAX / WAUC_BINS
    x = (np.arange(WAUC_BINS) + 0.5) * dx
    inlier = 100.0 * np.searchsorted(e, x, side="right") / e.size
    return float(2.0 / 5.0 * np.sum(inlier * (WAUC_MAX - x) / WAUC_MAX) * dx)


def all_metrics(pred, gt, mask=None) -> dict[str, float | None]:
    """Table-style row: EPE (avg + buckets), 1px (avg + buckets), WAUC, Fl."""
    row: dict[str, float | None] = {"epe": epe(pred, gt, mask)}
    row.update({f"epe_{k}": val for k, val in epe_buckets(pred, gt, mask).items()})
    row["1px"] = onepx(pred, gt, mask)
    row.update({f"1px_{k}": val for k, val in onepx_buckets(pred, gt, mask).items()})
    row["wauc"] = wauc(pred, gt, mask)
    row["fl"] = fl_all(pred, gt, mask)
    return row


METRIC_COLUMNS = (
    "epe", "epe_s0-10", "epe_s10-40", "epe_s40+",
    "1px", "1px_s0-10", "1px_s10-40", "1px_s40+",
    "wauc", "fl",
)


# ---------------------------------------------------------------- motion histogram


@dataclass(frozen=True)
class HistogramConfig:
    half_height: int = 1080
    half_width: int = 1920
    log_display: bool = True

    @property
    def shape(self) -> tuple[int, int]:
        return 2 * self.half_height, 2 * self.half_width


@dataclass
class MotionHistogram:
    counts: np.ndarray
    clipped: int
    total: int
    config: HistogramConfig

    def display(self) -> np.ndarray:
        return np.log1p(self.counts) if self.config.log_display else self.counts.astype(np.float64)

    def nonzero(self) -> list[tuple[int, int, int]]:
        """(u, v, count) for every occupied bin."""
        rows, cols = np.nonzero(self.counts)
        hh, hw = self.config.half_height, self.config.half_width
        return [(int(r - hh), int(c - hw), int(self.counts[r, c])) for r, c in zip(rows, cols)]


def motion_histogram(flows, cfg: HistogramConfig = HistogramConfig(), masks=None) -> MotionHistogram:
    """Count motion vectors into unit bins ``[u, u+1) x [v, v+1)``.

    The first flow channel indexes ``u`` over ``[-H', H')`` (rows), the second
    indexes ``v`` over ``[-W', W')`` (columns). Vectors outside are counted
    in ``clipped``.
    """
    hh, hw = cfg.half_height, cfg.half_width
    counts = np.zeros(cfg.shape, dtype=np.int64)
    clipped = 0
    total = 0
    masks = masks if masks is not None else [None] * len(flows)
    for flow, mask in zip(flows, masks):
        flow = np.asarray(flow, dtype=np.float64)
        v = _valid(mask, flow.shape[1:])
        u_idx = np.floor(flow[0][v]).astype(np.int64) + hh
        v_idx = np.floor(flow[1][v]).astype(np.int64) + hw
        inside = (u_idx >= 0) & (u_idx < 2 * hh) & (v_idx >= 0) & (v_idx < 2 * hw)
        total += int(v.sum())
        clipped += int((~inside).sum())
        np.add.at(counts, (u_idx[inside], v_idx[inside]), 1)
    return MotionHistogram(counts, clipped, total, cfg)
