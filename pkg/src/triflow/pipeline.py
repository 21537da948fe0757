"""Video inference runtime: padding, cached sliding-window sessions, 2x protocol, benchmark."""

from __future__ import annotations

import statistics
import time
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import corrvol
from . import model as M
from . import tensors as T
from .tensors import ALLOC, Tensor


class NotReadyError(RuntimeError):
    """Fewer than three frames have been buffered."""


@dataclass(frozen=True)
class PadSpec:
    rows: int = 0
    cols: int = 0

    @property
    def empty(self) -> bool:
        return self.rows == 0 and self.cols == 0

    def crop(self, x: np.ndarray | Tensor):
        """Drop the bottom/right padding band from a (C, H, W) array or tensor."""
        if self.empty:
            return x
        h, w = x.shape[-2:]
        idx = (slice(None), slice(0, h - self.rows), slice(0, w - self.cols))
        return T.getitem(x, idx) if isinstance(x, Tensor) else x[idx]


def pad_to_multiple(frame, m: int = 16) -> tuple[Tensor, PadSpec]:
    """Zero-pad the bottom and right of (C, H, W) so both sides divide by ``m``."""
    data = frame.data if isinstance(frame, Tensor) else np.asarray(frame, dtype=np.float32)
    _, h, w = data.shape
    spec = PadSpec((-h) % m, (-w) % m)
    if spec.empty:
        return (frame if isinstance(frame, Tensor) else Tensor(data)), spec
    return Tensor(np.pad(data, ((0, 0), (0, spec.rows), (0, spec.cols)))), spec


def crop_flow(flow: M.BidirFlow, spec: PadSpec) -> M.BidirFlow:
    return M.BidirFlow(
        spec.crop(flow.f_prev), spec.crop(flow.f_next), spec.crop(flow.mol_alpha), spec.crop(flow.mol_beta)
    )


def estimate(frames, w: M.Weights, iters: int | None = None) -> M.BidirFlow:
    """Stateless inference for one triplet at its original resolution."""
    padded = [pad_to_multiple(f, w.config.corr_scale) for f in frames]
    spec = padded[0][1]
    with T.no_grad():
        pred = M.forward(*(p for p, _ in padded), w, iters=iters, training=False)[-1]
    return crop_flow(pred, spec)


# ---------------------------------------------------------------- session


@dataclass(frozen=True)
class Optimizations:
    late_upsample: bool = True
    feature_reuse: bool = True
    fast_corr: bool = True
    corr_reuse: bool = True

    @classmethod
    def none(cls) -> "Optimizations":
        return cls(False, False, False, False)


VARIANTS: "OrderedDict[str, Optimizations]" = OrderedDict(
    [
        ("baseline", Optimizations(False, False, False, False)),
        ("late_upsample", Optimizations(True, False, False, False)),
        ("feature_reuse", Optimizations(True, True, False, False)),
        ("fast_corr", Optimizations(True, True, True, False)),
        ("corr_reuse", Optimizations(True, True, True, True)),
    ]
)


@dataclass
class SessionCounters:
    encoder_calls: int = 0
    base_builds: int = 0
    reused_volumes: int = 0


class VideoSession:
    """Sliding three-frame window over a video with cached intermediate results.

    Push frames one at a time; once three are buffered every push yields the
    bidirectional flow for the middle frame of the current window.
    """

    def __init__(
        self,
        weights: M.Weights,
        iters: int | None = None,
        opts: Optimizations = Optimizations(),
        keep_pyramids: bool = False,
    ):
        self.w = weights
        self.cfg = weights.config
        self.iters = self.cfg.iters if iters is None else iters
        self.opts = opts
        self.keep_pyramids = keep_pyramids
        self.frames: OrderedDict[int, Tensor] = OrderedDict()
        self.features: OrderedDict[int, Tensor] = OrderedDict()
        self.corr_cache: tuple[int, Tensor] | None = None
        self.pad: PadSpec | None = None
        self.next_index = 0
        self.counters = SessionCounters()
        self.last_pyramids: tuple | None = None

    @property
    def center(self) -> int:
        """Index of the frame the most recent prediction belongs to."""
        return self.next_index - 2

    def _encode(self, idx: int) -> Tensor:
        if self.opts.feature_reuse and idx in self.features:
            return self.features[idx]
        self.counters.encoder_calls += 1
        feat = M.feature_encoder(self.frames[idx], self.w)
        if self.opts.feature_reuse:
            self.features[idx] = feat
            while len(self.features) > 3:
                self.features.popitem(last=False)
        return feat

    def _pyramid(self, f_cur: Tensor, f_other: Tensor) -> corrvol.CorrelationPyramid:
        cfg = self.cfg
        self.counters.base_builds += 1
        if self.opts.fast_corr:
            base = corrvol.build_base(f_cur, f_other, cfg.normalize_corr)
            return corrvol.build_pyramid_fast(base, cfg.num_levels, cfg.corr_scale)
        return corrvol.build_pyramid_naive(f_cur, f_other, cfg.num_levels, cfg.normalize_corr, cfg.corr_scale)

    def push(self, frame) -> M.BidirFlow | None:
        padded, spec = pad_to_multiple(frame, self.cfg.corr_scale)
        if self.pad is None:
            self.pad = spec
        elif spec != self.pad or padded.shape != next(iter(self.frames.values())).shape:
            raise ValueError("all frames of a session must share dimensions")
        idx = self.next_index
        self.next_index += 1
        self.frames[idx] = padded
        while len(self.frames) > 3:
            self.frames.popitem(last=False)
        if len(self.frames) < 3:
            return None
        with T.no_grad():
            return self._predict(idx - 1)

    def _predict(self, t: int) -> M.BidirFlow:
        cfg = self.cfg
        f_prev, f_cur, f_next = (self._encode(i) for i in (t - 1, t, t + 1))

        cached = None
        if self.opts.corr_reuse and self.corr_cache is not None and self.corr_cache[0] == t - 1:
            cached = self.corr_cache[1]
        self.corr_cache = None
        if cached is not None:
            rev = corrvol.reverse_volume(cached)
            del cached
            self.counters.reused_volumes += 1
            pyr_prev = corrvol.build_pyramid_fast(rev, cfg.num_levels, cfg.corr_scale)
            del rev
        else:
            pyr_prev = self._pyramid(f_cur, f_prev)
        pyr_next = self._pyramid(f_cur, f_next)

        frames = tuple(self.frames[i] for i in (t - 1, t, t + 1))
        del f_prev, f_cur, f_next
        preds = M.refine(frames, pyr_prev, pyr_next, self.w, self.iters, late_upsample=self.opts.late_upsample)
        if self.opts.corr_reuse:
            self.corr_cache = (t, pyr_next.base)
        if self.keep_pyramids:
            self.last_pyramids = (pyr_prev, pyr_next)
        return crop_flow(preds[-1], self.pad)


def session_step(s: VideoSession, new_frame) -> M.BidirFlow:
    """Push ``new_frame``; raise :class:`NotReadyError` while fewer than three frames are buffered."""
    out = s.push(new_frame)
    if out is None:
        raise NotReadyError(f"session has {len(s.frames)} frame(s); three are needed")
    return out


def run_video(frames, w: M.Weights, iters: int | None = None, opts: Optimizations = Optimizations()):
    """Predictions for every interior frame of ``frames``, in order."""
    s = VideoSession(w, iters, opts)
    out = []
    for f in frames:
        pred = s.push(f)
        if pred is not None:
            out.append(pred)
    return out


# ---------------------------------------------------------------- 2x protocol


def infer_upscaled2x(triplet, w: M.Weights, iters: int | None = None) -> M.BidirFlow:
    """Estimate on 2x bilinearly upscaled frames, then bring flows back to input scale."""
    arrays = [f.data if isinstance(f, Tensor) else np.asarray(f, dtype=np.float32) for f in triplet]
    _, h, wd = arrays[0].shape
    big = [T.resize_bilinear(a, 2 * h, 2 * wd) for a in arrays]
    pred = estimate(big, w, iters)

    def down(x: Tensor, factor: float) -> Tensor:
        return Tensor(T.resize_bilinear(x.data, h, wd) * np.float32(factor))

    return M.BidirFlow(down(pred.f_prev, 0.5), down(pred.f_next, 0.5), down(pred.mol_alpha, 1.0), down(pred.mol_beta, 1.0))


# ---------------------------------------------------------------- benchmark


@dataclass
class BenchRow:
    variant: str
    runtime_ms_mean: float
    runtime_ms_std: float
    peak_bytes: int
    corr_peak_bytes: int
    samples: list[float] = field(default_factory=list, repr=False)


@dataclass
class BenchReport:
    resolution: tuple[int, int]
    scale: int
    rows: list[BenchRow]
    predicted_corr_bytes: int

    def row(self, variant: str) -> BenchRow:
        return next(r for r in self.rows if r.variant == variant)

    def to_csv(self) -> str:
        lines = ["variant,runtime_ms_mean,runtime_ms_std,peak_bytes"]
        lines += [f"{r.variant},{r.runtime_ms_mean:.3f},{r.runtime_ms_std:.3f},{r.peak_bytes}" for r in self.rows]
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        h, w = self.resolution
        out = [f"resolution {h}x{w}  corr scale 1/{self.scale}  predicted volume bytes {self.predicted_corr_bytes}"]
        out.append(f"{'variant':<16}{'mean ms':>10}{'std ms':>9}{'peak bytes':>14}{'corr bytes':>14}")
        for r in self.rows:
            out.append(
                f"{r.variant:<16}{r.runtime_ms_mean:>10.2f}{r.runtime_ms_std:>9.2f}"
                f"{r.peak_bytes:>14d}{r.corr_peak_bytes:>14d}"
            )
        return "\n".join(out) + "\n"


def bench_config(scale: int = 16, use_gma: bool = True) -> M.ModelConfig:
    return M.ModelConfig.paired(64, encoder_channels=(16, 32, 64), corr_scale=scale, use_gma=use_gma)


def bench(
    w: M.Weights,
    resolution: tuple[int, int] = (256, 448),
    repeats: int = 20,
    iters: int | None = None,
    clip_len: int = 4,
    seed: int = 0,
    variants: "OrderedDict[str, Optimizations] | None" = None,
) -> BenchReport:
    """Per-frame steady-state runtime and peak tensor bytes for each optimisation level.

    Each repeat runs every variant over the same ``clip_len``-frame clip,
    interleaved so that slow drifts affect all variants alike. The first
    prediction of a clip warms the caches and is not timed.
    """
    if clip_len < 4:
        raise ValueError("clip_len must be >= 4 so at least one steady-state step is timed")
    variants = variants or VARIANTS
    h, wd = resolution
    rng = np.random.default_rng(seed)
    clip = [rng.random((3, h, wd), dtype=np.float32) for _ in range(clip_len)]
    times: dict[str, list[float]] = {k: [] for k in variants}
    peaks: dict[str, int] = {k: 0 for k in variants}
    corr_peaks: dict[str, int] = {k: 0 for k in variants}
    for _ in range(repeats):
        for name, opts in variants.items():
            s = VideoSession(w, iters, opts)
            for f in clip[:3]:
                s.push(f)
            for f in clip[3:]:
                ALLOC.reset_peak()
                base_live = ALLOC.live
                t0 = time.perf_counter()
                s.push(f)
                times[name].append((time.perf_counter() - t0) * 1e3)
                peaks[name] = max(peaks[name], ALLOC.peak - base_live)
                corr_peaks[name] = max(corr_peaks[name], ALLOC.peak_by_tag[corrvol.CORR_TAG])
            del s
    cfg = w.config
    ph, pw = h + (-h) % cfg.corr_scale, wd + (-wd) % cfg.corr_scale
    predicted = corrvol.memory_bytes(corrvol.MemoryModel(ph, pw, cfg.corr_scale, cfg.num_levels))
    rows = [
        BenchRow(
            name,
            statistics.fmean(times[name]),
            statistics.stdev(times[name]) if len(times[name]) > 1 else 0.0,
            peaks[name],
            corr_peaks[name],
            times[name],
        )
        for name in variants
    ]
    return BenchReport((h, wd), cfg.corr_scale, rows, predicted)
