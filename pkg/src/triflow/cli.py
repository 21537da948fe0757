"""``triflow`` command line: estimate, eval, bench, histogram, train-toy, selfcheck.

Exit codes: 0 success, 1 input or usage error, 2 internal invariant failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import corrvol, flowio, learn, metrics
from . import model as M
from . import pipeline as P

IMAGE_SUFFIXES = (".png", ".ppm")
DEFAULT_ITERS = 8


class UsageError(Exception):
    """Bad flags, config keys, or input files (exit 1)."""


class InvariantError(Exception):
    """An internal check failed (exit 2)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- run config


@dataclass
class RunConfig:
    """Model shape, weights, iteration count and runtime toggles for one invocation."""

    context_dim: int = 64
    feature_dim: int = 128
    encoder_channels: tuple[int, int, int] = (16, 32, 64)
    scale: int = 16
    radius: int = 4
    levels: int = 4
    gma: bool = True
    iters: int = DEFAULT_ITERS
    weights: str | None = None
    upscale2x: bool = False
    late_upsample: bool = True
    feature_reuse: bool = True
    fast_corr: bool = True
    corr_reuse: bool = True
    seed: int = 0
    explicit: set = field(default_factory=set, repr=False)

    def model_config(self) -> M.ModelConfig:
        return M.ModelConfig(
            feature_dim=self.feature_dim,
            context_dim=self.context_dim,
            corr_scale=self.scale,
            radius=self.radius,
            num_levels=self.levels,
            use_gma=self.gma,
            iters=self.iters,
            encoder_channels=tuple(self.encoder_channels),
        )

    def opts(self) -> P.Optimizations:
        return P.Optimizations(self.late_upsample, self.feature_reuse, self.fast_corr, self.corr_reuse)

    def load_weights(self) -> M.Weights:
        cfg = self.model_config()
        if self.weights is None:
            return M.Weights.init(cfg, seed=42 + self.seed)
        try:
            return M.Weights.load(self.weights, cfg)
        except (OSError, ValueError) as exc:
            raise UsageError(f"weights: {exc}") from exc


_BOOL = {"1": True, "true": True, "yes": True, "on": True, "0": False, "false": False, "no": False, "off": False}


def _coerce(key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            return _BOOL[raw.strip().lower()]
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.replace(",", " ").split())
        return raw.strip()
    except (KeyError, ValueError) as exc:
        raise UsageError(f"config: bad value {raw!r} for {key}") from exc


def parse_config_file(path) -> dict:
    """Read ``key = value`` lines; ``#`` starts a comment. Unknown keys are rejected."""
    known = {f.name: f.default for f in fields(RunConfig) if f.name != "explicit"}
    known["encoder_channels"] = RunConfig().encoder_channels
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"config: {exc}") from exc
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config:{lineno}: expected key=value")
        key, raw = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in known:
            raise UsageError(f"config:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, raw, known[key])
    return out


def build_run_config(args) -> RunConfig:
    """Defaults, then the config file, then explicit flags; ``MEMFOF_SEED`` fills a missing seed."""
    rc = RunConfig()
    if getattr(args, "config", None):
        for k, v in parse_config_file(args.config).items():
            setattr(rc, k, v)
            rc.explicit.add(k)
    if "seed" not in rc.explicit and os.environ.get("MEMFOF_SEED"):
        rc.seed = _coerce("MEMFOF_SEED", os.environ["MEMFOF_SEED"], 0)
    flag_map = {
        "weights": "weights",
        "iters": "iters",
        "scale": "scale",
        "seed": "seed",
    }
    for flag, key in flag_map.items():
        value = getattr(args, flag, None)
        if value is not None:
            setattr(rc, key, value)
    if getattr(args, "no_gma", False):
        rc.gma = False
    if getattr(args, "upscale2x", False):
        rc.upscale2x = True
    if rc.iters < 0:
        raise UsageError("--iters must be >= 0")
    try:
        rc.model_config()
    except (ValueError, M.UnsupportedError) as exc:
        raise UsageError(f"config: {exc}") from exc
    return rc


# ---------------------------------------------------------------- helpers


def list_frames(inputs: list[str]) -> list[Path]:
    """A single directory (sorted lexicographically) or explicit paths in the order given."""
    if len(inputs) == 1 and Path(inputs[0]).is_dir():
        files = sorted(p for p in Path(inputs[0]).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    else:
        files = [Path(p) for p in inputs]
    return files


def _load_frames(paths: list[Path]) -> list[np.ndarray]:
    frames = []
    for p in paths:
        try:
            frames.append(flowio.read_image(p))
        except (OSError, flowio.FormatError) as exc:
            raise UsageError(f"estimate: {exc}") from exc
    shapes = {f.shape for f in frames}
    if len(shapes) > 1:
        raise UsageError(f"estimate: frames differ in size: {sorted(shapes)}")
    return frames


def _write_table(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for r in rows:
        writer.writerow(["" if r.get(c) is None else (f"{r[c]:.6f}" if isinstance(r[c], float) else r[c]) for c in columns])
    return buf.getvalue()


def _pretty(rows: list[dict], columns: list[str]) -> str:
    cells = [[str(c) for c in columns]]
    for r in rows:
        cells.append(["-" if r.get(c) is None else (f"{r[c]:.3f}" if isinstance(r[c], float) else str(r[c])) for c in columns])
    widths = [max(len(row[i]) for row in cells) for i in range(len(columns))]
    return "\n".join("  ".join(v.rjust(wd) for v, wd in zip(row, widths)) for row in cells) + "\n"


# ---------------------------------------------------------------- commands


def cmd_estimate(args) -> int:
    rc = build_run_config(args)
    paths = list_frames(args.frames)
    if len(paths) < 3:
        raise UsageError(f"estimate: need at least 3 frames, got {len(paths)}")
    frames = _load_frames(paths)
    w = rc.load_weights()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def stateless(t: int) -> M.BidirFlow:
        triplet = frames[t - 1 : t + 2]
        if rc.upscale2x:
            return P.infer_upscaled2x(triplet, w, rc.iters)
        return P.estimate(triplet, w, rc.iters)

    centers = list(range(1, len(frames) - 1))
    if args.jobs > 1 or rc.upscale2x:
        with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
            preds = list(pool.map(stateless, centers))
    else:
        preds = P.run_video(frames, w, rc.iters, rc.opts())
    for t, pred in zip(centers, preds):
        fwd = pred.f_next.data
        bwd = pred.f_prev.data
        flowio.write_flo(out / f"{t:04d}_fwd.flo", fwd)
        flowio.write_flo(out / f"{t:04d}_bwd.flo", bwd)
        if args.viz:
            flowio.write_image(out / f"{t:04d}_fwd.png", flowio.colorize(fwd))
            flowio.write_image(out / f"{t:04d}_bwd.png", flowio.colorize(bwd))
    print(f"wrote {2 * len(preds)} flow files to {out}")
    return 0


def cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise UsageError(f"eval: not a directory: {d}")
    preds = {p.name for p in pred_dir.glob("*.flo")}
    gts = {p.name for p in gt_dir.glob("*.flo")}
    common = sorted(preds & gts)
    missing = sorted(preds ^ gts)
    for name in missing:
        side = "ground truth" if name in preds else "prediction"
        print(f"eval: missing {side} for {name}; excluded", file=sys.stderr)
    if not common:
        raise UsageError("eval: no file has both a prediction and a ground truth")

    columns = ["file", *metrics.METRIC_COLUMNS]
    rows, all_pred, all_gt = [], [], []
    for name in common:
        try:
            p = flowio.read_flo(pred_dir / name)
            g = flowio.read_flo(gt_dir / name)
        except (OSError, flowio.FormatError) as exc:
            raise UsageError(f"eval: {exc}") from exc
        if p.shape != g.shape:
            raise UsageError(f"eval: {name}: shape {p.shape} vs {g.shape}")
        rows.append({"file": name, **metrics.all_metrics(p, g)})
        all_pred.append(p.reshape(2, 1, -1))
        all_gt.append(g.reshape(2, 1, -1))
    agg = metrics.all_metrics(np.concatenate(all_pred, axis=2), np.concatenate(all_gt, axis=2))
    rows.append({"file": "ALL", **agg})

    text = _write_table(rows, columns)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(_pretty(rows, columns))
    return 1 if missing else 0


def cmd_bench(args) -> int:
    rc = build_run_config(args)
    h, w = args.resolution
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = P.bench_config(rc.scale, rc.gma)
    weights = M.Weights.init(cfg, seed=42 + rc.seed)
    report = P.bench(weights, (h, w), repeats=args.repeats, iters=rc.iters, seed=rc.seed)
    for r in report.rows:
        if r.corr_peak_bytes > report.predicted_corr_bytes:
            raise InvariantError(
                f"bench: {r.variant} held {r.corr_peak_bytes} volume bytes, model predicts {report.predicted_corr_bytes}"
            )
    (out / "bench.csv").write_text(report.to_csv())

    sweep = ["scale,corr_h,corr_w,volume_bytes,volume_gib,nominal_gib"]
    for s in M.SUPPORTED_SCALES:
        mm = corrvol.MemoryModel(h, w, s, cfg.num_levels)
        hc, wc = mm.corr_dims
        sweep.append(
            f"{s},{hc},{wc},{corrvol.memory_bytes(mm)},{corrvol.memory_gib(mm):.6f},"
            f"{corrvol.nominal_bytes(mm) / 1024**3:.6f}"
        )
    (out / "memory.csv").write_text("\n".join(sweep) + "\n")

    text = report.to_text() + "\nmemory model sweep\n" + "\n".join(sweep) + "\n"
    (out / "bench.txt").write_text(text)
    from .plotting import plot_bench

    plot_bench(report, out / "bench.png")
    sys.stdout.write(text)
    return 0


def cmd_histogram(args) -> int:
    d = Path(args.flows)
    if not d.is_dir():
        raise UsageError(f"histogram: not a directory: {d}")
    files = sorted(d.glob("*.flo"))
    if not files:
        raise UsageError(f"histogram: no .flo files in {d}")
    try:
        flows = [flowio.read_flo(p) for p in files]
    except flowio.FormatError as exc:
        raise UsageError(f"histogram: {exc}") from exc
    hist = metrics.motion_histogram(flows)
    if int(hist.counts.sum()) + hist.clipped != hist.total:
        raise InvariantError("histogram: bins plus clipped count do not add up to the pixel count")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    from .plotting import plot_histogram

    plot_histogram(hist, out, crop=args.crop)
    lines = ["u,v,count"] + [f"{u},{v},{c}" for u, v, c in hist.nonzero()]
    csv_path = out.with_suffix(".csv")
    csv_path.write_text("\n".join(lines) + "\n")
    print(f"{len(files)} files, {hist.total} pixels, {hist.clipped} clipped; wrote {out} and {csv_path}")
    return 0


def cmd_train_toy(args) -> int:
    rc = build_run_config(args)
    cfg = learn.toy_config().with_(corr_scale=rc.scale, use_gma=rc.gma)
    init = M.Weights.init(cfg, seed=42 + rc.seed)
    if args.steps < 0:
        raise UsageError("train-toy: --steps must be >= 0")
    result = learn.train_toy(cfg, steps=args.steps, seed=rc.seed, weights=init, **learn.TOY_DEFAULTS)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    result.weights.save(out)
    log_path = out.with_suffix(".csv")
    log_path.write_text(result.log.to_csv())
    if args.steps:
        from .plotting import plot_training

        plot_training(result.log, out.with_suffix(".png"))
    print(
        f"loss {result.init_eval[0]:.4f} -> {result.final_eval[0]:.4f}; "
        f"held-out EPE {result.init_heldout_epe:.4f} -> {result.final_heldout_epe:.4f}; "
        f"{result.seconds:.1f}s; weights {result.weights.checksum()[:16]}"
    )
    return 0


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_all

    failed = 0
    for name, ok, detail in run_all():
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        failed += not ok
    if failed:
        raise InvariantError(f"selfcheck: {failed} check(s) failed")
    return 0


# ---------------------------------------------------------------- parser


def _resolution(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from exc
    if h <= 0 or w <= 0:
        raise argparse.ArgumentTypeError("resolution must be positive")
    return h, w


def _model_flags(p: argparse.ArgumentParser, weights: bool = True) -> None:
    if weights:
        p.add_argument("--weights", help="weight file written by train-toy")
    p.add_argument("--iters", type=int, help=f"refinement iterations (default {DEFAULT_ITERS})")
    p.add_argument("--scale", type=int, choices=M.SUPPORTED_SCALES, help="correlation resolution divisor")
    p.add_argument("--no-gma", action="store_true", help="disable global motion aggregation")
    p.add_argument("--seed", type=int, help="RNG seed (falls back to $MEMFOF_SEED, then 0)")
    p.add_argument("--config", help="key=value file; flags override its values")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="triflow", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("estimate", help="bidirectional flow for every interior frame")
    p.add_argument("frames", nargs="+", help="a frame directory or three or more image paths")
    p.add_argument("-o", "--out", required=True, help="output directory")
    _model_flags(p)
    p.add_argument("--upscale2x", action="store_true", help="run on 2x upscaled frames")
    p.add_argument("--viz", action="store_true", help="also write colour-coded PNGs")
    p.add_argument("--jobs", type=int, default=1, help="parallel triplets (stateless path)")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("eval", help="metrics for predicted vs ground-truth .flo files")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("-o", "--out", help="CSV path for per-file and aggregate metrics")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="runtime and memory of the cumulative optimisations")
    p.add_argument("-o", "--out", required=True, help="output directory")
    p.add_argument("--resolution", type=_resolution, default=(256, 448), help="HxW (default 256x448)")
    p.add_argument("--repeats", type=int, default=20)
    _model_flags(p, weights=False)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("histogram", help="2D motion histogram of a directory of .flo files")
    p.add_argument("flows")
    p.add_argument("-o", "--out", required=True, help="PNG path; the CSV goes next to it")
    p.add_argument("--crop", type=int, default=64, help="half-size of the plotted window in px")
    p.set_defaults(func=cmd_histogram)

    p = sub.add_parser("train-toy", help="train on synthetic triplets")
    p.add_argument("-o", "--out", required=True, help="weight file path; log CSV and plot go next to it")
    p.add_argument("--steps", type=int, default=500)
    _model_flags(p, weights=False)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("selfcheck", help="run the built-in oracle suite")
    p.set_defaults(func=cmd_selfcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except InvariantError as exc:
        print(f"invariant failure: {exc}", file=sys.stderr)
        return 2
    except (M.UnsupportedError, M.ShapeError) as exc:
        print(f"error: model: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
