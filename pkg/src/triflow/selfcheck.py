"""Fast oracle suite run by ``triflow selfcheck``.

Each check returns ``(name, passed, detail)``; none of them depends on the
path it verifies.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from . import corrvol, learn, metrics
from . import model as M
from . import pipeline as P
from . import tensors as T

Check = Callable[[], tuple[bool, str]]


def rel_dev(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-12))


def pyramid_equivalence(cases: int = 50, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        d = int(rng.integers(1, 17))
        h, w = (int(v) for v in rng.integers(1, 9, size=2))
        fa = T.Tensor(rng.standard_normal((d, h, w)))
        fb = T.Tensor(rng.standard_normal((d, h, w)))
        levels = int(rng.integers(1, 5))
        fast = corrvol.build_pyramid_fast(corrvol.build_base(fa, fb), levels)
        naive = corrvol.build_pyramid_naive(fa, fb, levels)
        for lf, ln in zip(fast.levels, naive.levels):
            worst = max(worst, rel_dev(lf.data, ln.data))
    return bool(worst <= 1e-5), f"max relative deviation {worst:.2e}"


def reverse_bitwise(cases: int = 50, seed: int = 1) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    for i in range(cases):
        d = int(rng.integers(1, 33))
        h, w = (int(v) for v in rng.integers(1, 9, size=2))
        fa = T.Tensor(rng.standard_normal((d, h, w)))
        fb = T.Tensor(rng.standard_normal((d, h, w)))
        rev = corrvol.reverse_volume(corrvol.build_base(fa, fb))
        if not np.array_equal(rev.data, corrvol.build_base(fb, fa).data):
            return False, f"case {i} differs"
    return True, f"{cases} cases bitwise equal"


def cache_equivalence(frames: int = 5, seed: int = 2) -> tuple[bool, str]:
    w = M.Weights.init(M.ModelConfig.tiny(8), seed=seed)
    rng = np.random.default_rng(seed)
    clip = [rng.random((3, 32, 48), dtype=np.float32) for _ in range(frames)]
    outs = P.run_video(clip, w)
    for t, out in enumerate(outs, start=1):
        ref = P.estimate(clip[t - 1 : t + 2], w)
        for key in ("f_prev", "f_next", "mol_alpha", "mol_beta"):
            if not np.array_equal(getattr(out, key).data, getattr(ref, key).data):
                return False, f"frame {t} {key} differs"
    return True, f"{len(outs)} predictions bitwise equal"


def mol_gradients(seed: int = 3) -> tuple[bool, str]:
    err = mol_grad_error(seed)
    return bool(err <= 1e-3), f"max relative error {err:.2e}"


def mol_grad_error(seed: int = 0, size: int = 4) -> float:
    """Central differences against the analytic mixture-loss gradient, in float64."""
    rng = np.random.default_rng(seed)
    with T.precision(np.float64):
        gt = rng.normal(size=(2, size, size)) * 2
        mu = T.Tensor(rng.normal(size=(2, size, size)))
        alpha = T.Tensor(rng.uniform(0.1, 0.9, size=(1, size, size)))
        beta = T.Tensor(rng.normal(size=(1, size, size)))
        return learn.grad_check(lambda: learn.mol_frame_loss(mu, alpha, beta, gt), [mu, alpha, beta],
                                eps=1e-5, samples_per_param=8, seed=seed)


def model_gradients(seed: int = 4) -> tuple[bool, str]:
    err = tiny_model_grad_error(seed=seed, samples_per_param=1)
    return bool(err <= 5e-3), f"max relative error {err:.2e}"


def tiny_model_grad_error(seed: int = 0, samples_per_param: int = 2, frame: int = 8) -> float:
    """End-to-end loss gradient check for the D_c=8 model, run in float64.

    Biases are moved off zero so that no ReLU sits exactly on its kink.
    """
    rng = np.random.default_rng(seed)
    with T.precision(np.float64):
        cfg = M.ModelConfig.tiny(8, iters=2)
        base = M.Weights.init(cfg, seed=seed)
        w = M.Weights(
            cfg,
            {
                k: T.Tensor(v.data + (0.05 * rng.standard_normal(v.shape) if k.endswith("bias") else 0.0))
                for k, v in base.params.items()
            },
        )
        padded = [P.pad_to_multiple(T.Tensor(rng.random((3, frame, frame))), cfg.corr_scale)[0] for _ in range(3)]
        size = padded[0].shape[1:]
        gts = (rng.normal(size=(2,) + size) * 2, rng.normal(size=(2,) + size) * 2)

        def loss():
            return learn.sequence_loss(M.forward(*padded, w, training=True), gts)

        return learn.grad_check(loss, [w[n] for n in w.names()], eps=1e-4,
                                samples_per_param=samples_per_param, seed=seed)


def metric_oracles(seed: int = 5) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    pred = rng.normal(size=(2, 8, 8)) * 4
    gt = rng.normal(size=(2, 8, 8)) * 20
    ref = loop_metrics(pred, gt)
    got = {
        "epe": metrics.epe(pred, gt),
        "1px": metrics.onepx(pred, gt),
        "fl": metrics.fl_all(pred, gt),
        "wauc": metrics.wauc(pred, gt),
    }
    worst = max(abs(got[k] - ref[k]) for k in ref)
    return bool(worst <= 1e-6), f"max abs deviation {worst:.2e}"


def loop_metrics(pred, gt) -> dict[str, float]:
    """Scalar-loop reference for EPE, 1px, Fl and WAUC."""
    _, h, w = np.shape(pred)
    errs, mags = [], []
    for y in range(h):
        for x in range(w):
            du = float(pred[0][y][x]) - float(gt[0][y][x])
            dv = float(pred[1][y][x]) - float(gt[1][y][x])
            errs.append(math.sqrt(du * du + dv * dv))
            mags.append(math.sqrt(float(gt[0][y][x]) ** 2 + float(gt[1][y][x]) ** 2))
    n = len(errs)
    epe = sum(errs) / n
    onepx = 100.0 * sum(1 for e in errs if e > 1.0) / n
    fl = 100.0 * sum(1 for e, m in zip(errs, mags) if e > 3.0 and e > 0.05 * m) / n
    wauc = 0.0
    for i in range(100):
        x = (i + 0.5) * 0.05
        inlier = 100.0 * sum(1 for e in errs if e <= x) / n
        wauc += inlier * (5.0 - x) / 5.0 * 0.05
    return {"epe": epe, "1px": onepx, "fl": fl, "wauc": 0.4 * wauc}


CHECKS: dict[str, Check] = {
    "corrvol.pyramid_equivalence": pyramid_equivalence,
    "corrvol.reverse_bitwise": reverse_bitwise,
    "pipeline.cache_equivalence": cache_equivalence,
    "learn.mol_gradients": mol_gradients,
    "learn.model_gradients": model_gradients,
    "metrics.oracles": metric_oracles,
}


def run_all() -> list[tuple[str, bool, str]]:
    results = []
    for name, check in CHECKS.items():
        try:
            ok, detail = check()
        except Exception as exc:  # reported, not raised: selfcheck must finish the suite
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append((name, ok, detail))
    return results
