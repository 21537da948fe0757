"""Mixture-of-Laplace loss, sequence weighting, gradient checks, synthetic data, toy training."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import metrics
from . import model as M
from . import tensors as T
from .tensors import ShapeError, Tensor

log = logging.getLogger(__name__)

LOG2 = math.log(2.0)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 0.85
    num_frames: int = 2  # T: both directions of the centre frame

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")


# ---------------------------------------------------------------- mixture of Laplace


def _mixlap_parts(mu_gt, alpha, beta, mu):
    """Log-domain pieces shared by the value and its gradient (float64)."""
    mu_gt, alpha, beta, mu = (np.asarray(v, dtype=np.float64) for v in (mu_gt, alpha, beta, mu))
    d = np.abs(mu_gt - mu)
    inv_s = np.exp(-beta)
    with np.errstate(divide="ignore"):
        la = np.log(alpha) - LOG2 - d
        lb = np.log1p(-alpha) - LOG2 - beta - d * inv_s
    lp = np.logaddexp(la, lb)
    return d, inv_s, la, lb, lp, alpha, beta, mu, mu_gt


def mix_laplace(mu_gt, alpha, beta, mu):
    """Negative log-likelihood of ``mu_gt`` under a two-component Laplace mixture.

    The first component has unit scale, the second has scale ``exp(beta)``;
    ``alpha`` weights the first. Works elementwise on arrays; evaluated in
    float64.
    """
    return -_mixlap_parts(mu_gt, alpha, beta, mu)[4]


def mix_laplace_grad(mu_gt, alpha, beta, mu):
    """Analytic partial derivatives of :func:`mix_laplace` wrt ``(mu, alpha, beta)``."""
    d, inv_s, la, lb, lp, alpha, beta, mu, mu_gt = _mixlap_parts(mu_gt, alpha, beta, mu)
    ra = np.exp(la - lp)
    rb = np.exp(lb - lp)
    d_mu = np.sign(mu - mu_gt) * (ra + rb * inv_s)
    d_alpha = -(np.exp(-d - LOG2 - lp) - np.exp(-d * inv_s - beta - LOG2 - lp))
    d_beta = -rb * (d * inv_s - 1.0)
    return d_mu, d_alpha, d_beta


def mix_laplace_t(mu_gt: np.ndarray, alpha: Tensor, beta: Tensor, mu: Tensor) -> Tensor:
    """Tape-aware elementwise :func:`mix_laplace`; ``alpha``/``beta`` broadcast over ``mu``."""
    value = mix_laplace(mu_gt, alpha.data, beta.data, mu.data)
    dt = mu.data.dtype

    def backward(g):
        d_mu, d_a, d_b = mix_laplace_grad(mu_gt, alpha.data, beta.data, mu.data)
        g = np.asarray(g, dtype=np.float64)
        return (
            T._unbroadcast((g * d_a).astype(dt), alpha.shape),
            T._unbroadcast((g * d_b).astype(dt), beta.shape),
            (g * d_mu).astype(dt),
        )

    return T._make(value.astype(dt), (alpha, beta, mu), backward)


def mol_frame_loss(
    flow: Tensor, alpha: Tensor, beta: Tensor, gt: np.ndarray, valid: np.ndarray | None = None
) -> Tensor:
    """Mean mixture loss over both coordinates of every (valid) pixel.

    ``flow`` and ``gt`` are (2, H, W); ``alpha`` and ``beta`` are (1, H, W)
    and shared by the two coordinates of a pixel.
    """
    gt = np.asarray(gt)
    if flow.shape != gt.shape or alpha.shape != (1,) + flow.shape[1:] or beta.shape != alpha.shape:
        raise ShapeError(
            f"loss shapes disagree: flow {flow.shape}, gt {gt.shape}, alpha {alpha.shape}, beta {beta.shape}"
        )
    per = mix_laplace_t(gt, alpha, beta, flow)
    if valid is None:
        return T.mean(per)
    m = np.broadcast_to(np.asarray(valid, dtype=per.data.dtype)[None], per.shape)
    count = float(m.sum())
    if count == 0:
        raise ValueError("no valid pixels")
    return T.mul(T.sum(T.mul(per, m)), 1.0 / count)


def sequence_weights(n: int, gamma: float) -> np.ndarray:
    """gamma^(N-k) for k = 0..N."""
    return np.array([gamma ** (n - k) for k in range(n + 1)], dtype=np.float64)


def combine_losses(frame_losses: Sequence[Sequence], cfg: LossConfig = LossConfig()):
    """Weighted sum over ``frame_losses[t][k]`` (scalars or tensors), divided by T."""
    total = None
    for per_iter in frame_losses:
        w = sequence_weights(len(per_iter) - 1, cfg.gamma)
        for wk, lk in zip(w, per_iter):
            term = T.mul(lk, float(wk)) if isinstance(lk, Tensor) else wk * lk
            total = term if total is None else (T.add(total, term) if isinstance(term, Tensor) else total + term)
    n_frames = len(frame_losses)
    return T.mul(total, 1.0 / n_frames) if isinstance(total, Tensor) else total / n_frames


def sequence_loss(
    preds: Sequence[M.BidirFlow],
    gts: tuple[np.ndarray, np.ndarray],
    cfg: LossConfig = LossConfig(),
    valid: tuple[np.ndarray | None, np.ndarray | None] = (None, None),
) -> Tensor:
    """Gamma-weighted loss over all iterations for both flow directions.

    ``gts`` is ``(gt_prev, gt_next)``; ``preds`` holds the ``N + 1``
    full-resolution predictions.
    """
    gt_prev, gt_next = gts
    per_dir = [
        [mol_frame_loss(p.f_prev, p.mol_alpha, p.mol_beta, gt_prev, valid[0]) for p in preds],
        [mol_frame_loss(p.f_next, p.mol_alpha, p.mol_beta, gt_next, valid[1]) for p in preds],
    ]
    return combine_losses(per_dir, cfg)


# ---------------------------------------------------------------- gradient checking


def grad_check(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-3,
    samples_per_param: int = 4,
    seed: int = 0,
    floor: float = 1e-6,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` rebuilds the scalar loss from ``params`` on every call. A random
    subset of entries per parameter is perturbed in place. The relative error
    of an entry is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if not 1e-6 <= eps <= 1e-2:
        raise ValueError("eps must lie in [1e-6, 1e-2]")
    rng = np.random.default_rng(seed)
    for p in params:
        p.requires_grad = True
        p.grad = None
    loss = fn()
    loss.backward()
    worst = 0.0
    with T.no_grad():
        for p in params:
            analytic = np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64)
            picks = rng.choice(p.size, size=min(samples_per_param, p.size), replace=False)
            for i in picks:
                idx = np.unravel_index(i, p.shape)
                orig = p.data[idx]
                p.data[idx] = orig + eps
                up = fn().data.item()
                p.data[idx] = orig - eps
                down = fn().data.item()
                p.data[idx] = orig
                numeric = (up - down) / (2 * eps)
                a = analytic[idx]
                err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                worst = max(worst, err)
    return worst


# ---------------------------------------------------------------- synthetic data


@dataclass
class SynthSample:
    frames: tuple[Tensor, Tensor, Tensor]
    flow_prev: np.ndarray  # (2, H, W) centre -> previous
    flow_next: np.ndarray  # (2, H, W) centre -> next
    seed: int

    @property
    def gts(self) -> tuple[np.ndarray, np.ndarray]:
        return self.flow_prev, self.flow_next


class _Texture:
    """Band-limited procedural RGB texture that can be evaluated at any (x, y)."""

    def __init__(self, rng: np.random.Generator, n_waves: int = 24):
        wavelength = rng.uniform(6.0, 40.0, size=(3, n_waves))
        theta = rng.uniform(0, 2 * np.pi, size=(3, n_waves))
        self.kx = 2 * np.pi / wavelength * np.cos(theta)
        self.ky = 2 * np.pi / wavelength * np.sin(theta)
        self.phase = rng.uniform(0, 2 * np.pi, size=(3, n_waves))
        self.amp = rng.uniform(0.5, 1.0, size=(3, n_waves)) / np.sqrt(n_waves)

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        arg = self.kx[..., None, None] * x + self.ky[..., None, None] * y + self.phase[..., None, None]
        v = (self.amp[..., None, None] * np.sin(arg)).sum(axis=1)
        return np.clip(0.5 + 0.5 * v, 0.0, 1.0)


def _smooth_flow(rng: np.random.Generator, h: int, w: int, max_disp: float) -> np.ndarray:
    """Global translation plus a few low-frequency modes, scaled to ``max_disp``."""
    if max_disp == 0:
        return np.zeros((2, h, w))
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    field = np.zeros((2, h, w))
    field += rng.uniform(-1, 1, size=(2, 1, 1))
    for _ in range(3):
        kx, ky = rng.uniform(0.3, 1.2, size=2) * 2 * np.pi / np.array([w, h])
        ph = rng.uniform(0, 2 * np.pi)
        field += 0.3 * rng.uniform(-1, 1, size=(2, 1, 1)) * np.sin(kx * xs + ky * ys + ph)
    peak = np.abs(field).max()
    return field * (max_disp / peak) * rng.uniform(0.6, 1.0)


def _render_warped(tex: _Texture, flow: np.ndarray, iters: int = 30) -> np.ndarray:
    """Frame J with J(x + flow(x)) = tex(x): solve y = x - flow(y) by fixed point."""
    _, h, w = flow.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    px, py = xs.copy(), ys.copy()
    for _ in range(iters):
        fx = _bilinear_clamped(flow[0], px, py)
        fy = _bilinear_clamped(flow[1], px, py)
        px, py = xs - fx, ys - fy
    return tex(px, py)


def _bilinear_clamped(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    h, w = img.shape
    x = np.clip(x, 0, w - 1)
    y = np.clip(y, 0, h - 1)
    x0 = np.minimum(np.floor(x).astype(int), w - 2) if w > 1 else np.zeros_like(x, dtype=int)
    y0 = np.minimum(np.floor(y).astype(int), h - 2) if h > 1 else np.zeros_like(y, dtype=int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax, ay = x - x0, y - y0
    return (
        img[y0, x0] * (1 - ax) * (1 - ay)
        + img[y0, x1] * ax * (1 - ay)
        + img[y1, x0] * (1 - ax) * ay
        + img[y1, x1] * ax * ay
    )


def make_synth(seed: int, dims: tuple[int, int] = (64, 96), max_disp: float = 6.0) -> SynthSample:
    """Textured triplet with smooth ground-truth flows from the centre frame."""
    h, w = dims
    if not max_disp < min(dims) / 4:
        raise ValueError("max_disp must be below a quarter of the smaller frame side")
    rng = np.random.default_rng(seed)
    tex = _Texture(rng)
    flow_next = _smooth_flow(rng, h, w, max_disp)
    flow_prev = -flow_next + 0.25 * _smooth_flow(rng, h, w, max_disp)
    if max_disp:
        peak = np.abs(flow_prev).max()
        if peak > max_disp:
            flow_prev *= max_disp / peak
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    centre = tex(xs, ys)
    nxt = _render_warped(tex, flow_next)
    prv = _render_warped(tex, flow_prev)
    frames = tuple(Tensor(f.astype(np.float32)) for f in (prv, centre, nxt))
    return SynthSample(frames, flow_prev.astype(np.float32), flow_next.astype(np.float32), seed)


def warp_valid_mask(flow: np.ndarray) -> np.ndarray:
    """Pixels whose flow target lands inside the frame."""
    _, h, w = flow.shape
    ys, xs = np.mgrid[0:h, 0:w]
    tx, ty = xs + flow[0], ys + flow[1]
    return (tx >= 0) & (tx <= w - 1) & (ty >= 0) & (ty <= h - 1)


def backward_warp(frame: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Sample ``frame`` (C, H, W) at ``x + flow(x)``."""
    _, h, w = flow.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return np.stack([_bilinear_clamped(c, xs + flow[0], ys + flow[1]) for c in frame])


def psnr(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    diff = (np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2
    if mask is not None:
        diff = diff[..., mask]
    mse = diff.mean()
    return math.inf if mse == 0 else 10 * math.log10(1.0 / mse)


# ---------------------------------------------------------------- toy training


@dataclass
class TrainLog:
    rows: list[tuple[int, float, float]] = field(default_factory=list)

    def append(self, step: int, loss: float, epe: float) -> None:
        self.rows.append((step, loss, epe))

    @property
    def losses(self) -> np.ndarray:
        return np.array([r[1] for r in self.rows])

    @property
    def epes(self) -> np.ndarray:
        return np.array([r[2] for r in self.rows])

    def to_csv(self) -> str:
        lines = ["step,loss,epe"]
        lines += [f"{s},{l:.6f},{e:.6f}" for s, l, e in self.rows]
        return "\n".join(lines) + "\n"


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 clip: float | None = 1.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip = clip
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self) -> None:
        self.t += 1
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in self.params.items()}
        if self.clip is not None:
            norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
            if norm > self.clip:
                grads = {k: g * (self.clip / norm) for k, g in grads.items()}
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            upd = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data -= upd.astype(p.data.dtype)


def sample_epe(pred: M.BidirFlow, sample: SynthSample) -> float:
    e1 = metrics.epe(pred.f_prev.data, sample.flow_prev)
    e2 = metrics.epe(pred.f_next.data, sample.flow_next)
    return 0.5 * (e1 + e2)


def evaluate(w: M.Weights, samples: Sequence[SynthSample], iters: int | None = None,
             loss_cfg: LossConfig = LossConfig()) -> tuple[float, float]:
    """Mean sequence loss and mean final-prediction EPE over ``samples``."""
    losses, epes = [], []
    with T.no_grad():
        for s in samples:
            preds = M.forward(*s.frames, w, iters=iters, training=True)
            losses.append(sequence_loss(preds, s.gts, loss_cfg).data.item())
            epes.append(sample_epe(preds[-1], s))
    return float(np.mean(losses)), float(np.mean(epes))


# hyperparameters the CLI passes through explicitly; mirror train_toy's defaults
TOY_DEFAULTS = dict(lr=1e-3, batch_size=4, num_train=16, clip=None)


def toy_config() -> M.ModelConfig:
    """Desk-scale configuration used for toy training."""
    return M.ModelConfig.paired(64, encoder_channels=(16, 32, 64), iters=4)


@dataclass
class TrainResult:
    weights: M.Weights
    log: TrainLog
    init_eval: tuple[float, float]
    final_eval: tuple[float, float]
    init_heldout_epe: float
    final_heldout_epe: float
    seconds: float


def train_toy(
    cfg: M.ModelConfig | None = None,
    steps: int = 500,
    lr: float = 1e-3,
    seed: int = 0,
    dims: tuple[int, int] = (64, 96),
    max_disp: float = 6.0,
    num_train: int = 16,
    num_eval: int = 4,
    batch_size: int = 4,
    clip: float | None = None,
    weights: M.Weights | None = None,
    loss_cfg: LossConfig = LossConfig(),
    progress: Callable[[int, float, float], None] | None = None,
) -> TrainResult:
    """Fit the network to synthetic triplets with Adam on the sequence loss.

    Training cycles over a fixed pool of ``num_train`` samples. The loss/EPE
    pair before and after training is measured on the first ``num_eval``
    pool samples; the held-out EPE uses samples the optimiser never sees.
    """
    cfg = cfg or toy_config()
    w = weights.copy() if weights is not None else M.Weights.init(cfg, seed=42 + seed)
    pool = [make_synth(seed * 100_003 + i, dims, max_disp) for i in range(num_train)]
    heldout = [make_synth(seed * 100_003 + 50_000 + i, dims, max_disp) for i in range(num_eval)]
    init_eval = evaluate(w, pool[:num_eval], loss_cfg=loss_cfg)
    init_held = evaluate(w, heldout, loss_cfg=loss_cfg)[1]
    w.trainable(True)
    opt = Adam(w.params, lr, clip=clip)
    tlog = TrainLog()
    start = time.perf_counter()
    for step in range(steps):
        w.zero_grad()
        value = epe = 0.0
        for b in range(batch_size):
            sample = pool[(step * batch_size + b) % num_train]
            preds = M.forward(*sample.frames, w, training=True)
            loss = T.mul(sequence_loss(preds, sample.gts, loss_cfg), 1.0 / batch_size)
            if not math.isfinite(loss.data.item()):
                raise DivergenceError(f"non-finite loss {loss.data.item()} at step {step}")
            loss.backward()
            value += loss.data.item()
            epe += sample_epe(preds[-1], sample) / batch_size
            del preds, loss
        if lr:
            opt.step()
        tlog.append(step, value, epe)
        if progress is not None:
            progress(step, value, epe)
    w.trainable(False)
    seconds = time.perf_counter() - start
    final_eval = evaluate(w, pool[:num_eval], loss_cfg=loss_cfg)
    final_held = evaluate(w, heldout, loss_cfg=loss_cfg)[1]
    return TrainResult(w, tlog, init_eval, final_eval, init_held, final_held, seconds)
