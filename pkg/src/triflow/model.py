"""Three-frame bidirectional flow network.

The network predicts, for the centre frame of a triplet, a flow to the
previous frame and a flow to the next frame at 1/``corr_scale`` resolution,
refines both jointly with a recurrent update driven by two correlation
pyramids, and lifts them to input resolution with convex upsampling.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import corrvol
from . import tensors as T
from .tensors import DTYPE, ShapeError, Tensor, UnsupportedError

SUPPORTED_SCALES = (8, 16, 24)
WEIGHTS_MAGIC = b"MFOF"
WEIGHTS_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 1024
    context_dim: int = 512
    corr_scale: int = 16
    radius: int = 4
    num_levels: int = 4
    use_gma: bool = True
    iters: int = 8
    encoder_channels: tuple[int, int, int] = (64, 96, 128)
    normalize_corr: bool = True
    num_frames: int = 3

    def __post_init__(self):
        if self.num_frames != 3:
            raise UnsupportedError("only the three-frame model is implemented")
        if self.corr_scale not in SUPPORTED_SCALES:
            raise UnsupportedError(f"corr_scale must be one of {SUPPORTED_SCALES}")
        if self.context_dim < 8:
            raise ValueError("context_dim must be at least 8")
        if self.radius < 0 or self.num_levels < 1 or self.iters < 0:
            raise ValueError("radius, num_levels and iters must be non-negative (levels >= 1)")

    @classmethod
    def paired(cls, context_dim: int, **kwargs) -> "ModelConfig":
        """Config with ``feature_dim = 2 * context_dim``."""
        return cls(feature_dim=2 * context_dim, context_dim=context_dim, **kwargs)

    @classmethod
    def tiny(cls, context_dim: int = 8, **kwargs) -> "ModelConfig":
        kwargs.setdefault("encoder_channels", (8, 8, 16))
        kwargs.setdefault("radius", 2)
        kwargs.setdefault("num_levels", 2)
        kwargs.setdefault("iters", 2)
        return cls.paired(context_dim, **kwargs)

    @property
    def upsample_factor(self) -> int:
        return self.corr_scale

    @property
    def corr_channels(self) -> int:
        return self.num_levels * (2 * self.radius + 1) ** 2

    def with_(self, **kwargs) -> "ModelConfig":
        return replace(self, **kwargs)


# ---------------------------------------------------------------- weights


def _conv_specs(cfg: ModelConfig) -> dict[str, tuple[int, int, int]]:
    """name -> (out, in, kernel) for every convolution in the network."""
    c0, c1, c2 = cfg.encoder_channels
    dc, df = cfg.context_dim, cfg.feature_dim
    last_k = 3
    specs: dict[str, tuple[int, int, int]] = {}
    for prefix, cin, cout in (("fnet", 3, df), ("cnet", 9, 2 * dc)):
        specs[f"{prefix}.conv1"] = (c0, cin, 7)
        specs[f"{prefix}.conv2"] = (c1, c0, 3)
        specs[f"{prefix}.conv3"] = (c2, c1, 3)
        specs[f"{prefix}.conv4"] = (c2, c2, 3)
        specs[f"{prefix}.conv5"] = (cout, c2, last_k)
    specs["head.conv1"] = (dc, dc, 3)
    specs["head.conv2"] = (6, dc, 3)
    specs["mask.conv1"] = (dc, dc, 3)
    specs["mask.conv2"] = (cfg.upsample_factor**2 * 9, dc, 1)
    specs["menc.corr1"] = (dc, 2 * cfg.corr_channels, 1)
    specs["menc.corr2"] = (dc * 3 // 4, dc, 3)
    specs["menc.flow1"] = (dc // 2, 4, 7)
    specs["menc.flow2"] = (dc // 4, dc // 2, 3)
    specs["menc.fuse"] = (dc - 4, dc * 3 // 4 + dc // 4, 3)
    specs["gma.query"] = (dc, dc, 1)
    specs["gma.key"] = (dc, dc, 1)
    specs["gma.value"] = (dc, dc, 1)
    specs["gma.proj"] = (dc, 2 * dc, 1)
    specs["gru.z"] = (dc, 3 * dc, 3)
    specs["gru.r"] = (dc, 3 * dc, 3)
    specs["gru.q"] = (dc, 3 * dc, 3)
    return specs


def _orthogonal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    return q if rows >= cols else q.T


@dataclass
class Weights:
    """Named parameter tensors plus the config they were built for."""

    config: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> list[str]:
        return sorted(self.params)

    def trainable(self, flag: bool = True) -> "Weights":
        for t in self.params.values():
            t.requires_grad = flag
            t.grad = None
        return self

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def copy(self) -> "Weights":
        return Weights(self.config, {k: Tensor(v.data.copy()) for k, v in self.params.items()})

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name in self.names():
            h.update(name.encode())
            h.update(self.params[name].data.tobytes())
        return h.hexdigest()

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 42) -> "Weights":
        rng = np.random.default_rng(seed)
        params = {}
        for name, (out, cin, k) in _conv_specs(config).items():
            kernel = _orthogonal(rng, out, cin * k * k).reshape(out, cin, k, k)
            if name == "head.conv2":
                kernel = kernel * 0.1
            params[f"{name}.weight"] = Tensor(kernel.astype(DTYPE))
            params[f"{name}.bias"] = Tensor(np.zeros(out, dtype=DTYPE))
        return cls(config, params)

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as fh:
            fh.write(WEIGHTS_MAGIC)
            fh.write(struct.pack("<II", WEIGHTS_VERSION, len(self.params)))
            for name in self.names():
                data = self.params[name].data
                raw = name.encode("utf-8")
                fh.write(struct.pack("<I", len(raw)))
                fh.write(raw)
                fh.write(struct.pack("<I", data.ndim))
                fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
                fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path: str | Path, config: ModelConfig) -> "Weights":
        blob = Path(path).read_bytes()
        if blob[:4] != WEIGHTS_MAGIC:
            raise ValueError(f"{path}: not a weight file (bad magic)")
        version, count = struct.unpack_from("<II", blob, 4)
        if version != WEIGHTS_VERSION:
            raise ValueError(f"{path}: unsupported weight file version {version}")
        off = 12
        params = {}
        try:
            for _ in range(count):
                (nlen,) = struct.unpack_from("<I", blob, off)
                off += 4
                name = blob[off : off + nlen].decode("utf-8")
                off += nlen
                (rank,) = struct.unpack_from("<I", blob, off)
                off += 4
                dims = struct.unpack_from(f"<{rank}I", blob, off)
                off += 4 * rank
                n = int(np.prod(dims)) if rank else 1
                if off + 4 * n > len(blob):
                    raise ValueError(f"{path}: truncated payload for {name}")
                arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(dims)
                off += 4 * n
                params[name] = Tensor(arr.astype(DTYPE))
        except struct.error as exc:
            raise ValueError(f"{path}: truncated weight file") from exc
        expected = {f"{k}.{s}" for k in _conv_specs(config) for s in ("weight", "bias")}
        if set(params) != expected:
            raise ValueError(f"{path}: parameter names do not match the model config")
        for name, (out, cin, k) in _conv_specs(config).items():
            if params[f"{name}.weight"].shape != (out, cin, k, k):
                raise ValueError(f"{path}: shape mismatch for {name}")
        return cls(config, params)


def _conv(x: Tensor, w: Weights, name: str, stride: int = 1, padding: int | None = None) -> Tensor:
    kernel = w[f"{name}.weight"]
    if padding is None:
        padding = kernel.shape[-1] // 2
    return T.conv2d(x, kernel, w[f"{name}.bias"], stride=stride, padding=padding)


# ---------------------------------------------------------------- data types


@dataclass
class BidirFlow:
    f_prev: Tensor
    f_next: Tensor
    mol_alpha: Tensor
    mol_beta: Tensor

    def __post_init__(self):
        dims = {t.shape[1:] for t in (self.f_prev, self.f_next, self.mol_alpha, self.mol_beta)}
        if len(dims) != 1:
            raise ShapeError("BidirFlow components must share spatial dims")

    @property
    def spatial(self) -> tuple[int, int]:
        return self.f_prev.shape[1:]

    def flows(self) -> Tensor:
        return T.concat([self.f_prev, self.f_next], axis=0)

    def numpy(self) -> dict[str, np.ndarray]:
        return {
            "f_prev": self.f_prev.data,
            "f_next": self.f_next.data,
            "mol_alpha": self.mol_alpha.data,
            "mol_beta": self.mol_beta.data,
        }


@dataclass
class RefinementState:
    h: Tensor
    g: Tensor
    flow: BidirFlow
    k: int = 0


# ---------------------------------------------------------------- blocks


def _check_frame(frame: Tensor, cfg: ModelConfig) -> None:
    if frame.ndim != 3:
        raise ShapeError("frames must be (C, H, W)")
    m = cfg.corr_scale
    if frame.shape[1] % m or frame.shape[2] % m:
        raise ShapeError(f"frame dims {frame.shape[1:]} must be multiples of {m}; pad first")


def _encoder(x: Tensor, w: Weights, prefix: str) -> Tensor:
    scale = w.config.corr_scale
    x = T.relu(_conv(x, w, f"{prefix}.conv1", stride=2))
    x = T.relu(_conv(x, w, f"{prefix}.conv2", stride=2))
    x = T.relu(_conv(x, w, f"{prefix}.conv3", stride=2))
    x = T.relu(_conv(x, w, f"{prefix}.conv4"))
    # last stage: 1/8 -> 1/scale
    stride = scale // 8
    return _conv(x, w, f"{prefix}.conv5", stride=stride, padding=1 if stride < 3 else 0)


def feature_encoder(frame: Tensor, w: Weights) -> Tensor:
    """(3, H, W) frame -> (D_f, H/s, W/s) features."""
    _check_frame(frame, w.config)
    if frame.shape[0] != 3:
        raise ShapeError("feature encoder expects 3-channel frames")
    return _encoder(frame, w, "fnet")


def flow_head(h: Tensor, w: Weights) -> BidirFlow:
    """Decode hidden state into two flows plus per-pixel mixture parameters."""
    x = T.relu(_conv(h, w, "head.conv1"))
    out = _conv(x, w, "head.conv2")
    f_prev, f_next, a_logit, beta = T.split(out, [2, 2, 1, 1], axis=0)
    return BidirFlow(f_prev, f_next, T.sigmoid(a_logit), beta)


def context_network(i_prev: Tensor, i_cur: Tensor, i_next: Tensor, w: Weights):
    """Returns ``(g, h0, flow0)`` from the stacked triplet."""
    if not (i_prev.shape == i_cur.shape == i_next.shape):
        raise ShapeError("context network frames must share shape")
    _check_frame(i_cur, w.config)
    x = _encoder(T.concat([i_prev, i_cur, i_next], axis=0), w, "cnet")
    dc = w.config.context_dim
    h_raw, g_raw = T.split(x, [dc, dc], axis=0)
    h0 = T.tanh(h_raw)
    g = T.relu(g_raw)
    return g, h0, flow_head(h0, w)


def motion_features(c_prev: Tensor, c_next: Tensor, flow: BidirFlow, w: Weights) -> Tensor:
    cfg = w.config
    if c_prev.shape[0] != cfg.corr_channels or c_next.shape[0] != cfg.corr_channels:
        raise ShapeError(
            f"correlation features have {c_prev.shape[0]}/{c_next.shape[0]} channels, "
            f"config expects {cfg.corr_channels}"
        )
    flows = flow.flows()
    c = T.relu(_conv(T.concat([c_prev, c_next], axis=0), w, "menc.corr1"))
    c = T.relu(_conv(c, w, "menc.corr2"))
    f = T.relu(_conv(flows, w, "menc.flow1"))
    f = T.relu(_conv(f, w, "menc.flow2"))
    fused = T.relu(_conv(T.concat([c, f], axis=0), w, "menc.fuse"))
    return T.concat([fused, flows], axis=0)


def _log3(n: int) -> float:
    m, k = 0, n
    while k > 1 and k % 3 == 0:
        k //= 3
        m += 1
    if k == 1:
        return float(m)
    return math.log(n) / math.log(3)


def attention_scale(num_positions: int, context_dim: int) -> float:
    """log_3(H*W) / sqrt(D_c)."""
    return _log3(num_positions) / math.sqrt(context_dim)


def gma_aggregate(fm: Tensor, g: Tensor, w: Weights) -> Tensor:
    """Globally aggregate motion features with context-driven attention."""
    dc, h, wd = g.shape
    n = h * wd
    q = T.reshape(_conv(g, w, "gma.query"), (dc, n))
    k = T.reshape(_conv(g, w, "gma.key"), (dc, n))
    v = T.reshape(_conv(fm, w, "gma.value"), (dc, n))
    logits = T.mul(T.matmul(T.transpose(q, (1, 0)), k), DTYPE(attention_scale(n, dc)))
    attn = T.softmax(logits, axis=1)  # (query, key)
    agg = T.reshape(T.matmul(v, T.transpose(attn, (1, 0))), (dc, h, wd))
    return _conv(T.concat([fm, agg], axis=0), w, "gma.proj")


def updater(x: Tensor, g: Tensor, h: Tensor, w: Weights) -> Tensor:
    """Convolutional GRU step on hidden state ``h`` driven by ``x`` and context ``g``."""
    inp = T.concat([x, g], axis=0)
    hx = T.concat([h, inp], axis=0)
    z = T.sigmoid(_conv(hx, w, "gru.z"))
    r = T.sigmoid(_conv(hx, w, "gru.r"))
    q = T.tanh(_conv(T.concat([T.mul(r, h), inp], axis=0), w, "gru.q"))
    return T.add(h, T.mul(z, T.sub(q, h)))


def refine_step(
    state: RefinementState,
    pyr_prev: corrvol.CorrelationPyramid,
    pyr_next: corrvol.CorrelationPyramid,
    w: Weights,
) -> RefinementState:
    cfg = w.config
    c_prev = corrvol.lookup(pyr_prev, state.flow.f_prev, cfg.radius)
    c_next = corrvol.lookup(pyr_next, state.flow.f_next, cfg.radius)
    fm = motion_features(c_prev, c_next, state.flow, w)
    x = gma_aggregate(fm, state.g, w) if cfg.use_gma else fm
    h = updater(x, state.g, state.h, w)
    delta = flow_head(h, w)
    flow = BidirFlow(
        T.add(state.flow.f_prev, delta.f_prev),
        T.add(state.flow.f_next, delta.f_next),
        delta.mol_alpha,
        delta.mol_beta,
    )
    return RefinementState(h, state.g, flow, state.k + 1)


def mask_head(h: Tensor, w: Weights) -> Tensor:
    x = T.relu(_conv(h, w, "mask.conv1"))
    return T.mul(_conv(x, w, "mask.conv2"), DTYPE(0.25))


def convex_upsample(
    coarse: Tensor, mask_logits: Tensor, factor: int = 16, scale_values: bool = True
) -> Tensor:
    """Lift (C, h, w) to (C, h*f, w*f) as softmax-weighted 3x3 coarse neighbourhoods.

    The combination is formed as ``centre + sum_k w_k (x_k - centre)``, which
    equals ``sum_k w_k x_k`` since the weights sum to one and reproduces a
    constant field exactly. Borders replicate the edge values.
    """
    c, h, wd = coarse.shape
    if mask_logits.shape != (factor * factor * 9, h, wd):
        raise ShapeError(
            f"mask has shape {mask_logits.shape}, expected {(factor * factor * 9, h, wd)}"
        )
    x = T.mul(coarse, DTYPE(factor)) if scale_values else coarse
    weights = T.softmax(T.reshape(mask_logits, (9, factor, factor, h, wd)), axis=0)
    nb = T.unfold3x3(x)  # (C, 9, h, w)
    centre = T.getitem(nb, (slice(None), slice(4, 5)))
    diff = T.reshape(T.sub(nb, centre), (c, 9, 1, 1, h, wd))
    mix = T.sum(T.mul(weights, diff), axis=1)  # (C, f, f, h, w)
    out = T.add(mix, T.reshape(x, (c, 1, 1, h, wd)))
    out = T.transpose(out, (0, 3, 1, 4, 2))  # (C, h, f, w, f)
    return T.reshape(out, (c, h * factor, wd * factor))


def upsample_flow(state: RefinementState, w: Weights) -> BidirFlow:
    f = w.config.upsample_factor
    mask = mask_head(state.h, w)
    flows = convex_upsample(state.flow.flows(), mask, f)
    params = convex_upsample(
        T.concat([state.flow.mol_alpha, state.flow.mol_beta], axis=0), mask, f, scale_values=False
    )
    f_prev, f_next = T.split(flows, [2, 2], axis=0)
    alpha, beta = T.split(params, [1, 1], axis=0)
    return BidirFlow(f_prev, f_next, alpha, beta)


def build_pyramids(feats: tuple[Tensor, Tensor, Tensor], cfg: ModelConfig):
    f_prev, f_cur, f_next = feats
    pyrs = []
    for other in (f_prev, f_next):
        base = corrvol.build_base(f_cur, other, cfg.normalize_corr)
        pyrs.append(corrvol.build_pyramid_fast(base, cfg.num_levels, cfg.corr_scale))
    return tuple(pyrs)


def refine(
    frames: tuple[Tensor, Tensor, Tensor],
    pyr_prev: corrvol.CorrelationPyramid,
    pyr_next: corrvol.CorrelationPyramid,
    w: Weights,
    iters: int,
    late_upsample: bool = True,
    return_states: bool = False,
):
    """Context network, ``iters`` refinement steps, and convex upsampling.

    With ``late_upsample`` only the final state is upsampled; otherwise every
    state (initial plus each refinement) is.
    """
    g, h0, flow0 = context_network(*frames, w)
    state = RefinementState(h0, g, flow0, 0)
    states = [state]
    preds = [] if late_upsample else [upsample_flow(state, w)]
    for _ in range(iters):
        state = refine_step(state, pyr_prev, pyr_next, w)
        states.append(state)
        if not late_upsample:
            preds.append(upsample_flow(state, w))
    if late_upsample:
        preds = [upsample_flow(state, w)]
    return (preds, states) if return_states else preds


def forward(
    i_prev: Tensor,
    i_cur: Tensor,
    i_next: Tensor,
    w: Weights,
    iters: int | None = None,
    training: bool = True,
) -> list[BidirFlow]:
    """Full-resolution predictions for a padded triplet.

    Training mode returns ``iters + 1`` upsampled predictions; inference
    mode returns only the final one.
    """
    cfg = w.config
    iters = cfg.iters if iters is None else iters
    feats = tuple(feature_encoder(f, w) for f in (i_prev, i_cur, i_next))
    pyr_prev, pyr_next = build_pyramids(feats, cfg)
    return refine((i_prev, i_cur, i_next), pyr_prev, pyr_next, w, iters, late_upsample=not training)
