"""Middlebury .flo files, 8-bit images, and colour-wheel flow rendering."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

FLO_MAGIC = 202021.25


class FormatError(ValueError):
    """File content does not follow the expected format."""


def write_flo(path, flow) -> None:
    """Write a (2, H, W) flow as little-endian .flo."""
    flow = np.asarray(flow, dtype="<f4")
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ValueError(f"flow must be (2, H, W); got {flow.shape}")
    _, h, w = flow.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<fii", FLO_MAGIC, w, h))
        fh.write(np.ascontiguousarray(flow.transpose(1, 2, 0)).tobytes())


def read_flo(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 12:
        raise FormatError(f"{path}: truncated .flo header")
    magic, w, h = struct.unpack_from("<fii", blob, 0)
    if magic != FLO_MAGIC:
        raise FormatError(f"{path}: bad .flo magic {magic}")
    if w < 0 or h < 0:
        raise FormatError(f"{path}: negative dimensions {w}x{h}")
    n = 2 * w * h
    if len(blob) - 12 != 4 * n:
        raise FormatError(f"{path}: payload has {len(blob) - 12} bytes, expected {4 * n}")
    data = np.frombuffer(blob, dtype="<f4", count=n, offset=12)
    return data.reshape(h, w, 2).transpose(2, 0, 1).astype(np.float32)


# ---------------------------------------------------------------- images


def _read_ppm(blob: bytes, path) -> np.ndarray:
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PPM header")
        tokens.append(blob[start:pos])
    pos += 1
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise FormatError(f"{path}: malformed PPM header") from exc
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PPM is supported (maxval {maxval})")
    payload = blob[pos : pos + 3 * w * h]
    if len(payload) != 3 * w * h:
        raise FormatError(f"{path}: truncated PPM payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)


def read_image(path) -> np.ndarray:
    """Load an 8-bit PPM (P6) or PNG as (3, H, W) float32 in [0, 1]."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[:2] == b"P6":
        rgb = _read_ppm(blob, path)
    elif blob[:8] == b"\x89PNG\r\n\x1a\n":
        from PIL import Image

        with Image.open(path) as im:
            if im.mode in ("I", "I;16", "I;16B", "I;16L") or "16" in im.mode:
                raise FormatError(f"{path}: 16-bit PNG is not supported")
            if im.mode not in ("L", "RGB", "RGBA", "P", "LA"):
                raise FormatError(f"{path}: unsupported PNG mode {im.mode}")
            arr = np.asarray(im.convert("L") if im.mode in ("L", "LA") else im.convert("RGB"))
        rgb = np.repeat(arr[..., None], 3, axis=2) if arr.ndim == 2 else arr
    else:
        raise FormatError(f"{path}: unsupported image format")
    return (rgb.transpose(2, 0, 1).astype(np.float32) / 255.0).astype(np.float32)


def to_uint8(img) -> np.ndarray:
    """(3, H, W) floats in [0, 1] -> (H, W, 3) uint8."""
    img = np.asarray(img)
    if img.dtype == np.uint8:
        return img
    return np.clip(np.rint(img.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)


def write_image(path, img) -> None:
    """Write (3, H, W) floats in [0, 1] or an (H, W, 3) uint8 array as PPM or PNG by suffix."""
    path = Path(path)
    rgb = to_uint8(img)
    suffix = path.suffix.lower()
    if suffix in (".ppm", ".pnm"):
        h, w, _ = rgb.shape
        with open(path, "wb") as fh:
            fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            fh.write(np.ascontiguousarray(rgb).tobytes())
    elif suffix == ".png":
        from PIL import Image

        Image.fromarray(rgb, mode="RGB").save(path)
    else:
        raise FormatError(f"{path}: unsupported image format {suffix!r}")


# ---------------------------------------------------------------- colour wheel


def make_colorwheel() -> np.ndarray:
    """The 55-entry Middlebury colour wheel, (55, 3) in [0, 255]."""
    ry, yg, gc, cb, bm, mr = 15, 6, 4, 11, 13, 6
    wheel = np.zeros((ry + yg + gc + cb + bm + mr, 3))
    col = 0
    wheel[0:ry, 0] = 255
    wheel[0:ry, 1] = np.floor(255 * np.arange(ry) / ry)
    col += ry
    wheel[col : col + yg, 0] = 255 - np.floor(255 * np.arange(yg) / yg)
    wheel[col : col + yg, 1] = 255
    col += yg
    wheel[col : col + gc, 1] = 255
    wheel[col : col + gc, 2] = np.floor(255 * np.arange(gc) / gc)
    col += gc
    wheel[col : col + cb, 1] = 255 - np.floor(255 * np.arange(cb) / cb)
    wheel[col : col + cb, 2] = 255
    col += cb
    wheel[col : col + bm, 2] = 255
    wheel[col : col + bm, 0] = np.floor(255 * np.arange(bm) / bm)
    col += bm
    wheel[col : col + mr, 2] = 255 - np.floor(255 * np.arange(mr) / mr)
    wheel[col : col + mr, 0] = 255
    return wheel


def colorize(flow, max_norm: float | None = None) -> np.ndarray:
    """(2, H, W) flow -> (H, W, 3) uint8 RGB.

    Hue encodes direction, saturation encodes magnitude relative to
    ``max_norm`` (default: the field's largest magnitude).
    """
    flow = np.asarray(flow, dtype=np.float64)
    u, v = flow[0], flow[1]
    rad = np.sqrt(u**2 + v**2)
    norm = max_norm if max_norm is not None else (rad.max() if rad.size else 0.0)
    if norm > 0:
        u, v, rad = u / norm, v / norm, rad / norm
    wheel = make_colorwheel()
    ncols = wheel.shape[0]
    angle = np.arctan2(-v, -u) / np.pi
    fk = (angle + 1) / 2 * (ncols - 1)
    k0 = np.floor(fk).astype(np.int64)
    k1 = (k0 + 1) % ncols
    f = fk - k0
    img = np.zeros(u.shape + (3,), dtype=np.uint8)
    for i in range(3):
        c0 = wheel[k0, i] / 255.0
        c1 = wheel[k1, i] / 255.0
        c = (1 - f) * c0 + f * c1
        inside = rad <= 1
        c = np.where(inside, 1 - rad * (1 - c), c * 0.75)
        img[..., i] = np.floor(255 * c).astype(np.uint8)
    return img
