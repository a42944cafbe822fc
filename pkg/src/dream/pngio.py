"""Lossless image IO: 8-bit RGB and 16-bit grayscale depth PNGs.

Float images in [0, 1] are quantized on write (255 / 65535 steps) and mapped
back on read; PNG keeps the round-trip bit-stable. Depth writes clamp to a
minimum code of 1 so decoded depth stays strictly positive.
"""

from __future__ import annotations

import io

import numpy as np
from PIL import Image

from .core import require


def encode_rgb_png(rgb: np.ndarray) -> bytes:
    require(rgb.ndim == 3 and rgb.shape[2] == 3, f"expected [H, W, 3], got {rgb.shape}")
    u8 = np.clip(np.rint(np.asarray(rgb, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(u8, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def decode_rgb_png(data: bytes) -> np.ndarray:
    img = Image.open(io.BytesIO(data))
    require(img.mode in ("RGB", "RGBA", "L"), f"unsupported PNG mode {img.mode!r}")
    arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def encode_depth16_png(depth: np.ndarray) -> bytes:
    require(depth.ndim == 2, f"expected [H, W], got {depth.shape}")
    u16 = np.clip(np.rint(np.asarray(depth, dtype=np.float64) * 65535.0), 1, 65535).astype(np.uint16)
    buf = io.BytesIO()
    Image.fromarray(u16).save(buf, format="PNG")
    return buf.getvalue()


def decode_depth16_png(data: bytes) -> np.ndarray:
    img = Image.open(io.BytesIO(data))
    arr = np.asarray(img)
    require(arr.ndim == 2, f"depth PNG must be single-channel, got shape {arr.shape}")
    return arr.astype(np.float64) / 65535.0


def save_rgb(path, rgb: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_rgb_png(rgb))


def load_rgb(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_rgb_png(fh.read())


def save_depth16(path, depth: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_depth16_png(depth))


def load_depth16(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_depth16_png(fh.read())
