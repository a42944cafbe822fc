"""Guidance cues, weighted composition, and generator backends.

A decoded scene yields three cues: semantic tokens, a block-constant color
palette (bicubic downsample, nearest upsample), and a depth map. Frozen
adapter stacks lift palette and depth onto a shared feature pyramid; the
two pyramids are mixed levelwise with scalar weights and handed to a
generator backend. The toy backend renders deterministically from the cue
features; the remote backend ships the whole bundle over HTTP instead.

The integer-block downsample is written so that cell-constant inputs come
back bit-exact (idempotence of the palette operation for block >= 4); the
arithmetic ordering in `_cubic_down_axis` is load-bearing for that.
"""

from __future__ import annotations

import base64
import functools
import hashlib
import json
import time
import urllib.error
import urllib.request
from dataclasses import dataclass

import numpy as np

from . import nn, pngio
from .core import (BackendUnavailableError, DepthMap, ProtocolError, SemanticEmbedding,
                   SpatialPalette, ValidationError, child_rng, require)

ADAPTER_SEED = 1041      # reference adapters are frozen; never tied to run seeds
WIRE_VERSION = 1
_LEVELS = 3              # feature pyramid depth: H/2, H/4, H/8
_FEAT_CH = 8             # channels per level: 4 structured + 4 learned-free conv


# ---------------------------------------------------------------------------
# resampling


def _cubic_kernel(t: np.ndarray) -> np.ndarray:
    """Keys cubic convolution kernel, a = -0.5."""
    at = np.abs(t)
    w = np.zeros_like(at)
    m1 = at <= 1.0
    m2 = (at > 1.0) & (at < 2.0)
    w[m1] = 1.5 * at[m1] ** 3 - 2.5 * at[m1] ** 2 + 1.0
    w[m2] = -0.5 * (at[m2] ** 3 - 5.0 * at[m2] ** 2 + 8.0 * at[m2] - 4.0)
    return w


def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Dense 1-d bicubic resampling matrix, pixel-center aligned, edge-clamped."""
    scale = n_in / n_out
    m = np.zeros((n_out, n_in))
    for o in range(n_out):
        s = (o + 0.5) * scale - 0.5
        base = int(np.floor(s))
        for j in range(base - 1, base + 3):
            m[o, min(max(j, 0), n_in - 1)] += float(_cubic_kernel(np.array([s - j]))[0])
    return m


def resize_bicubic(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bicubic resample of [H, W] or [H, W, C] to an arbitrary size."""
    require(img.ndim in (2, 3), f"expected [H, W] or [H, W, C], got shape {img.shape}")
    require(out_h >= 1 and out_w >= 1, "output size must be positive")
    x = np.asarray(img, dtype=np.float64)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[:, :, None]
    ah = _resize_matrix(x.shape[0], out_h)
    aw = _resize_matrix(x.shape[1], out_w)
    tmp = np.tensordot(ah, x, axes=(1, 0))            # [out_h, W, C]
    out = np.tensordot(tmp, aw, axes=(1, 1))          # [out_h, C, out_w]
    out = out.transpose(0, 2, 1)
    return out[:, :, 0] if squeeze else out


def _cubic_down_axis(x: np.ndarray, block: int) -> np.ndarray:
    """Bicubic evaluation at cell centers along axis 0, integer block factor.

    Odd blocks land on integer sample phase (the kernel collapses to the
    center sample). Even blocks land on half phase with dyadic tap weights
    [-1, 9, 9, -1]/16; computed as (8a + (a - b)) / 16 with a = inner-tap sum
    and b = outer-tap sum so that cell-constant input returns the cell value
    bit-exactly (a - b is then an exact zero).
    """
    n = x.shape[0]
    require(n % block == 0, f"axis length {n} not divisible by block {block}")
    if block % 2 == 1:
        return x[(block - 1) // 2::block].copy()
    centers = np.arange(n // block) * block + block // 2
    i0 = np.clip(centers - 2, 0, n - 1)
    i1 = centers - 1
    i2 = centers
    i3 = np.clip(centers + 1, 0, n - 1)
    a = x[i1] + x[i2]
    b = x[i0] + x[i3]
    return (8.0 * a + (a - b)) / 16.0


def downsample_bicubic(img: np.ndarray, block: int) -> np.ndarray:
    """Separable integer-factor bicubic downsample of [H, W, C] or [H, W]."""
    require(isinstance(block, (int, np.integer)) and block >= 1, f"block must be a positive int, got {block!r}")
    x = np.asarray(img, dtype=np.float64)
    x = _cubic_down_axis(x, block)
    x = np.swapaxes(_cubic_down_axis(np.swapaxes(x, 0, 1), block), 0, 1)
    return x


def nearest_upsample(img: np.ndarray, factor: int) -> np.ndarray:
    require(isinstance(factor, (int, np.integer)) and factor >= 1, f"factor must be a positive int, got {factor!r}")
    return np.repeat(np.repeat(img, factor, axis=0), factor, axis=1)


def make_palette(rgb: np.ndarray, block: int) -> SpatialPalette:
    """Extract the color-layout cue: bicubic down by `block`, nearest up.

    Exactly idempotent for every block except 2: odd blocks collapse to the
    cell-center sample and even blocks >= 4 keep the 4-tap support inside one
    cell, but block 2 reaches across the cell border. Non-divisible sizes are
    reflect-padded to the next multiple and cropped after, which trades away
    idempotence for the partial edge cells.
    """
    x = np.asarray(rgb, dtype=np.float64)
    require(x.ndim == 3 and x.shape[2] == 3, f"expected [H, W, 3], got shape {x.shape}")
    require(bool(np.isfinite(x).all()), "palette source contains NaN or Inf")
    require(bool((x >= 0.0).all() and (x <= 1.0).all()), "palette source values must lie in [0, 1]")
    h, w = x.shape[:2]
    ph = (-h) % block
    pw = (-w) % block
    if ph or pw:
        x = np.pad(x, ((0, ph), (0, pw), (0, 0)), mode="reflect")
    small = np.clip(downsample_bicubic(x, block), 0.0, 1.0)
    up = nearest_upsample(small, block)[:h, :w]
    return SpatialPalette(image=up, block=int(block))


# ---------------------------------------------------------------------------
# adapters and composition


@dataclass(frozen=True)
class AdapterFeatures:
    """Feature pyramid: one [h_l, w_l, F] array per level, finest first."""

    levels: tuple

    def __post_init__(self):
        require(len(self.levels) >= 1, "feature pyramid must have at least one level")
        for i, lv in enumerate(self.levels):
            require(isinstance(lv, np.ndarray) and lv.ndim == 3, f"level {i} must be a 3-d array")
            require(bool(np.isfinite(lv).all()), f"level {i} contains NaN or Inf")

    def shapes(self) -> list[tuple[int, ...]]:
        return [lv.shape for lv in self.levels]


def _block_mean(x: np.ndarray, factor: int) -> np.ndarray:
    h, w = x.shape[:2]
    return x.reshape(h // factor, factor, w // factor, factor, -1).mean(axis=(1, 3))


class CueAdapter:
    """Frozen feature stack for one cue kind ('color' or 'depth').

    Each pyramid level holds 4 structured channels (the cue itself, centered
    at zero: rgb in channels 0-2 for color, depth in channel 3) plus 4
    channels from a small fixed-seed conv stack. Weights never train.
    """

    def __init__(self, kind: str, size: tuple[int, int]):
        require(kind in ("color", "depth"), f"adapter kind must be 'color' or 'depth', got {kind!r}")
        h, w = size
        require(h % (2 ** _LEVELS) == 0 and w % (2 ** _LEVELS) == 0,
                f"adapter size must be divisible by {2 ** _LEVELS}, got {size}")
        self.kind = kind
        self.size = (int(h), int(w))
        cin = 3 if kind == "color" else 1
        self._convs = []
        for level in range(_LEVELS):
            rng = child_rng(ADAPTER_SEED, f"{kind}-level{level}")
            self._convs.append(nn.Sequential([
                nn.Conv2d(cin, _FEAT_CH, rng), nn.ReLU(),
                nn.Conv2d(_FEAT_CH, _FEAT_CH - 4, rng),
            ]))

    def features(self, source: np.ndarray) -> AdapterFeatures:
        levels = []
        for level in range(_LEVELS):
            pooled = _block_mean(source, 2 ** (level + 1)).astype(np.float32)
            h, w = pooled.shape[:2]
            structured = np.zeros((h, w, 4), dtype=np.float32)
            if self.kind == "color":
                structured[:, :, :3] = pooled - 0.5
            else:
                structured[:, :, 3] = pooled[:, :, 0] - 0.5
            conv = self._convs[level].forward(pooled[None])[0]
            levels.append(np.concatenate([structured, conv], axis=2))
        return AdapterFeatures(levels=tuple(levels))


@functools.lru_cache(maxsize=8)
def default_adapters(size: tuple[int, int]) -> tuple[CueAdapter, CueAdapter]:
    """Frozen reference adapters for a spatial size: (color, depth)."""
    return CueAdapter("color", size), CueAdapter("depth", size)


def adapter_features(source, adapter: CueAdapter) -> AdapterFeatures:
    """Run a cue through its adapter; source size must match the adapter."""
    if isinstance(source, SpatialPalette):
        require(adapter.kind == "color", "palette cues require a color adapter")
        arr, size = source.image, source.size
    elif isinstance(source, DepthMap):
        require(adapter.kind == "depth", "depth cues require a depth adapter")
        arr, size = source.values[:, :, None], source.size
    else:
        raise ValidationError(f"unsupported cue type {type(source).__name__}")
    require(size == adapter.size, f"cue size {size} does not match adapter size {adapter.size}")
    return adapter.features(np.asarray(arr, dtype=np.float64))


def compose_guidance(c_feat: AdapterFeatures, d_feat: AdapterFeatures,
                     omega_c: float, omega_d: float) -> AdapterFeatures:
    """Levelwise weighted sum omega_c * color + omega_d * depth."""
    require(np.isfinite(omega_c) and np.isfinite(omega_d), "guidance weights must be finite")
    require(omega_c >= 0.0 and omega_d >= 0.0, "guidance weights must be >= 0")
    require(len(c_feat.levels) == len(d_feat.levels),
            f"pyramid depth mismatch: {len(c_feat.levels)} vs {len(d_feat.levels)}")
    out = []
    for i, (a, b) in enumerate(zip(c_feat.levels, d_feat.levels)):
        require(a.shape == b.shape, f"level {i} shape mismatch: {a.shape} vs {b.shape}")
        out.append(omega_c * a + omega_d * b)
    return AdapterFeatures(levels=tuple(out))


# ---------------------------------------------------------------------------
# guidance bundle


@dataclass(frozen=True)
class GuidanceBundle:
    """Everything a generator needs: semantics, palette, depth, cue weights."""

    semantics: SemanticEmbedding
    palette: SpatialPalette
    depth: DepthMap
    omega_c: float = 1.0
    omega_d: float = 1.0

    def __post_init__(self):
        require(isinstance(self.semantics, SemanticEmbedding), "semantics must be a SemanticEmbedding")
        require(isinstance(self.palette, SpatialPalette), "palette must be a SpatialPalette")
        require(isinstance(self.depth, DepthMap), "depth must be a DepthMap")
        require(self.palette.size == self.depth.size,
                f"palette size {self.palette.size} does not match depth size {self.depth.size}")
        require(np.isfinite(self.omega_c) and np.isfinite(self.omega_d), "weights must be finite")
        require(self.omega_c >= 0.0 and self.omega_d >= 0.0, "weights must be >= 0")

    @property
    def size(self) -> tuple[int, int]:
        return self.palette.size


def compose_bundle_features(bundle: GuidanceBundle) -> AdapterFeatures:
    """Adapter features for a bundle using the frozen reference adapters."""
    color_ad, depth_ad = default_adapters(bundle.size)
    return compose_guidance(adapter_features(bundle.palette, color_ad),
                            adapter_features(bundle.depth, depth_ad),
                            bundle.omega_c, bundle.omega_d)


# ---------------------------------------------------------------------------
# wire format (remote generation protocol, version 1)


def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def encode_request(bundle: GuidanceBundle) -> bytes:
    """Serialize a bundle: JSON header plus base64 payloads.

    Semantics travel as raw float32 little-endian row-major; palette as an
    8-bit RGB PNG; depth as a 16-bit grayscale PNG. Noise is not transmitted:
    sampling is the server's concern.
    """
    t, d = bundle.semantics.shape
    h, w = bundle.size
    payload = {
        "version": WIRE_VERSION, "T": t, "D": d, "H": h, "W": w,
        "omega_c": float(bundle.omega_c), "omega_d": float(bundle.omega_d),
        "semantics": _b64(np.ascontiguousarray(bundle.semantics.tokens, dtype="<f4").tobytes()),
        "palette": _b64(pngio.encode_rgb_png(bundle.palette.image)),
        "depth": _b64(pngio.encode_depth16_png(bundle.depth.values)),
    }
    return json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")


def decode_request(data: bytes) -> GuidanceBundle:
    """Parse a wire request back into a bundle (palette block degrades to 1)."""
    try:
        payload = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ProtocolError(f"request is not valid JSON: {e}") from e
    if payload.get("version") != WIRE_VERSION:
        raise ProtocolError(f"unsupported wire version {payload.get('version')!r}")
    try:
        t, d, h, w = (int(payload[k]) for k in ("T", "D", "H", "W"))
        sem = np.frombuffer(base64.b64decode(payload["semantics"]), dtype="<f4")
        palette = pngio.decode_rgb_png(base64.b64decode(payload["palette"]))
        depth = pngio.decode_depth16_png(base64.b64decode(payload["depth"]))
        omega_c, omega_d = float(payload["omega_c"]), float(payload["omega_d"])
    except (KeyError, ValueError, OSError) as e:
        raise ProtocolError(f"malformed request payload: {e}") from e
    if sem.size != t * d:
        raise ProtocolError(f"semantics payload has {sem.size} values, header says {t}x{d}")
    if palette.shape[:2] != (h, w) or depth.shape != (h, w):
        raise ProtocolError("image payloads do not match header size")
    try:
        return GuidanceBundle(
            semantics=SemanticEmbedding(tokens=sem.reshape(t, d).astype(np.float64)),
            palette=SpatialPalette(image=palette, block=1),
            depth=DepthMap(values=depth),
            omega_c=omega_c, omega_d=omega_d)
    except ValidationError as e:
        raise ProtocolError(f"decoded payload violates bundle contracts: {e}") from e


def encode_response(rgb: np.ndarray) -> bytes:
    """Server-side: a reconstruction leaves as a lossless RGB PNG."""
    return pngio.encode_rgb_png(rgb)


def decode_response(data: bytes, expected_size: tuple[int, int]) -> np.ndarray:
    try:
        rgb = pngio.decode_rgb_png(data)
    except Exception as e:
        raise ProtocolError(f"response is not a decodable PNG: {e}") from e
    if rgb.shape[:2] != tuple(expected_size):
        raise ProtocolError(f"response size {rgb.shape[:2]} does not match request {expected_size}")
    return rgb


# ---------------------------------------------------------------------------
# generator backends


class GeneratorBackend:
    """Turns (noise, cue features, semantics) into an RGB image in [0, 1]."""

    name = "base"

    def generate(self, z, features: AdapterFeatures, semantics: SemanticEmbedding) -> np.ndarray:
        raise NotImplementedError

    def generate_from_bundle(self, bundle: GuidanceBundle, z) -> np.ndarray:
        return self.generate(z, compose_bundle_features(bundle), bundle.semantics)


def _digest_seed(*parts: bytes) -> int:
    return int.from_bytes(hashlib.sha256(b"|".join(parts)).digest()[:8], "little")


class ToyRenderer(GeneratorBackend):
    """Deterministic local renderer.

    Paints the finest feature level back to pixel space: structured rgb
    channels recenter around 0.5, the depth channel shades, and a smooth
    semantics-plus-noise-keyed texture is added at low amplitude. Identical
    inputs give bit-identical outputs.
    """

    name = "toy"
    SHADE = 0.15
    TEXTURE_AMP = 0.03

    def generate(self, z, features: AdapterFeatures, semantics: SemanticEmbedding) -> np.ndarray:
        finest = np.asarray(features.levels[0], dtype=np.float64)
        require(finest.shape[2] >= 4, f"finest level needs >= 4 channels, got {finest.shape[2]}")
        h, w = finest.shape[0] * 2, finest.shape[1] * 2
        base = 0.5 + nearest_upsample(finest[:, :, :3], 2)
        shade = nearest_upsample(finest[:, :, 3], 2)
        zb = b"" if z is None else np.ascontiguousarray(np.asarray(z, dtype=np.float64)).tobytes()
        sb = np.ascontiguousarray(semantics.tokens, dtype=np.float64).tobytes()
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(_digest_seed(sb, zb))))
        coarse = rng.uniform(-1.0, 1.0, size=(max(1, h // 8), max(1, w // 8), 3))
        tex = nearest_upsample(coarse, 8)[:h, :w]
        rgb = base + self.SHADE * shade[:, :, None] + self.TEXTURE_AMP * tex
        return np.clip(rgb, 0.0, 1.0)


class RemoteBackend(GeneratorBackend):
    """HTTP client for an external generator speaking the wire format.

    POSTs the serialized bundle, expects a PNG back. Connection failures are
    retried with exponential backoff for a fixed number of attempts, then
    surface as BackendUnavailableError; malformed answers raise
    ProtocolError without retrying.
    """

    name = "remote"

    def __init__(self, url: str | None = None, timeout: float = 10.0, attempts: int = 3,
                 backoff: float = 0.5, max_request_bytes: int = 32 << 20,
                 opener=None, sleeper=None):
        import os
        self.url = url or os.environ.get("DREAM_BACKEND_URL")
        require(bool(self.url), "remote backend needs a URL (argument or DREAM_BACKEND_URL)")
        require(attempts >= 1, f"attempts must be >= 1, got {attempts}")
        self.timeout = timeout
        self.attempts = attempts
        self.backoff = backoff
        self.max_request_bytes = max_request_bytes
        self._opener = opener or self._default_opener
        self._sleep = sleeper or time.sleep

    @staticmethod
    def _default_opener(request: urllib.request.Request, timeout: float) -> bytes:
        with urllib.request.urlopen(request, timeout=timeout) as resp:
            return resp.read()

    def generate(self, z, features, semantics):
        raise ValidationError("the remote backend generates from full bundles only "
                              "(its server owns the adapters); use reconstruct()")

    def generate_from_bundle(self, bundle: GuidanceBundle, z) -> np.ndarray:
        body = encode_request(bundle)
        if len(body) > self.max_request_bytes:
            raise ValidationError(f"request of {len(body)} bytes exceeds the "
                                  f"{self.max_request_bytes}-byte limit")
        req = urllib.request.Request(self.url, data=body,
                                     headers={"Content-Type": "application/json"}, method="POST")
        last: Exception | None = None
        for attempt in range(self.attempts):
            if attempt:
                self._sleep(self.backoff * (2 ** (attempt - 1)))
            try:
                raw = self._opener(req, self.timeout)
                return decode_response(raw, bundle.size)
            except urllib.error.HTTPError as e:
                if 400 <= e.code < 500:
                    raise ProtocolError(f"backend rejected the request: HTTP {e.code}") from e
                last = e
            except (urllib.error.URLError, OSError) as e:
                last = e
        raise BackendUnavailableError(
            f"backend at {self.url} unreachable after {self.attempts} attempts: {last}")


_BACKENDS = {"toy": ToyRenderer, "remote": RemoteBackend}


def get_backend(name: str, **kwargs) -> GeneratorBackend:
    """Instantiate a backend by id; unknown ids are a validation error."""
    require(name in _BACKENDS, f"unknown backend id {name!r} (known: {sorted(_BACKENDS)})")
    return _BACKENDS[name](**kwargs)


def reconstruct(bundle: GuidanceBundle, backend, z=None) -> np.ndarray:
    """Render a bundle with a backend (instance or id). Returns [H, W, 3]."""
    if isinstance(backend, str):
        backend = get_backend(backend)
    require(isinstance(backend, GeneratorBackend), f"not a backend: {type(backend).__name__}")
    rgb = backend.generate_from_bundle(bundle, z)
    rgb = np.asarray(rgb, dtype=np.float64)
    require(rgb.ndim == 3 and rgb.shape[2] == 3, f"backend returned shape {rgb.shape}, expected [H, W, 3]")
    require(rgb.shape[:2] == bundle.size, f"backend returned size {rgb.shape[:2]}, bundle is {bundle.size}")
    require(bool(np.isfinite(rgb).all()), "backend returned NaN or Inf")
    require(bool((rgb >= 0.0).all() and (rgb <= 1.0).all()), "backend output must lie in [0, 1]")
    return rgb
