"""Minimal feed-forward toolkit with hand-written backprop.

Everything is plain numpy. Layers follow one contract: `forward(x)` caches
whatever backward needs, `backward(dy)` accumulates parameter gradients in
place and returns the gradient w.r.t. the input. Image tensors are laid out
[B, H, W, C]; convolution runs as one im2col matmul per layer.

Gradients here are derived by hand on purpose: the test suite checks them
against central finite differences, which only means something if the two
routes are independent.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .core import ValidationError, require

_MAGIC = b"DRCK0001"
_FORMAT_VERSION = 1
_NORM_EPS = 1e-12


class Layer:
    """Base layer. Stateless layers only override forward/backward."""

    def params(self) -> list[np.ndarray]:
        return []

    def grads(self) -> list[np.ndarray]:
        return []

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Dense(Layer):
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, dtype=np.float32):
        std = np.sqrt(2.0 / fan_in)
        self.w = rng.normal(0.0, std, size=(fan_in, fan_out)).astype(dtype)
        # small nonzero bias so an all-zero input still produces a usable vector
        self.b = rng.uniform(-0.01, 0.01, size=(fan_out,)).astype(dtype)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)
        self._x = None

    def params(self):
        return [self.w, self.b]

    def grads(self):
        return [self.gw, self.gb]

    def forward(self, x):
        self._x = x
        return x @ self.w + self.b

    def backward(self, dy):
        self.gw += self._x.T @ dy
        self.gb += dy.sum(axis=0)
        return dy @ self.w.T


class ReLU(Layer):
    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dy):
        return dy * self._mask


class Standardize(Layer):
    """Fixed per-feature affine (x - mu) / sd fit once on training data.

    mu and sd live in params() so checkpoints carry them, but their grads
    stay zero: the optimizer never moves them.
    """

    def __init__(self, dim: int, dtype=np.float32):
        self.mu = np.zeros((dim,), dtype=dtype)
        self.sd = np.ones((dim,), dtype=dtype)
        self._gmu = np.zeros_like(self.mu)
        self._gsd = np.zeros_like(self.sd)

    def fit(self, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=np.float64)
        self.mu[:] = x.mean(axis=0)
        # floor keeps dead features from blowing up the quotient
        self.sd[:] = np.maximum(x.std(axis=0), 1e-6)

    def params(self):
        return [self.mu, self.sd]

    def grads(self):
        return [self._gmu, self._gsd]

    def forward(self, x):
        return (x - self.mu) / self.sd

    def backward(self, dy):
        return dy / self.sd


class Conv2d(Layer):
    """3x3-style convolution on [B, H, W, C] via im2col, zero padding."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator,
                 kernel: int = 3, stride: int = 1, pad: int = 1, dtype=np.float32):
        self.k, self.stride, self.pad = kernel, stride, pad
        self.cin, self.cout = cin, cout
        std = np.sqrt(2.0 / (kernel * kernel * cin))
        self.w = rng.normal(0.0, std, size=(kernel, kernel, cin, cout)).astype(dtype)
        self.b = rng.uniform(-0.01, 0.01, size=(cout,)).astype(dtype)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)
        self._cols = None
        self._xshape = None

    def params(self):
        return [self.w, self.b]

    def grads(self):
        return [self.gw, self.gb]

    def forward(self, x):
        b, h, w, c = x.shape
        require(c == self.cin, f"conv expects {self.cin} channels, got {c}")
        k, s, p = self.k, self.stride, self.pad
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
        win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
        win = win[:, ::s, ::s]  # [B, Ho, Wo, C, k, k]
        ho, wo = win.shape[1], win.shape[2]
        cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(b * ho * wo, k * k * c)
        y = cols @ self.w.reshape(-1, self.cout) + self.b
        self._cols = cols
        self._xshape = (b, h, w, c)
        self._oshape = (b, ho, wo)
        return y.reshape(b, ho, wo, self.cout)

    def backward(self, dy):
        b, h, w, c = self._xshape
        _, ho, wo = self._oshape
        k, s, p = self.k, self.stride, self.pad
        dym = dy.reshape(-1, self.cout)
        self.gw += (self._cols.T @ dym).reshape(self.w.shape)
        self.gb += dym.sum(axis=0)
        dcols = (dym @ self.w.reshape(-1, self.cout).T).reshape(b, ho, wo, k, k, c)
        dxp = np.zeros((b, h + 2 * p, w + 2 * p, c), dtype=dy.dtype)
        for ki in range(k):
            for kj in range(k):
                dxp[:, ki:ki + s * ho:s, kj:kj + s * wo:s, :] += dcols[:, :, :, ki, kj, :]
        return dxp[:, p:p + h, p:p + w, :] if p else dxp


class NearestUpsample(Layer):
    """Integer-factor nearest-neighbour upsampling on [B, H, W, C]."""

    def __init__(self, factor: int = 2):
        self.f = factor

    def forward(self, x):
        self._inshape = x.shape
        return np.repeat(np.repeat(x, self.f, axis=1), self.f, axis=2)

    def backward(self, dy):
        b, h, w, c = self._inshape
        return dy.reshape(b, h, self.f, w, self.f, c).sum(axis=(2, 4))


class Flatten(Layer):
    def forward(self, x):
        self._inshape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._inshape)


class Reshape(Layer):
    """Per-sample reshape; leading batch axis is preserved."""

    def __init__(self, shape: tuple[int, ...]):
        self.shape = tuple(shape)

    def forward(self, x):
        self._inshape = x.shape
        return x.reshape((x.shape[0],) + self.shape)

    def backward(self, dy):
        return dy.reshape(self._inshape)


class MeanPoolTokens(Layer):
    """Mean over axis 1 of [B, T, D]."""

    def forward(self, x):
        self._t = x.shape[1]
        return x.mean(axis=1)

    def backward(self, dy):
        return np.repeat(dy[:, None, :], self._t, axis=1) / self._t


class RowNormalize(Layer):
    """L2-normalize the last axis. Rows with (near-)zero norm are an error."""

    def forward(self, x):
        norms = np.linalg.norm(x, axis=-1, keepdims=True)
        if np.any(norms <= _NORM_EPS):
            raise ValidationError("cannot normalize a zero-norm row")
        y = x / norms
        self._y, self._norms = y, norms
        return y

    def backward(self, dy):
        inner = np.sum(self._y * dy, axis=-1, keepdims=True)
        return (dy - self._y * inner) / self._norms


class Residual(Layer):
    """y = x + g(x) with g a small layer stack."""

    def __init__(self, inner: list[Layer]):
        self.inner = inner

    def params(self):
        return [p for l in self.inner for p in l.params()]

    def grads(self):
        return [g for l in self.inner for g in l.grads()]

    def forward(self, x):
        y = x
        for l in self.inner:
            y = l.forward(y)
        return x + y

    def backward(self, dy):
        dx = dy
        for l in reversed(self.inner):
            dx = l.backward(dx)
        return dx + dy


class Parallel(Layer):
    """y = sum of branch outputs; branches share one input and output shape."""

    def __init__(self, branches: list[list[Layer]]):
        self.branches = branches

    def params(self):
        return [p for br in self.branches for l in br for p in l.params()]

    def grads(self):
        return [g for br in self.branches for l in br for g in l.grads()]

    def forward(self, x):
        out = None
        for br in self.branches:
            y = x
            for l in br:
                y = l.forward(y)
            if out is not None:
                require(out.shape == y.shape,
                        f"parallel branch shapes differ: {out.shape} vs {y.shape}")
            out = y if out is None else out + y
        return out

    def backward(self, dy):
        dx = None
        for br in self.branches:
            d = dy
            for l in reversed(br):
                d = l.backward(d)
            dx = d if dx is None else dx + d
        return dx


class RgbdHead(Layer):
    """Squash a 4-channel map into a valid RGBD tensor.

    rgb channels go through a plain sigmoid into [0, 1]; the depth channel is
    mapped into (floor, 1] so log-depth metrics stay finite. The depth
    pre-activation carries a fixed gain: depth targets cluster high in the
    sigmoid band, and without the gain their gradient flow is several times
    weaker than rgb's, which starves depth of per-item detail.
    """

    DEPTH_FLOOR = 1e-3
    DEPTH_GAIN = 3.0

    def forward(self, x):
        require(x.shape[-1] == 4, f"rgbd head expects 4 channels, got {x.shape[-1]}")
        xs = x.copy()
        xs[..., 3] *= self.DEPTH_GAIN
        # two-sided form keeps exp() argument nonpositive: no overflow warnings
        sig = np.where(xs >= 0, 1.0 / (1.0 + np.exp(-np.abs(xs))),
                       np.exp(-np.abs(xs)) / (1.0 + np.exp(-np.abs(xs))))
        y = sig.copy()
        f = self.DEPTH_FLOOR
        y[..., 3] = f + (1.0 - f) * sig[..., 3]
        self._sig = sig
        return y

    def backward(self, dy):
        s = self._sig
        dx = dy * s * (1.0 - s)
        dx[..., 3] *= (1.0 - self.DEPTH_FLOOR) * self.DEPTH_GAIN
        return dx


class Sequential:
    """Ordered layer stack sharing the Layer contract."""

    def __init__(self, layers: list[Layer]):
        self.layers = layers

    def params(self) -> list[np.ndarray]:
        return [p for l in self.layers for p in l.params()]

    def grads(self) -> list[np.ndarray]:
        return [g for l in self.layers for g in l.grads()]

    def forward(self, x: np.ndarray) -> np.ndarray:
        for l in self.layers:
            x = l.forward(x)
        return x

    def backward(self, dy: np.ndarray) -> np.ndarray:
        for l in reversed(self.layers):
            dy = l.backward(dy)
        return dy

    def zero_grads(self) -> None:
        for g in self.grads():
            g[...] = 0.0

    def param_count(self) -> int:
        return int(sum(p.size for p in self.params()))

    def set_params(self, values: list[np.ndarray]) -> None:
        own = self.params()
        require(len(own) == len(values), f"expected {len(own)} parameter arrays, got {len(values)}")
        for p, v in zip(own, values):
            require(p.shape == tuple(v.shape), f"parameter shape mismatch: {p.shape} vs {v.shape}")
            p[...] = v.astype(p.dtype)


class SGD:
    """Stochastic gradient descent with fixed 0.9 momentum."""

    MOMENTUM = 0.9

    def __init__(self, model: Sequential, learning_rate: float):
        require(learning_rate >= 0.0, f"learning_rate must be >= 0, got {learning_rate}")
        self.model = model
        self.lr = learning_rate
        self.vel = [np.zeros_like(p) for p in model.params()]

    def step(self) -> None:
        for p, g, v in zip(self.model.params(), self.model.grads(), self.vel):
            v *= self.MOMENTUM
            v -= self.lr * g
            p += v


# ---------------------------------------------------------------------------
# checkpoint serialization: magic, JSON header, raw float32 little-endian blob


def save_checkpoint(path, kind: str, params: list[np.ndarray], meta: dict) -> None:
    """Write parameters with a self-describing header; byte-stable per run."""
    header = {
        "format_version": _FORMAT_VERSION,
        "kind": kind,
        "shapes": [list(p.shape) for p in params],
        **meta,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = b"".join(np.ascontiguousarray(p, dtype="<f4").tobytes() for p in params)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        fh.write(blob)


def load_checkpoint(path) -> tuple[dict, list[np.ndarray]]:
    """Read a checkpoint back; validates magic, version, and blob length."""
    require(Path(path).is_file(), f"checkpoint not found: {path}")
    raw = Path(path).read_bytes()
    require(raw[:8] == _MAGIC, f"{path}: not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    require(16 + hlen <= len(raw), f"{path}: truncated header")
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    require(header.get("format_version") == _FORMAT_VERSION,
            f"{path}: unsupported checkpoint version {header.get('format_version')!r}")
    shapes = [tuple(s) for s in header["shapes"]]
    blob = raw[16 + hlen:]
    need = sum(int(np.prod(s)) for s in shapes) * 4
    require(len(blob) == need, f"{path}: blob length {len(blob)} does not match shapes (need {need})")
    params, off = [], 0
    for shape in shapes:
        n = int(np.prod(shape)) * 4
        params.append(np.frombuffer(blob[off:off + n], dtype="<f4").reshape(shape).copy())
        off += n
    return header, params
