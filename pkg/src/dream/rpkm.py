"""Reverse-pathway RGBD module: encode scenes to fMRI space and decode back.

Three training stages. Stage 1 fits a conv encoder from RGBD stimuli to
measured voxel responses (MSE traded against cosine alignment). Stage 2 fits
a conv decoder from measured voxels back to RGBD (L1 plus total variation).
Stage 3 freezes the encoder and continues training the decoder on scenes
without fMRI, supervising the cycle decode(encode(d)) against d.

Loss helpers mirror the rvac module: float64 math plus exact analytic
gradients, so finite differences can audit them.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import nn
from .core import FmriSample, RgbdImage, RunConfig, ValidationError, child_rng, require

log = logging.getLogger("dream")


@dataclass(frozen=True)
class PairedData:
    """Aligned rgbd [M, H, W, 4] and fmri [M, N] rows."""

    rgbd: np.ndarray
    fmri: np.ndarray

    def __post_init__(self):
        require(self.rgbd.ndim == 4 and self.rgbd.shape[3] == 4,
                f"rgbd must be [M, H, W, 4], got {self.rgbd.shape}")
        require(self.fmri.ndim == 2, f"fmri must be [M, N], got {self.fmri.shape}")
        require(self.rgbd.shape[0] == self.fmri.shape[0],
                f"row counts differ: rgbd {self.rgbd.shape[0]}, fmri {self.fmri.shape[0]}")
        require(bool(np.isfinite(self.rgbd).all()), "rgbd contains NaN or Inf")
        require(bool(np.isfinite(self.fmri).all()), "fmri contains NaN or Inf")

    def __len__(self) -> int:
        return int(self.rgbd.shape[0])


@dataclass(frozen=True)
class StageReport:
    """Summary of one training stage, appended to the run's training log."""

    stage: int
    epochs: int
    initial_loss: float
    final_loss: float
    encoder_frozen: bool
    loss_history: tuple

    def to_dict(self) -> dict:
        return {"stage": self.stage, "epochs": self.epochs,
                "initial_loss": self.initial_loss, "final_loss": self.final_loss,
                "encoder_frozen": self.encoder_frozen, "loss_history": list(self.loss_history)}


# ---------------------------------------------------------------------------
# losses


def stage1_loss(r: np.ndarray, r_hat: np.ndarray, beta: float) -> float:
    """beta * MSE(r, r_hat) - (1 - beta) * cosine(r, r_hat) for one voxel pair."""
    val, *_ = stage1_loss_and_grad(r, r_hat, beta)
    return val


def stage1_loss_and_grad(r, r_hat, beta):
    """Returns (loss, dr, dr_hat) for flat voxel vectors."""
    require(0.0 <= beta <= 1.0, f"beta must lie in [0, 1], got {beta}")
    r = np.asarray(r, dtype=np.float64)
    rh = np.asarray(r_hat, dtype=np.float64)
    require(r.ndim == 1 and r.shape == rh.shape, f"voxel vectors must match, got {r.shape} vs {rh.shape}")
    n = r.shape[0]
    nr, nrh = np.linalg.norm(r), np.linalg.norm(rh)
    require(nr > 0.0 and nrh > 0.0, "cosine alignment is undefined for a zero vector")
    mse = float(np.mean((r - rh) ** 2))
    cos = float(r @ rh / (nr * nrh))
    loss = beta * mse - (1.0 - beta) * cos
    dcos_dr = rh / (nr * nrh) - cos * r / nr**2
    dcos_drh = r / (nr * nrh) - cos * rh / nrh**2
    dr = beta * 2.0 * (r - rh) / n - (1.0 - beta) * dcos_dr
    drh = beta * 2.0 * (rh - r) / n - (1.0 - beta) * dcos_drh
    return loss, dr, drh


def _stage1_batch_loss_and_grad(r, r_hat, beta):
    """Mean of stage1_loss over rows; gradient w.r.t. r_hat only."""
    r = np.asarray(r, dtype=np.float64)
    rh = np.asarray(r_hat, dtype=np.float64)
    b, n = r.shape
    nr = np.linalg.norm(r, axis=1)
    nrh = np.linalg.norm(rh, axis=1)
    require(bool((nr > 0).all() and (nrh > 0).all()), "cosine alignment is undefined for a zero vector")
    mse = np.mean((r - rh) ** 2, axis=1)
    dots = np.sum(r * rh, axis=1)
    cos = dots / (nr * nrh)
    loss = float(np.mean(beta * mse - (1.0 - beta) * cos))
    dcos = r / (nr * nrh)[:, None] - (cos / nrh**2)[:, None] * rh
    drh = (beta * 2.0 * (rh - r) / n - (1.0 - beta) * dcos) / b
    return loss, drh


def total_variation(x: np.ndarray) -> float:
    """Anisotropic L1 total variation normalized by value count."""
    val, _ = total_variation_and_grad(x)
    return val


def total_variation_and_grad(x):
    x = np.asarray(x, dtype=np.float64)
    require(x.ndim in (2, 3), f"expected [H, W] or [H, W, C], got shape {x.shape}")
    dv = x[1:] - x[:-1]
    dh = x[:, 1:] - x[:, :-1]
    val = float((np.abs(dv).sum() + np.abs(dh).sum()) / x.size)
    g = np.zeros_like(x)
    sv, sh = np.sign(dv), np.sign(dh)
    g[1:] += sv
    g[:-1] -= sv
    g[:, 1:] += sh
    g[:, :-1] -= sh
    return val, g / x.size


def tv_regularizer(d_hat) -> float:
    """Total variation of a decoded RGBD tensor (or RgbdImage)."""
    arr = d_hat.as_array() if isinstance(d_hat, RgbdImage) else np.asarray(d_hat)
    return total_variation(arr)


def stage2_loss(d, d_hat, tv_weight: float) -> float:
    """Mean L1 reconstruction error plus weighted total variation."""
    val, _ = stage2_loss_and_grad(d, d_hat, tv_weight)
    return val


def stage2_loss_and_grad(d, d_hat, tv_weight):
    """Returns (loss, dd_hat) for one RGBD tensor pair ([H, W, C] arrays)."""
    require(tv_weight >= 0.0, f"tv_weight must be >= 0, got {tv_weight}")
    d = np.asarray(d.as_array() if isinstance(d, RgbdImage) else d, dtype=np.float64)
    dh = np.asarray(d_hat.as_array() if isinstance(d_hat, RgbdImage) else d_hat, dtype=np.float64)
    require(d.shape == dh.shape, f"shape mismatch: {d.shape} vs {dh.shape}")
    l1 = float(np.mean(np.abs(d - dh)))
    tv, gtv = total_variation_and_grad(dh)
    grad = np.sign(dh - d) / d.size + tv_weight * gtv
    return l1 + tv_weight * tv, grad


def _stage2_batch_loss_and_grad(d, d_hat, tv_weight):
    """Mean of stage2_loss over a batch [B, H, W, C]; gradient w.r.t. d_hat."""
    d = np.asarray(d, dtype=np.float64)
    dh = np.asarray(d_hat, dtype=np.float64)
    b = d.shape[0]
    per = d[0].size
    l1 = float(np.mean(np.abs(d - dh)))
    dv = dh[:, 1:] - dh[:, :-1]
    dhz = dh[:, :, 1:] - dh[:, :, :-1]
    tv = float((np.abs(dv).sum() + np.abs(dhz).sum()) / (b * per))
    g = np.sign(dh - d) / (b * per)
    sv, sh = np.sign(dv), np.sign(dhz)
    gtv = np.zeros_like(dh)
    gtv[:, 1:] += sv
    gtv[:, :-1] -= sv
    gtv[:, :, 1:] += sh
    gtv[:, :, :-1] -= sh
    return l1 + tv_weight * tv, g + tv_weight * gtv / (b * per)


# ---------------------------------------------------------------------------
# models


class RgbdEncoder:
    """Conv stack from [H, W, 4] scenes to voxel vectors."""

    CHANNELS = (16, 32, 64, 64)

    def __init__(self, image_size: int, voxel_dim: int, rng: np.random.Generator):
        require(image_size % 16 == 0, f"image_size must be divisible by 16, got {image_size}")
        self.image_size, self.voxel_dim = image_size, voxel_dim
        self.frozen = False
        conv_branch: list[nn.Layer] = []
        cin = 4
        for cout in self.CHANNELS:
            conv_branch += [nn.Conv2d(cin, cout, rng, stride=2), nn.ReLU()]
            cin = cout
        side = image_size // 16
        conv_branch += [nn.Flatten(), nn.Dense(side * side * cin, voxel_dim, rng)]
        # zero-init linear readout of the raw scene: voxel responses have a
        # strong component that is linear in the pixels, which the strided
        # conv stack alone recovers only slowly
        skip_dense = nn.Dense(image_size * image_size * 4, voxel_dim, rng)
        skip_dense.w[...] = 0.0
        skip_dense.b[...] = 0.0
        skip_branch: list[nn.Layer] = [nn.Flatten(), skip_dense]
        self.net = nn.Sequential([nn.Parallel([conv_branch, skip_branch])])
        log.info("rgbd encoder built: %d parameters", self.net.param_count())

    @classmethod
    def build(cls, config: RunConfig) -> "RgbdEncoder":
        return cls(config.image_size, config.voxel_dim, child_rng(config.seed, "rpkm-enc-init"))

    def forward(self, x: np.ndarray) -> np.ndarray:
        require(x.ndim == 4 and x.shape[1] == x.shape[2] == self.image_size and x.shape[3] == 4,
                f"expected [B, {self.image_size}, {self.image_size}, 4], got {x.shape}")
        return self.net.forward(x)

    def freeze(self) -> None:
        self.frozen = True

    def save(self, path, config_hash: str, history: list) -> None:
        meta = {"config_hash": config_hash, "loss_history": history, "frozen": self.frozen,
                "arch": {"image_size": self.image_size, "voxel_dim": self.voxel_dim}}
        nn.save_checkpoint(path, "rpkm-encoder", self.net.params(), meta)

    @classmethod
    def load(cls, path) -> tuple["RgbdEncoder", dict]:
        header, params = nn.load_checkpoint(path)
        require(header.get("kind") == "rpkm-encoder",
                f"{path}: expected an rpkm-encoder checkpoint, got {header.get('kind')!r}")
        a = header["arch"]
        enc = cls(a["image_size"], a["voxel_dim"], np.random.Generator(np.random.PCG64(0)))
        enc.net.set_params(params)
        enc.frozen = bool(header.get("frozen", False))
        return enc, header


class RgbdDecoder:
    """Conv stack from voxel vectors back to squashed [H, W, 4] scenes."""

    def __init__(self, image_size: int, voxel_dim: int, rng: np.random.Generator):
        require(image_size % 16 == 0, f"image_size must be divisible by 16, got {image_size}")
        self.image_size, self.voxel_dim = image_size, voxel_dim
        side = image_size // 16
        self.voxel_norm = nn.Standardize(voxel_dim)
        conv_branch: list[nn.Layer] = [
            nn.Dense(voxel_dim, side * side * 64, rng), nn.ReLU(),
            nn.Reshape((side, side, 64)),
            nn.NearestUpsample(2), nn.Conv2d(64, 64, rng), nn.ReLU(),
            nn.NearestUpsample(2), nn.Conv2d(64, 32, rng), nn.ReLU(),
            nn.NearestUpsample(2), nn.Conv2d(32, 16, rng), nn.ReLU(),
            nn.NearestUpsample(2), nn.Conv2d(16, 16, rng), nn.ReLU(),
            nn.Conv2d(16, 4, rng),
        ]
        # direct voxel-to-logit readout: L1 sign gradients move a linear map
        # far faster than they thread through the conv stack, and the conv
        # branch then only has to model what the linear term cannot
        skip_dense = nn.Dense(voxel_dim, image_size * image_size * 4, rng)
        # zero start keeps early logits in the sigmoid's live range; a skip
        # path gets distinct per-output gradients, so zero breaks no symmetry
        skip_dense.w[...] = 0.0
        skip_dense.b[...] = 0.0
        skip_branch: list[nn.Layer] = [
            skip_dense,
            nn.Reshape((image_size, image_size, 4)),
        ]
        layers: list[nn.Layer] = [
            self.voxel_norm,
            nn.Parallel([conv_branch, skip_branch]),
            nn.RgbdHead(),
        ]
        self._out_conv = conv_branch[-1]
        self.net = nn.Sequential(layers)
        log.info("rgbd decoder built: %d parameters", self.net.param_count())

    def init_output_bias(self, channel_means: np.ndarray) -> None:
        """Point the output bias at the inverse-squashed channel means.

        Starting every logit at the data prior keeps the squashing head in
        its live range where per-item gradients are strongest; without this
        the far background plane alone costs many epochs of bias drift.
        """
        m = np.asarray(channel_means, dtype=np.float64)
        require(m.shape == (4,), f"expected 4 channel means, got {m.shape}")
        f = nn.RgbdHead.DEPTH_FLOOR
        s = m.copy()
        s[3] = (m[3] - f) / (1.0 - f)
        require(bool(np.all((s > 0.0) & (s < 1.0))), "channel means must lie inside the squashed range")
        logits = np.log(s / (1.0 - s))
        logits[3] /= nn.RgbdHead.DEPTH_GAIN
        self._out_conv.b[...] = logits.astype(self._out_conv.b.dtype)

    @classmethod
    def build(cls, config: RunConfig) -> "RgbdDecoder":
        return cls(config.image_size, config.voxel_dim, child_rng(config.seed, "rpkm-dec-init"))

    def forward(self, r: np.ndarray) -> np.ndarray:
        require(r.ndim == 2 and r.shape[1] == self.voxel_dim,
                f"expected [B, {self.voxel_dim}], got {r.shape}")
        return self.net.forward(r)

    def save(self, path, config_hash: str, history: list) -> None:
        meta = {"config_hash": config_hash, "loss_history": history,
                "arch": {"image_size": self.image_size, "voxel_dim": self.voxel_dim}}
        nn.save_checkpoint(path, "rpkm-decoder", self.net.params(), meta)

    @classmethod
    def load(cls, path) -> tuple["RgbdDecoder", dict]:
        header, params = nn.load_checkpoint(path)
        require(header.get("kind") == "rpkm-decoder",
                f"{path}: expected an rpkm-decoder checkpoint, got {header.get('kind')!r}")
        a = header["arch"]
        dec = cls(a["image_size"], a["voxel_dim"], np.random.Generator(np.random.PCG64(0)))
        dec.net.set_params(params)
        return dec, header


# ---------------------------------------------------------------------------
# training stages


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for lo in range(0, n, batch_size):
        idx = order[lo:lo + batch_size]
        if idx.size:
            yield idx


def train_stage1(pairs: PairedData, config: RunConfig) -> tuple[RgbdEncoder, StageReport]:
    """Fit the scene-to-voxel encoder on paired data."""
    require(len(pairs) >= 1, "stage 1 needs at least one pair")
    enc = RgbdEncoder.build(config)
    opt = nn.SGD(enc.net, config.stage1_learning_rate)
    rng = child_rng(config.seed, "rpkm-stage1")
    x32 = np.asarray(pairs.rgbd, dtype=np.float32)
    history = []
    for epoch in range(config.stage1_epochs):
        total, batches = 0.0, 0
        for idx in _epoch_batches(len(pairs), config.batch_size, rng):
            enc.net.zero_grads()
            r_hat = enc.forward(x32[idx])
            loss, drh = _stage1_batch_loss_and_grad(pairs.fmri[idx], r_hat, config.beta)
            enc.net.backward(drh.astype(np.float32))
            opt.step()
            total, batches = total + loss, batches + 1
        history.append(total / batches)
        log.info("rpkm stage 1 epoch %d: loss %.4f", epoch, history[-1])
    report = StageReport(1, config.stage1_epochs, history[0], history[-1], enc.frozen, tuple(history))
    return enc, report


def train_stage2(pairs: PairedData, encoder: RgbdEncoder, config: RunConfig) -> tuple[RgbdDecoder, StageReport]:
    """Fit the voxel-to-scene decoder on measured responses.

    The stage-1 encoder is taken for interface symmetry and width checking
    only: supervision here runs from measured voxels, never from encoder
    output, so a weak encoder cannot poison the decoder.
    """
    require(len(pairs) >= 1, "stage 2 needs at least one pair")
    require(encoder.voxel_dim == pairs.fmri.shape[1],
            f"encoder width {encoder.voxel_dim} does not match pairs width {pairs.fmri.shape[1]}")
    dec = RgbdDecoder.build(config)
    dec.voxel_norm.fit(pairs.fmri)
    dec.init_output_bias(pairs.rgbd.mean(axis=(0, 1, 2)))
    opt = nn.SGD(dec.net, config.stage2_learning_rate)
    rng = child_rng(config.seed, "rpkm-stage2")
    r32 = np.asarray(pairs.fmri, dtype=np.float32)
    history = []
    for epoch in range(config.stage2_epochs):
        total, batches = 0.0, 0
        for idx in _epoch_batches(len(pairs), config.decoder_batch_size, rng):
            dec.net.zero_grads()
            d_hat = dec.forward(r32[idx])
            loss, ddh = _stage2_batch_loss_and_grad(pairs.rgbd[idx], d_hat, config.tv_weight)
            dec.net.backward(ddh.astype(np.float32))
            opt.step()
            total, batches = total + loss, batches + 1
        history.append(total / batches)
        log.info("rpkm stage 2 epoch %d: loss %.4f", epoch, history[-1])
    report = StageReport(2, config.stage2_epochs, history[0], history[-1], False, tuple(history))
    return dec, report


def train_stage3(unpaired_rgbd: np.ndarray, encoder: RgbdEncoder, decoder: RgbdDecoder,
                 config: RunConfig) -> tuple[RgbdDecoder, StageReport]:
    """Cycle-consistency pass on scenes without fMRI; encoder must be frozen.

    The decoder is updated in place against decode(encode(d)) vs d; encoder
    parameters are never touched.
    """
    require(encoder.frozen, "stage 3 requires a frozen encoder (call encoder.freeze())")
    require(unpaired_rgbd.ndim == 4 and unpaired_rgbd.shape[3] == 4,
            f"unpaired scenes must be [M, H, W, 4], got {unpaired_rgbd.shape}")
    require(unpaired_rgbd.shape[0] >= 1, "stage 3 needs at least one scene")
    opt = nn.SGD(decoder.net, config.stage3_learning_rate)
    rng = child_rng(config.seed, "rpkm-stage3")
    x32 = np.asarray(unpaired_rgbd, dtype=np.float32)
    history = []
    for epoch in range(config.stage3_epochs):
        total, batches = 0.0, 0
        for idx in _epoch_batches(x32.shape[0], config.decoder_batch_size, rng):
            r_hat = encoder.forward(x32[idx])  # frozen: forward only
            decoder.net.zero_grads()
            d_hat = decoder.forward(r_hat)
            loss, ddh = _stage2_batch_loss_and_grad(x32[idx], d_hat, config.tv_weight)
            decoder.net.backward(ddh.astype(np.float32))
            opt.step()
            total, batches = total + loss, batches + 1
        history.append(total / batches)
        log.info("rpkm stage 3 epoch %d: loss %.4f", epoch, history[-1])
    report = StageReport(3, config.stage3_epochs, history[0], history[-1], encoder.frozen, tuple(history))
    return decoder, report


# ---------------------------------------------------------------------------
# inference


def decode_rgbd(decoder: RgbdDecoder, voxels) -> RgbdImage:
    """Decode one voxel vector (or FmriSample) to a valid RGBD image."""
    v = voxels.voxels if isinstance(voxels, FmriSample) else np.asarray(voxels)
    require(v.ndim == 1, f"expected a flat voxel vector, got shape {v.shape}")
    require(v.shape[0] == decoder.voxel_dim,
            f"voxel width {v.shape[0]} does not match decoder width {decoder.voxel_dim}")
    out = decoder.forward(v.astype(np.float32)[None])[0]
    return RgbdImage.from_array(out.astype(np.float64))


def decode_batch(decoder: RgbdDecoder, voxels: np.ndarray) -> np.ndarray:
    """Decode voxel rows [M, N] to scenes [M, H, W, 4]."""
    return decoder.forward(np.asarray(voxels, dtype=np.float32))
