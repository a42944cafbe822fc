"""Contrastive fMRI-to-semantics encoder with mixup-style augmentation.

An MLP maps a voxel vector to a [T, D] grid of unit-norm semantic tokens.
Training pulls the pooled token vector toward paired text/image embeddings
with an in-batch softmax contrastive loss; a second pass feeds convex
mixtures of voxel vectors and supervises them against both endpoints'
targets, weighted by the mix coefficient. Targets are never updated.

All losses are computed in float64 regardless of input dtype; gradient
helpers return the exact analytic gradients that training consumes, so the
finite-difference suite exercises the real training math.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import nn
from .core import FmriSample, RunConfig, SemanticEmbedding, ValidationError, child_rng, require

log = logging.getLogger("dream")


# ---------------------------------------------------------------------------
# batch containers


@dataclass(frozen=True)
class TripletBatch:
    """Aligned rows: fmri [M, N], text/image embedding targets [M, D]."""

    fmri: np.ndarray
    text: np.ndarray
    image: np.ndarray

    def __post_init__(self):
        require(self.fmri.ndim == 2, f"fmri must be [M, N], got {self.fmri.shape}")
        require(self.text.ndim == 2, f"text must be [M, D], got {self.text.shape}")
        require(self.image.shape == self.text.shape,
                f"image targets {self.image.shape} must match text targets {self.text.shape}")
        require(self.fmri.shape[0] == self.text.shape[0],
                f"row counts differ: fmri {self.fmri.shape[0]}, targets {self.text.shape[0]}")
        for name in ("fmri", "text", "image"):
            arr = getattr(self, name)
            require(bool(np.isfinite(arr).all()), f"{name} contains NaN or Inf")

    def __len__(self) -> int:
        return int(self.fmri.shape[0])

    def take(self, idx: np.ndarray) -> "TripletBatch":
        return TripletBatch(self.fmri[idx], self.text[idx], self.image[idx])


@dataclass(frozen=True)
class MixedBatch:
    """Convex mixtures of fmri rows: row i is lam_i * r_i + (1 - lam_i) * r_{k_i}."""

    mixed_fmri: np.ndarray
    lambdas: np.ndarray
    partners: np.ndarray

    def __post_init__(self):
        n = self.mixed_fmri.shape[0]
        require(self.lambdas.shape == (n,), f"lambdas must be [{n}], got {self.lambdas.shape}")
        require(self.partners.shape == (n,), f"partners must be [{n}], got {self.partners.shape}")
        require(bool(((self.lambdas >= 0.0) & (self.lambdas <= 1.0)).all()), "lambdas must lie in [0, 1]")
        require(np.issubdtype(self.partners.dtype, np.integer), "partners must be integer indices")
        require(bool(((self.partners >= 0) & (self.partners < n)).all()), "partner indices out of range")
        require(bool((self.partners != np.arange(n)).all()), "partner k_i must differ from i")


def mixco_mix(batch: TripletBatch, rng: np.random.Generator) -> MixedBatch:
    """Draw per-row mix coefficients and distinct partners, return mixtures."""
    n = len(batch)
    require(n >= 2, f"mixing needs at least 2 rows, got {n}")
    lam = rng.uniform(0.0, 1.0, size=n)
    partners = (np.arange(n) + rng.integers(1, n, size=n)) % n
    mixed = lam[:, None] * batch.fmri + (1.0 - lam)[:, None] * batch.fmri[partners]
    return MixedBatch(mixed_fmri=mixed, lambdas=lam, partners=partners)


# ---------------------------------------------------------------------------
# losses (float64 internally, analytic gradients)


def _softmax_rows(s: np.ndarray) -> np.ndarray:
    m = s.max(axis=1, keepdims=True)
    e = np.exp(s - m)
    return e / e.sum(axis=1, keepdims=True)


def _check_pair(p: np.ndarray, t: np.ndarray, tau: float) -> tuple[np.ndarray, np.ndarray]:
    require(tau > 0.0, f"tau must be positive, got {tau}")
    require(p.ndim == 2 and t.ndim == 2, "embeddings must be 2-d [n, D]")
    require(p.shape == t.shape, f"shape mismatch: {p.shape} vs {t.shape}")
    require(p.shape[0] >= 2, f"need at least 2 rows for in-batch negatives, got {p.shape[0]}")
    return np.asarray(p, dtype=np.float64), np.asarray(t, dtype=np.float64)


def _infonce(p: np.ndarray, t: np.ndarray, tau: float) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean over rows of -log softmax(p_i . t_j / tau)_[j=i]; grads wrt p and t."""
    n = p.shape[0]
    s = p @ t.T / tau
    a = _softmax_rows(s)
    m = s.max(axis=1, keepdims=True)
    logz = m[:, 0] + np.log(np.exp(s - m).sum(axis=1))
    loss = float(np.mean(logz - np.diag(s)))
    ds = (a - np.eye(n)) / n
    return loss, ds @ t / tau, ds.T @ p / tau


def contrastive_loss(p: np.ndarray, c: np.ndarray, v: np.ndarray, tau: float) -> float:
    """Two-term in-batch contrastive loss: fMRI vs text plus fMRI vs image."""
    val, *_ = contrastive_loss_and_grad(p, c, v, tau)
    return val


def contrastive_loss_and_grad(p, c, v, tau):
    """Returns (loss, dp, dc, dv)."""
    p64, c64 = _check_pair(p, c, tau)
    _, v64 = _check_pair(p, v, tau)
    lc, dp_c, dc = _infonce(p64, c64, tau)
    lv, dp_v, dv = _infonce(p64, v64, tau)
    return lc + lv, dp_c + dp_v, dc, dv


def mixco_loss(p_star: np.ndarray, targets: np.ndarray, lambdas: np.ndarray,
               partners: np.ndarray, tau: float) -> float:
    """Mix-weighted cross entropy of mixture embeddings against one target set.

    Row i is supervised toward its own target with weight lam_i and toward
    its partner's target with weight 1 - lam_i.
    """
    val, _ = mixco_loss_and_grad(p_star, targets, lambdas, partners, tau)
    return val


def mixco_loss_and_grad(p_star, targets, lambdas, partners, tau):
    """Returns (loss, dp_star). Targets are treated as constants."""
    p64, t64 = _check_pair(p_star, targets, tau)
    n = p64.shape[0]
    lam = np.asarray(lambdas, dtype=np.float64)
    part = np.asarray(partners)
    require(lam.shape == (n,), f"lambdas must be [{n}], got {lam.shape}")
    require(part.shape == (n,), f"partners must be [{n}], got {part.shape}")
    require(bool(((part >= 0) & (part < n)).all()), "partner indices out of range")
    s = p64 @ t64.T / tau
    a = _softmax_rows(s)
    m = s.max(axis=1, keepdims=True)
    logz = m[:, 0] + np.log(np.exp(s - m).sum(axis=1))
    rows = np.arange(n)
    nll = lam * (logz - s[rows, rows]) + (1.0 - lam) * (logz - s[rows, part])
    loss = float(np.mean(nll))
    ds = a.copy()
    ds[rows, rows] -= lam
    ds[rows, part] -= 1.0 - lam
    ds /= n
    return loss, ds @ t64 / tau


def combined_loss_and_grad(p, p_star, c, v, lambdas, partners, tau, alpha):
    """Full training objective on pooled embeddings.

    total = contrastive(p; c, v) + alpha * (mixco(p*; c) + mixco(p*; v)),
    with the mix term applied to both target sets. Returns
    (total, contrastive_part, mixco_part, dp, dp_star).
    """
    require(alpha >= 0.0, f"alpha must be >= 0, got {alpha}")
    l_p, dp, _, _ = contrastive_loss_and_grad(p, c, v, tau)
    l_mc, dps_c = mixco_loss_and_grad(p_star, c, lambdas, partners, tau)
    l_mv, dps_v = mixco_loss_and_grad(p_star, v, lambdas, partners, tau)
    l_mix = l_mc + l_mv
    return l_p + alpha * l_mix, l_p, l_mix, dp, alpha * (dps_c + dps_v)


def total_loss(batch: TripletBatch, mixed: MixedBatch, encoder: "FmriEncoder",
               tau: float, alpha: float) -> float:
    """Objective value for a batch and its mixed companion under an encoder."""
    p = encoder.pooled(batch.fmri)
    p_star = encoder.pooled(mixed.mixed_fmri)
    total, *_ = combined_loss_and_grad(p, p_star, batch.text, batch.image,
                                       mixed.lambdas, mixed.partners, tau, alpha)
    return total


# ---------------------------------------------------------------------------
# encoder


class FmriEncoder:
    """MLP from voxel space to a unit-row [T, D] semantic grid."""

    def __init__(self, voxel_dim: int, tokens: int, embed_dim: int,
                 hidden_dim: int, res_blocks: int, rng: np.random.Generator, dtype=np.float32):
        self.voxel_dim, self.tokens, self.embed_dim = voxel_dim, tokens, embed_dim
        self.hidden_dim, self.res_blocks = hidden_dim, res_blocks
        td = tokens * embed_dim
        self.voxel_norm = nn.Standardize(voxel_dim, dtype)
        layers: list[nn.Layer] = [self.voxel_norm,
                                  nn.Dense(voxel_dim, hidden_dim, rng, dtype), nn.ReLU()]
        for _ in range(res_blocks):
            layers.append(nn.Residual([
                nn.Dense(hidden_dim, hidden_dim, rng, dtype), nn.ReLU(),
                nn.Dense(hidden_dim, hidden_dim, rng, dtype),
            ]))
        layers += [
            nn.Dense(hidden_dim, td, rng, dtype),            # linear projector
            nn.ReLU(), nn.Dense(td, 2 * td, rng, dtype),     # MLP projector head
            nn.ReLU(), nn.Dense(2 * td, td, rng, dtype),
            nn.Reshape((tokens, embed_dim)), nn.RowNormalize(),
        ]
        self.net = nn.Sequential(layers)
        self.head = nn.Sequential([nn.MeanPoolTokens(), nn.RowNormalize()])
        log.info("fmri encoder built: %d parameters", self.net.param_count())

    @classmethod
    def build(cls, config: RunConfig) -> "FmriEncoder":
        return cls(config.voxel_dim, config.tokens, config.embed_dim,
                   config.hidden_dim, config.res_blocks, child_rng(config.seed, "rvac-init"))

    def _check_width(self, x: np.ndarray) -> None:
        require(x.shape[-1] == self.voxel_dim,
                f"voxel width {x.shape[-1]} does not match encoder width {self.voxel_dim}")

    def fit_voxel_stats(self, voxels: np.ndarray) -> None:
        """Fit the input standardizer on training voxels (loud means, raw scale)."""
        self._check_width(np.asarray(voxels))
        self.voxel_norm.fit(voxels)

    def encode(self, voxels: np.ndarray) -> np.ndarray:
        """Voxel rows [B, N] -> token grids [B, T, D] with unit rows."""
        x = np.asarray(voxels)
        require(x.ndim == 2, f"expected [B, N], got shape {x.shape}")
        self._check_width(x)
        return self.net.forward(x)

    def encode_sample(self, sample: FmriSample) -> SemanticEmbedding:
        self._check_width(sample.voxels)
        tokens = self.net.forward(sample.voxels.astype(np.float32)[None])[0]
        return SemanticEmbedding(tokens=tokens.astype(np.float64))

    def pooled(self, voxels: np.ndarray) -> np.ndarray:
        """Renormalized token mean: the vector the contrastive loss sees."""
        return self.head.forward(self.encode(voxels))

    def backward_pooled(self, dp: np.ndarray) -> None:
        """Backprop a pooled-embedding gradient into parameter grads."""
        self.net.backward(self.head.backward(dp))

    # --- persistence

    def save(self, path, config_hash: str, history: list[dict]) -> None:
        meta = {
            "config_hash": config_hash,
            "loss_history": history,
            "arch": {"voxel_dim": self.voxel_dim, "tokens": self.tokens,
                     "embed_dim": self.embed_dim, "hidden_dim": self.hidden_dim,
                     "res_blocks": self.res_blocks},
        }
        nn.save_checkpoint(path, "rvac-encoder", self.net.params(), meta)

    @classmethod
    def load(cls, path) -> tuple["FmriEncoder", dict]:
        header, params = nn.load_checkpoint(path)
        require(header.get("kind") == "rvac-encoder",
                f"{path}: expected an rvac-encoder checkpoint, got {header.get('kind')!r}")
        a = header["arch"]
        enc = cls(a["voxel_dim"], a["tokens"], a["embed_dim"], a["hidden_dim"], a["res_blocks"],
                  np.random.Generator(np.random.PCG64(0)))
        enc.net.set_params(params)
        return enc, header


# ---------------------------------------------------------------------------
# training and retrieval


def train_rvac(data: TripletBatch, config: RunConfig) -> tuple[FmriEncoder, list[dict]]:
    """Fit the encoder on aligned triplets; returns (encoder, per-epoch history).

    Target tensors are read-only throughout: only encoder parameters move.
    """
    require(len(data) >= 2, "training needs at least 2 items")
    encoder = FmriEncoder.build(config)
    opt = nn.SGD(encoder.net, config.learning_rate)
    rng = child_rng(config.seed, "rvac-train")
    fmri32 = np.asarray(data.fmri, dtype=np.float32)
    encoder.fit_voxel_stats(fmri32)
    history: list[dict] = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(data))
        sums = np.zeros(3)
        batches = 0
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo:lo + config.batch_size]
            if idx.size < 2:
                continue  # a single row has no in-batch negative
            sub = data.take(idx)
            mixed = mixco_mix(TripletBatch(fmri32[idx], sub.text, sub.image), rng)
            encoder.net.zero_grads()
            p = encoder.pooled(fmri32[idx])
            p_star_input = mixed.mixed_fmri.astype(np.float32)
            # two forward passes share parameters; run each branch's backward
            # before the next forward so layer caches stay coherent
            l_p, dp, _, _ = contrastive_loss_and_grad(p, sub.text, sub.image, config.tau)
            encoder.backward_pooled(dp.astype(np.float32))
            p_star = encoder.pooled(p_star_input)
            l_mc, dps_c = mixco_loss_and_grad(p_star, sub.text, mixed.lambdas, mixed.partners, config.tau)
            l_mv, dps_v = mixco_loss_and_grad(p_star, sub.image, mixed.lambdas, mixed.partners, config.tau)
            encoder.backward_pooled((config.alpha * (dps_c + dps_v)).astype(np.float32))
            opt.step()
            sums += (l_p + config.alpha * (l_mc + l_mv), l_p, l_mc + l_mv)
            batches += 1
        means = sums / max(batches, 1)
        history.append({"epoch": epoch, "loss": float(means[0]),
                        "contrastive": float(means[1]), "mixco": float(means[2])})
        log.info("rvac epoch %d: loss %.4f", epoch, means[0])
    return encoder, history


def retrieval_accuracy(encoder: FmriEncoder, data: TripletBatch, batch_size: int = 16) -> float:
    """Top-1 in-batch retrieval over consecutive evaluation batches.

    A hit means the highest-similarity target row IS the query's own target
    row (value equality), so duplicated targets inside a batch are counted
    as legitimate alternatives.
    """
    require(batch_size >= 2, f"retrieval needs batch_size >= 2, got {batch_size}")
    hits, total = 0, 0
    fmri32 = np.asarray(data.fmri, dtype=np.float32)
    for lo in range(0, len(data), batch_size):
        idx = np.arange(lo, min(lo + batch_size, len(data)))
        if idx.size < 2:
            continue
        p = encoder.pooled(fmri32[idx])
        t = data.text[idx]
        sims = p @ t.T
        best = np.argmax(sims, axis=1)
        for i in range(idx.size):
            if np.array_equal(t[best[i]], t[i]):
                hits += 1
        total += idx.size
    require(total > 0, "no evaluable batches")
    return hits / total
