"""Shared data contracts for the decoding pipeline.

Every array that crosses a module boundary is validated here once, at
construction time, so downstream code can assume finite values and agreed
shapes. All randomness in the package flows through `seeded_rng` /
`child_rng`; nothing reads global RNG state.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np


class ValidationError(ValueError):
    """Raised when an input violates a documented contract."""


class BackendUnavailableError(RuntimeError):
    """Raised when a remote generator backend cannot be reached."""


class ProtocolError(RuntimeError):
    """Raised when a remote generator backend answers with malformed data."""


def require(cond: bool, msg: str) -> None:
    if not cond:
        raise ValidationError(msg)


# ---------------------------------------------------------------------------
# randomness


def seeded_rng(seed: int) -> np.random.Generator:
    """Deterministic generator for a run seed. Same seed, same stream."""
    require(isinstance(seed, (int, np.integer)) and seed >= 0, f"seed must be a non-negative int, got {seed!r}")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


def child_rng(seed: int, label: str) -> np.random.Generator:
    """Independent named substream of a run seed.

    Components (encoder init, data shuffling, scene sampling, ...) each draw
    from their own labelled stream so adding draws to one component never
    shifts another.
    """
    require(isinstance(seed, (int, np.integer)) and seed >= 0, f"seed must be a non-negative int, got {seed!r}")
    h = int.from_bytes(hashlib.sha256(label.encode("utf-8")).digest()[:8], "little")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((int(seed), h))))


def stable_hash(payload: dict) -> str:
    """SHA-256 over a canonical JSON rendering. Used to stamp configs."""
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------------------
# validation helpers


def _check_array(name: str, arr: np.ndarray, ndim: int) -> np.ndarray:
    require(isinstance(arr, np.ndarray), f"{name} must be a numpy array, got {type(arr).__name__}")
    require(arr.ndim == ndim, f"{name} must have {ndim} dims, got shape {arr.shape}")
    require(np.issubdtype(arr.dtype, np.floating), f"{name} must be float, got dtype {arr.dtype}")
    require(bool(np.isfinite(arr).all()), f"{name} contains NaN or Inf")
    return arr


def _check_unit_interval(name: str, arr: np.ndarray) -> None:
    require(bool((arr >= 0.0).all() and (arr <= 1.0).all()), f"{name} values must lie in [0, 1]")


def _check_depth_values(name: str, arr: np.ndarray) -> None:
    require(bool((arr > 0.0).all() and (arr <= 1.0).all()), f"{name} values must lie in (0, 1]")


# ---------------------------------------------------------------------------
# data contracts


@dataclass(frozen=True)
class FmriSample:
    """One trial-averaged fMRI response vector.

    voxels is a flat float vector of length N; N is fixed per subject and
    consumers reject samples whose N differs from what they were built for.
    """

    subject_id: str
    stimulus_id: str
    voxels: np.ndarray
    trial_count: int = 1

    def __post_init__(self):
        require(isinstance(self.subject_id, str) and self.subject_id != "", "subject_id must be a non-empty string")
        require(isinstance(self.stimulus_id, str) and self.stimulus_id != "", "stimulus_id must be a non-empty string")
        _check_array("voxels", self.voxels, 1)
        require(self.voxels.shape[0] > 0, "voxels must be non-empty")
        require(int(self.trial_count) >= 1, f"trial_count must be >= 1, got {self.trial_count}")

    @property
    def voxel_dim(self) -> int:
        return int(self.voxels.shape[0])


@dataclass(frozen=True)
class DepthMap:
    """Relative depth on (0, 1]; a small positive floor keeps log-metrics finite."""

    values: np.ndarray

    def __post_init__(self):
        _check_array("depth values", self.values, 2)
        h, w = self.values.shape
        require(h >= 8 and w >= 8, f"depth map must be at least 8x8, got {h}x{w}")
        _check_depth_values("depth", self.values)

    @property
    def size(self) -> tuple[int, int]:
        return (int(self.values.shape[0]), int(self.values.shape[1]))


@dataclass(frozen=True)
class RgbdImage:
    """RGB image with an aligned depth map, both HxW, H and W >= 8."""

    rgb: np.ndarray
    depth: np.ndarray

    def __post_init__(self):
        _check_array("rgb", self.rgb, 3)
        require(self.rgb.shape[2] == 3, f"rgb must be HxWx3, got {self.rgb.shape}")
        h, w = self.rgb.shape[:2]
        require(h >= 8 and w >= 8, f"rgb must be at least 8x8, got {h}x{w}")
        _check_unit_interval("rgb", self.rgb)
        _check_array("depth", self.depth, 2)
        require(self.depth.shape == (h, w), f"depth shape {self.depth.shape} does not match rgb {h}x{w}")
        _check_depth_values("depth", self.depth)

    @property
    def size(self) -> tuple[int, int]:
        return (int(self.rgb.shape[0]), int(self.rgb.shape[1]))

    def as_array(self) -> np.ndarray:
        """Stacked HxWx4 view: rgb channels then depth."""
        return np.concatenate([self.rgb, self.depth[:, :, None]], axis=2)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "RgbdImage":
        _check_array("rgbd array", arr, 3)
        require(arr.shape[2] == 4, f"rgbd array must be HxWx4, got {arr.shape}")
        return cls(rgb=arr[:, :, :3], depth=arr[:, :, 3])

    def depth_map(self) -> DepthMap:
        return DepthMap(values=self.depth)


@dataclass(frozen=True)
class SemanticEmbedding:
    """Token grid of semantic features, shape [T, D], unit-norm rows."""

    tokens: np.ndarray

    _NORM_TOL = 1e-4  # absorbs float32 round-trips through files and the wire

    def __post_init__(self):
        _check_array("tokens", self.tokens, 2)
        t, d = self.tokens.shape
        require(t >= 1 and d >= 1, f"tokens must be non-empty, got shape {self.tokens.shape}")
        norms = np.linalg.norm(np.asarray(self.tokens, dtype=np.float64), axis=1)
        require(bool(np.all(np.abs(norms - 1.0) <= self._NORM_TOL)),
                f"token rows must be unit-norm (max deviation {np.max(np.abs(norms - 1.0)):.3g})")

    @property
    def shape(self) -> tuple[int, int]:
        return (int(self.tokens.shape[0]), int(self.tokens.shape[1]))


@dataclass(frozen=True)
class SpatialPalette:
    """Color layout cue: an RGB image that is constant on block x block cells.

    The last row/column of cells may be truncated when block does not divide
    the image size; constancy is enforced on the actual cell extents.
    """

    image: np.ndarray
    block: int

    def __post_init__(self):
        _check_array("palette image", self.image, 3)
        require(self.image.shape[2] == 3, f"palette image must be HxWx3, got {self.image.shape}")
        _check_unit_interval("palette image", self.image)
        require(isinstance(self.block, (int, np.integer)) and self.block >= 1,
                f"block must be a positive int, got {self.block!r}")
        h, w = self.image.shape[:2]
        b = int(self.block)
        for i in range(0, h, b):
            for j in range(0, w, b):
                cell = self.image[i:i + b, j:j + b]
                if not (cell == cell[0, 0]).all():
                    raise ValidationError(f"palette cell at ({i},{j}) is not constant")

    @property
    def size(self) -> tuple[int, int]:
        return (int(self.image.shape[0]), int(self.image.shape[1]))


# ---------------------------------------------------------------------------
# run configuration


@dataclass(frozen=True)
class RunConfig:
    """Flat configuration for every pipeline phase.

    One namespace, JSON-serializable, no nesting; unknown keys are rejected
    so typos fail loudly instead of silently using defaults.
    """

    # loss weights and temperatures
    alpha: float = 0.3           # MixCo weight in the total contrastive objective
    beta: float = 0.9            # MSE share in the stage-1 encoder loss
    tau: float = 0.07            # softmax temperature
    tv_weight: float = 1.0       # total-variation weight in the decoder loss
    omega_c: float = 1.0         # color-cue guidance weight
    omega_d: float = 1.0         # depth-cue guidance weight
    # geometry
    image_size: int = 64         # H = W of scenes
    voxel_dim: int = 256         # synthetic N
    embed_dim: int = 64          # D, semantic feature width
    tokens: int = 4              # T, semantic token count
    palette_block: int = 8       # palette cell size in pixels
    # model sizes
    hidden_dim: int = 256        # fMRI encoder trunk width
    res_blocks: int = 2          # residual blocks in the fMRI encoder trunk
    # optimization; the phases carry different loss scales, so each trains
    # with its own step size and epoch budget
    batch_size: int = 32         # contrastive training and the stage-1 encoder
    learning_rate: float = 0.01  # contrastive training step size
    epochs: int = 40             # contrastive training epochs
    stage1_learning_rate: float = 0.05
    stage1_epochs: int = 12
    stage2_learning_rate: float = 1.0
    stage2_epochs: int = 8
    stage3_learning_rate: float = 0.3
    stage3_epochs: int = 4
    decoder_batch_size: int = 8  # stages 2 and 3 (pixel losses want small batches)
    # dataset
    train_items: int = 2000
    test_items: int = 200
    unpaired_items: int = 2000
    noise_sigma: float = 0.05    # measurement noise on synthetic fMRI
    num_shapes: int = 3
    num_colors: int = 8
    # metrics
    cd_bins: int = 64
    # determinism
    seed: int = 42

    def __post_init__(self):
        require(0.0 <= self.alpha, f"alpha must be >= 0, got {self.alpha}")
        require(0.0 <= self.beta <= 1.0, f"beta must lie in [0, 1], got {self.beta}")
        require(self.tau > 0.0, f"tau must be positive, got {self.tau}")
        require(self.tv_weight >= 0.0, f"tv_weight must be >= 0, got {self.tv_weight}")
        require(self.omega_c >= 0.0 and self.omega_d >= 0.0, "guidance weights must be >= 0")
        for name in ("image_size", "voxel_dim", "embed_dim", "tokens", "palette_block", "hidden_dim",
                     "res_blocks", "batch_size", "epochs", "stage1_epochs", "stage2_epochs",
                     "stage3_epochs", "decoder_batch_size", "train_items", "test_items",
                     "unpaired_items", "num_shapes", "num_colors", "cd_bins"):
            v = getattr(self, name)
            require(isinstance(v, (int, np.integer)) and v >= 1, f"{name} must be a positive int, got {v!r}")
        require(self.image_size >= 8, f"image_size must be >= 8, got {self.image_size}")
        require(self.num_shapes <= 3, f"at most 3 shape kinds are defined, got {self.num_shapes}")
        require(self.num_colors <= 8, f"at most 8 palette colors are defined, got {self.num_colors}")
        require(self.num_shapes * self.num_colors <= self.embed_dim,
                "class count must not exceed embed_dim (orthonormal codebook)")
        for name in ("learning_rate", "stage1_learning_rate", "stage2_learning_rate",
                     "stage3_learning_rate"):
            v = getattr(self, name)
            require(v >= 0.0, f"{name} must be >= 0, got {v}")
        require(self.noise_sigma >= 0.0, f"noise_sigma must be >= 0, got {self.noise_sigma}")
        require(isinstance(self.seed, (int, np.integer)) and self.seed >= 0,
                f"seed must be a non-negative int, got {self.seed!r}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    @classmethod
    def from_dict(cls, payload: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(payload) - known)
        require(not unknown, f"unknown config keys: {', '.join(unknown)}")
        return cls(**payload)

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def hash(self) -> str:
        return stable_hash(self.to_dict())
