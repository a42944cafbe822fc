"""Data layer: synthetic scene worlds, dataset files, NSD-format ingestion.

The synthetic world draws colored shapes (disk / square / triangle) over a
shaded background, gives every pixel an analytic planar depth, codes the
shape-color class with a row of an orthonormal codebook, and produces fMRI
as a fixed seeded linear readout of the flattened RGBD plus Gaussian noise.
With zero noise the responses are exactly linear in the stimulus, which is
what makes the generator auditable by a least-squares oracle.

Datasets live on disk as one raw little-endian float32 file per item per
kind, listed by a versioned JSON manifest. Real recorded data enters through
`ingest_nsd_format`, which validates voxel widths against the subject table
and averages repeated trials.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (FmriSample, RunConfig, SemanticEmbedding, ValidationError,
                   child_rng, require)

MANIFEST_VERSION = 1
DEPTH_FLOOR = 1e-3

# voxel counts per subject for the supported recorded-data release
NSD_VOXEL_WIDTHS = {"sub01": 11694, "sub02": 9987, "sub05": 9312, "sub07": 8980}

_COLORS = np.array([
    [0.90, 0.10, 0.10],   # red
    [0.10, 0.75, 0.15],   # green
    [0.15, 0.25, 0.90],   # blue
    [0.95, 0.85, 0.10],   # yellow
    [0.85, 0.15, 0.85],   # magenta
    [0.10, 0.80, 0.85],   # cyan
    [0.95, 0.55, 0.10],   # orange
    [0.55, 0.15, 0.75],   # purple
])
_SHAPES = ("disk", "square", "triangle")


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class ManifestItem:
    """One stimulus: id plus relative paths to its array files (or None)."""

    stimulus_id: str
    fmri: str | None
    rgbd: str | None
    embedding: str | None
    class_id: int | None = None
    trial_count: int = 1

    def to_dict(self) -> dict:
        return {"stimulus_id": self.stimulus_id, "fmri": self.fmri, "rgbd": self.rgbd,
                "embedding": self.embedding, "class_id": self.class_id,
                "trial_count": self.trial_count}


@dataclass(frozen=True)
class DatasetManifest:
    """Versioned description of one dataset split."""

    split: str
    subject_id: str
    voxel_dim: int
    image_size: int
    embed_dim: int
    items: tuple
    extra: dict = field(default_factory=dict)
    format_version: int = MANIFEST_VERSION

    def __post_init__(self):
        require(self.split in ("train", "test", "unpaired"),
                f"split must be train, test, or unpaired, got {self.split!r}")
        require(self.format_version == MANIFEST_VERSION,
                f"unsupported manifest version {self.format_version!r}")
        ids = [it.stimulus_id for it in self.items]
        require(len(ids) == len(set(ids)), "duplicate stimulus ids in manifest")

    def stimulus_ids(self) -> set[str]:
        return {it.stimulus_id for it in self.items}

    def to_dict(self) -> dict:
        return {"format_version": self.format_version, "split": self.split,
                "subject_id": self.subject_id, "voxel_dim": self.voxel_dim,
                "image_size": self.image_size, "embed_dim": self.embed_dim,
                "item_count": len(self.items), "extra": self.extra,
                "items": [it.to_dict() for it in self.items]}

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        require(path.exists(), f"manifest not found: {path}")
        with open(path) as fh:
            payload = json.load(fh)
        version = payload.get("format_version")
        require(version == MANIFEST_VERSION, f"{path}: unsupported manifest version {version!r}")
        items = tuple(ManifestItem(stimulus_id=i["stimulus_id"], fmri=i["fmri"], rgbd=i["rgbd"],
                                   embedding=i["embedding"], class_id=i.get("class_id"),
                                   trial_count=i.get("trial_count", 1))
                      for i in payload["items"])
        return cls(split=payload["split"], subject_id=payload["subject_id"],
                   voxel_dim=payload["voxel_dim"], image_size=payload["image_size"],
                   embed_dim=payload["embed_dim"], items=items,
                   extra=payload.get("extra", {}))

    def validate_files(self, split_dir) -> None:
        """Check that every referenced array file exists with the right size."""
        split_dir = Path(split_dir)
        sizes = {"fmri": self.voxel_dim * 4,
                 "rgbd": self.image_size * self.image_size * 4 * 4,
                 "embedding": self.embed_dim * 4}
        for it in self.items:
            for kind in ("fmri", "rgbd", "embedding"):
                rel = getattr(it, kind)
                if rel is None:
                    continue
                p = split_dir / rel
                require(p.exists(), f"missing {kind} file for {it.stimulus_id}: {p}")
                if rel.endswith(".f32"):  # raw arrays have a declared byte size; images do not
                    require(p.stat().st_size == sizes[kind],
                            f"{p}: size {p.stat().st_size} does not match declared shape "
                            f"({sizes[kind]} bytes expected)")


def validate_disjoint(train: DatasetManifest, test: DatasetManifest) -> None:
    overlap = sorted(train.stimulus_ids() & test.stimulus_ids())
    require(not overlap, f"train/test stimulus sets overlap: {', '.join(overlap[:10])}")


# ---------------------------------------------------------------------------
# split arrays on disk


@dataclass(frozen=True)
class SplitData:
    """In-memory arrays for one split, rows aligned with `ids`."""

    ids: tuple
    rgbd: np.ndarray                   # [M, H, W, 4] float32
    fmri: np.ndarray | None            # [M, N] float32
    embeddings: np.ndarray | None      # [M, D] float32
    class_ids: tuple | None = None

    def __post_init__(self):
        m = len(self.ids)
        require(self.rgbd.shape[0] == m, "rgbd row count does not match ids")
        require(self.fmri is None or self.fmri.shape[0] == m, "fmri row count does not match ids")
        require(self.embeddings is None or self.embeddings.shape[0] == m,
                "embedding row count does not match ids")


def save_dataset(root, split: str, data: SplitData, subject_id: str = "synthetic",
                 extra: dict | None = None) -> DatasetManifest:
    """Write one split under root/<split>/: manifest plus per-item f32 files."""
    split_dir = Path(root) / split
    h = data.rgbd.shape[1]
    items = []
    for kind, present in (("fmri", data.fmri is not None), ("rgbd", True),
                          ("emb", data.embeddings is not None)):
        if present:
            (split_dir / kind).mkdir(parents=True, exist_ok=True)
    for i, stim in enumerate(data.ids):
        paths = {"fmri": None, "rgbd": f"rgbd/{stim}.f32", "embedding": None}
        np.ascontiguousarray(data.rgbd[i], dtype="<f4").tofile(split_dir / paths["rgbd"])
        if data.fmri is not None:
            paths["fmri"] = f"fmri/{stim}.f32"
            np.ascontiguousarray(data.fmri[i], dtype="<f4").tofile(split_dir / paths["fmri"])
        if data.embeddings is not None:
            paths["embedding"] = f"emb/{stim}.f32"
            np.ascontiguousarray(data.embeddings[i], dtype="<f4").tofile(split_dir / paths["embedding"])
        items.append(ManifestItem(stimulus_id=stim, fmri=paths["fmri"], rgbd=paths["rgbd"],
                                  embedding=paths["embedding"],
                                  class_id=None if data.class_ids is None else int(data.class_ids[i])))
    manifest = DatasetManifest(
        split=split, subject_id=subject_id,
        voxel_dim=0 if data.fmri is None else int(data.fmri.shape[1]),
        image_size=int(h),
        embed_dim=0 if data.embeddings is None else int(data.embeddings.shape[1]),
        items=tuple(items), extra=extra or {})
    manifest.save(split_dir / "manifest.json")
    return manifest


def load_dataset(root, split: str) -> tuple[DatasetManifest, SplitData]:
    """Read a split back; file sizes are validated against the manifest."""
    split_dir = Path(root) / split
    manifest = DatasetManifest.load(split_dir / "manifest.json")
    manifest.validate_files(split_dir)
    s = manifest.image_size
    rgbd = np.empty((len(manifest.items), s, s, 4), dtype=np.float32)
    fmri = np.empty((len(manifest.items), manifest.voxel_dim), dtype=np.float32) if manifest.voxel_dim else None
    emb = np.empty((len(manifest.items), manifest.embed_dim), dtype=np.float32) if manifest.embed_dim else None
    ids, class_ids = [], []
    for i, it in enumerate(manifest.items):
        ids.append(it.stimulus_id)
        class_ids.append(it.class_id)
        rgbd[i] = np.fromfile(split_dir / it.rgbd, dtype="<f4").reshape(s, s, 4)
        if fmri is not None:
            require(it.fmri is not None, f"item {it.stimulus_id} lacks an fmri file")
            fmri[i] = np.fromfile(split_dir / it.fmri, dtype="<f4")
        if emb is not None:
            require(it.embedding is not None, f"item {it.stimulus_id} lacks an embedding file")
            emb[i] = np.fromfile(split_dir / it.embedding, dtype="<f4")
    data = SplitData(ids=tuple(ids), rgbd=rgbd, fmri=fmri, embeddings=emb,
                     class_ids=None if any(c is None for c in class_ids) else tuple(class_ids))
    return manifest, data


# ---------------------------------------------------------------------------
# synthetic world


@dataclass(frozen=True)
class SyntheticWorld:
    """Fixed generative state: linear readout, codebook, scene statistics."""

    seed: int
    image_size: int
    voxel_dim: int
    embed_dim: int
    tokens: int
    noise_sigma: float
    num_shapes: int
    num_colors: int
    w: np.ndarray          # [N, H*W*4], unit rows
    codebook: np.ndarray   # [K, D], orthonormal rows

    @classmethod
    def create(cls, config: RunConfig, seed: int) -> "SyntheticWorld":
        p = config.image_size * config.image_size * 4
        w = child_rng(seed, "world-readout").normal(size=(config.voxel_dim, p))
        w /= np.linalg.norm(w, axis=1, keepdims=True)
        k = config.num_shapes * config.num_colors
        raw = child_rng(seed, "world-codebook").normal(size=(config.embed_dim, config.embed_dim))
        q, r = np.linalg.qr(raw)
        q *= np.sign(np.diag(r))  # canonical orientation, deterministic
        return cls(seed=seed, image_size=config.image_size, voxel_dim=config.voxel_dim,
                   embed_dim=config.embed_dim, tokens=config.tokens,
                   noise_sigma=config.noise_sigma, num_shapes=config.num_shapes,
                   num_colors=config.num_colors, w=w, codebook=q.T[:k].copy())

    @property
    def num_classes(self) -> int:
        return self.num_shapes * self.num_colors

    def class_name(self, class_id: int) -> str:
        shape = _SHAPES[class_id // self.num_colors]
        return f"{shape}-c{class_id % self.num_colors}"

    def respond(self, rgbd: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
        """Linear readout of a scene plus optional measurement noise."""
        x = np.asarray(rgbd, dtype=np.float64).ravel()
        require(x.size == self.w.shape[1],
                f"scene has {x.size} values, readout expects {self.w.shape[1]}")
        r = self.w @ x
        if rng is not None and self.noise_sigma > 0.0:
            r = r + rng.normal(0.0, self.noise_sigma, size=r.shape)
        return r

    def semantic_tokens(self, class_id: int) -> np.ndarray:
        """[T, D] token grid: the class codeword repeated on every row."""
        require(0 <= class_id < self.num_classes, f"class_id {class_id} out of range")
        return np.tile(self.codebook[class_id], (self.tokens, 1))

    def semantic_embedding(self, class_id: int) -> SemanticEmbedding:
        return SemanticEmbedding(tokens=self.semantic_tokens(class_id))


def render_scene(world: SyntheticWorld, rng: np.random.Generator) -> tuple[np.ndarray, int]:
    """Draw one scene; returns ([H, W, 4] float64 rgbd, class_id).

    One shape per scene on a shaded background; depth is piecewise planar
    (a background plane and a tilted object plane), clipped to (0, 1].
    """
    s = world.image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    shape_id = int(rng.integers(world.num_shapes))
    color_id = int(rng.integers(world.num_colors))
    class_id = shape_id * world.num_colors + color_id

    base = rng.uniform(0.25, 0.45)
    bg_tilt = rng.uniform(-0.08, 0.08)
    bg = base + bg_tilt * (yy / s) + 0.05 * (xx / s)
    rgb = np.repeat(bg[:, :, None], 3, axis=2)

    # background depth plane, far and gently sloped
    d0 = rng.uniform(0.85, 0.95)
    depth = d0 - 0.15 * (yy / s) + rng.uniform(-0.05, 0.05) * (xx / s)

    # jitter bands keep class identity decodable through the linear readout:
    # wider bands push within-class variance past between-class separation
    cx = rng.uniform(0.35, 0.65) * s
    cy = rng.uniform(0.35, 0.65) * s
    r = rng.uniform(0.22, 0.30) * s
    if _SHAPES[shape_id] == "disk":
        mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= r ** 2
    elif _SHAPES[shape_id] == "square":
        mask = (np.abs(xx - cx) <= r) & (np.abs(yy - cy) <= r)
    else:  # triangle, apex up
        v0 = (cx, cy - r)
        v1 = (cx - 0.9 * r, cy + 0.7 * r)
        v2 = (cx + 0.9 * r, cy + 0.7 * r)

        def edge(p, q):
            return (q[0] - p[0]) * (yy - p[1]) - (q[1] - p[1]) * (xx - p[0])

        e0, e1, e2 = edge(v0, v1), edge(v1, v2), edge(v2, v0)
        # image coordinates run y-down, so this winding is clockwise
        mask = (e0 <= 0) & (e1 <= 0) & (e2 <= 0)

    rgb[mask] = _COLORS[color_id]
    # tilted object plane, strictly nearer than the background
    od = rng.uniform(0.30, 0.55)
    gx, gy = rng.uniform(-0.10, 0.10, size=2)
    obj_depth = od + gx * (xx - cx) / s + gy * (yy - cy) / s
    depth = np.where(mask, obj_depth, depth)
    depth = np.clip(depth, DEPTH_FLOOR, 1.0)
    rgb = np.clip(rgb, 0.0, 1.0)
    return np.concatenate([rgb, depth[:, :, None]], axis=2), class_id


def _build_split(world: SyntheticWorld, rng: np.random.Generator, prefix: str,
                 count: int, paired: bool) -> SplitData:
    s = world.image_size
    rgbd = np.empty((count, s, s, 4), dtype=np.float32)
    fmri = np.empty((count, world.voxel_dim), dtype=np.float32) if paired else None
    emb = np.empty((count, world.embed_dim), dtype=np.float32) if paired else None
    ids, classes = [], []
    for i in range(count):
        scene, class_id = render_scene(world, rng)
        rgbd[i] = scene.astype(np.float32)
        if paired:
            fmri[i] = world.respond(scene, rng).astype(np.float32)
            emb[i] = world.codebook[class_id].astype(np.float32)
        ids.append(f"{prefix}-{i:05d}")
        classes.append(class_id)
    return SplitData(ids=tuple(ids), rgbd=rgbd, fmri=fmri, embeddings=emb,
                     class_ids=tuple(classes))


def generate_synthetic(config: RunConfig, seed: int, root) -> dict:
    """Generate and write train/test/unpaired splits; returns the manifests.

    Scene content, noise, and file bytes are all functions of (config, seed):
    the same call twice produces byte-identical trees. Stimulus ids carry the
    split name, so train/test sets are disjoint by construction (validated
    anyway).
    """
    world = SyntheticWorld.create(config, seed)
    extra = {"generator": "synthetic-shapes", "seed": seed, "noise_sigma": config.noise_sigma,
             "num_classes": world.num_classes, "tokens": config.tokens}
    manifests = {}
    plan = [("train", config.train_items, True), ("test", config.test_items, True),
            ("unpaired", config.unpaired_items, False)]
    for split, count, paired in plan:
        rng = child_rng(seed, f"scenes-{split}")
        data = _build_split(world, rng, f"syn{seed}-{split}", count, paired)
        manifests[split] = save_dataset(root, split, data, extra=extra)
    validate_disjoint(manifests["train"], manifests["test"])
    return manifests


# ---------------------------------------------------------------------------
# recorded-data ingestion (NSD-format directory)


@dataclass(frozen=True)
class NsdIngest:
    """Result of ingesting one subject: split manifests + averaged samples."""

    train: DatasetManifest
    test: DatasetManifest
    samples: dict  # stimulus_id -> FmriSample (trial-averaged)
    voxel_dim: int


def ingest_nsd_format(root, subject_id: str) -> NsdIngest:
    """Load a recorded-data directory for one subject.

    Expects root/<subject>/trials.json (declared voxel width, per-trial
    stimulus ids, train/test split) and root/<subject>/voxels.f32 (raw
    little-endian float32, trials x width, row-major). Repeated trials of a
    stimulus are averaged. The declared width must match the subject table,
    the blob length must match the trial count, splits must be disjoint and
    cover every stimulus exactly once.
    """
    require(subject_id in NSD_VOXEL_WIDTHS,
            f"unknown subject {subject_id!r} (known: {', '.join(sorted(NSD_VOXEL_WIDTHS))})")
    expected = NSD_VOXEL_WIDTHS[subject_id]
    sdir = Path(root) / subject_id
    trials_path = sdir / "trials.json"
    voxels_path = sdir / "voxels.f32"
    require(trials_path.exists(), f"missing {trials_path}")
    require(voxels_path.exists(), f"missing {voxels_path}")
    with open(trials_path) as fh:
        meta = json.load(fh)
    require(meta.get("format_version") == MANIFEST_VERSION,
            f"{trials_path}: unsupported version {meta.get('format_version')!r}")
    declared = meta.get("voxel_dim")
    require(declared == expected,
            f"voxel width mismatch for {subject_id}: table says {expected}, "
            f"trials.json declares {declared}")
    stim_per_trial = list(meta["stimulus_ids"])
    require(len(stim_per_trial) >= 1, "no trials listed")
    blob = np.fromfile(voxels_path, dtype="<f4")
    require(blob.size == len(stim_per_trial) * expected,
            f"{voxels_path}: {blob.size} values do not match "
            f"{len(stim_per_trial)} trials x {expected} voxels")
    voxels = blob.reshape(len(stim_per_trial), expected)

    split_map = meta.get("split", {})
    train_ids = list(split_map.get("train", []))
    test_ids = list(split_map.get("test", []))
    all_stims = []
    seen = set()
    for stim in stim_per_trial:
        if stim not in seen:
            seen.add(stim)
            all_stims.append(stim)
    overlap = sorted(set(train_ids) & set(test_ids))
    require(not overlap, f"train/test splits overlap: {', '.join(overlap[:10])}")
    assigned = set(train_ids) | set(test_ids)
    unassigned = sorted(seen - assigned)
    require(not unassigned, f"stimuli missing from the split lists: {', '.join(unassigned[:10])}")
    unknown = sorted(assigned - seen)
    require(not unknown, f"split lists name unknown stimuli: {', '.join(unknown[:10])}")

    samples = {}
    counts = {}
    for stim in all_stims:
        rows = voxels[[i for i, s in enumerate(stim_per_trial) if s == stim]]
        counts[stim] = rows.shape[0]
        samples[stim] = FmriSample(subject_id=subject_id, stimulus_id=stim,
                                   voxels=rows.astype(np.float64).mean(axis=0),
                                   trial_count=rows.shape[0])

    def build_manifest(split: str, ids: list[str]) -> DatasetManifest:
        items = []
        for stim in ids:
            img = sdir / "images" / f"{stim}.png"
            emb = sdir / "embeddings" / f"{stim}.f32"
            items.append(ManifestItem(
                stimulus_id=stim, fmri=None,
                rgbd=f"images/{stim}.png" if img.exists() else None,
                embedding=f"embeddings/{stim}.f32" if emb.exists() else None,
                trial_count=counts[stim]))
        return DatasetManifest(split=split, subject_id=subject_id, voxel_dim=expected,
                               image_size=0, embed_dim=0, items=tuple(items),
                               extra={"source": "nsd-format"})

    train_m = build_manifest("train", train_ids)
    test_m = build_manifest("test", test_ids)
    validate_disjoint(train_m, test_m)
    return NsdIngest(train=train_m, test=test_m, samples=samples, voxel_dim=expected)
