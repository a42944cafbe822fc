"""Evaluation suite for reconstructed scenes.

Low-level image agreement (pixel correlation, SSIM), identification across a
test set (two-way trials over feature correlations), semantic feature
distance, monocular depth errors, and two color-fidelity scores computed on
palettes (histogram discrepancy and a scale-free residual stress).

Every metric is a pure function over arrays; `evaluate_set` pairs files in
two directories, aggregates per-item values, and writes a JSON report plus a
per-item CSV.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import DepthMap, RunConfig, SpatialPalette, ValidationError, child_rng, require
from . import nn, pngio
from .guidance import make_palette, resize_bicubic

EXTRACTOR_SEED = 5077  # reference extractors are frozen, independent of run seeds

_GRAY = np.array([0.2125, 0.7154, 0.0721])  # luminance weights
_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2


# ---------------------------------------------------------------------------
# pairwise image metrics


def _flat64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64).ravel()


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a, b = _flat64(a), _flat64(b)
    require(a.shape == b.shape, f"length mismatch: {a.shape} vs {b.shape}")
    require(a.size >= 2, "correlation needs at least 2 values")
    ac = a - a.mean()
    bc = b - b.mean()
    na, nb = np.linalg.norm(ac), np.linalg.norm(bc)
    require(na > 0.0 and nb > 0.0, "correlation is undefined for a constant input")
    return float(ac @ bc / (na * nb))


def pixcorr(gt: np.ndarray, rec: np.ndarray) -> float:
    """Pearson correlation of flattened pixels; rec is resized to gt first."""
    gt = np.asarray(gt, dtype=np.float64)
    rec = np.asarray(rec, dtype=np.float64)
    require(gt.ndim == 3 and gt.shape[2] == 3, f"gt must be [H, W, 3], got {gt.shape}")
    require(rec.ndim == 3 and rec.shape[2] == 3, f"rec must be [H, W, 3], got {rec.shape}")
    if rec.shape[:2] != gt.shape[:2]:
        rec = resize_bicubic(rec, gt.shape[0], gt.shape[1])
    return _pearson(gt, rec)


def _to_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        require(img.shape[2] == 3, f"expected [H, W, 3], got {img.shape}")
        return img @ _GRAY
    require(img.ndim == 2, f"expected [H, W] or [H, W, 3], got {img.shape}")
    return img


def _gauss_window(n: int, sigma: float) -> np.ndarray:
    x = np.arange(n) - (n - 1) / 2.0
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _sepconv_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    n = g.size
    x = np.lib.stride_tricks.sliding_window_view(x, n, axis=0) @ g
    x = np.lib.stride_tricks.sliding_window_view(x, n, axis=1) @ g
    return x


def ssim(gt: np.ndarray, rec: np.ndarray) -> float:
    """Mean structural similarity on grayscale, 11x11 Gaussian window (sigma 1.5).

    Gaussian-weighted local moments, valid-mode windows, standard stabilizers
    for unit data range.
    """
    x = _to_gray(gt)
    y = _to_gray(rec)
    require(x.shape == y.shape, f"shape mismatch: {x.shape} vs {y.shape}")
    h, w = x.shape
    require(h >= _SSIM_WINDOW and w >= _SSIM_WINDOW,
            f"images must be at least {_SSIM_WINDOW}x{_SSIM_WINDOW}, got {h}x{w}")
    g = _gauss_window(_SSIM_WINDOW, _SSIM_SIGMA)
    mx = _sepconv_valid(x, g)
    my = _sepconv_valid(y, g)
    vx = _sepconv_valid(x * x, g) - mx * mx
    vy = _sepconv_valid(y * y, g) - my * my
    cxy = _sepconv_valid(x * y, g) - mx * my
    num = (2.0 * mx * my + _SSIM_C1) * (2.0 * cxy + _SSIM_C2)
    den = (mx * mx + my * my + _SSIM_C1) * (vx + vy + _SSIM_C2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# identification and feature metrics


def _zscore_rows(feats: np.ndarray, name: str) -> np.ndarray:
    f = np.asarray(feats, dtype=np.float64)
    require(f.ndim == 2, f"{name} must be [m, F], got shape {f.shape}")
    require(f.shape[1] >= 2, f"{name} needs at least 2 feature dims")
    mu = f.mean(axis=1, keepdims=True)
    sd = f.std(axis=1, keepdims=True)
    require(bool((sd > 0.0).all()), f"{name} has a zero-variance row")
    return (f - mu) / sd


def two_way_identification(gt_feats: np.ndarray, rec_feats: np.ndarray) -> float:
    """Percentage of won two-way trials over all ordered distractor pairs.

    Trial (i, j): does rec_i correlate better with gt_i than with gt_j?
    Exhaustive over j != i; exact ties count as half a win, so degenerate
    all-identical features score 50.
    """
    gz = _zscore_rows(gt_feats, "gt features")
    rz = _zscore_rows(rec_feats, "rec features")
    require(gz.shape == rz.shape, f"shape mismatch: {gz.shape} vs {rz.shape}")
    m, f = gz.shape
    require(m >= 2, f"identification needs at least 2 items, got {m}")
    corr = rz @ gz.T / f
    own = np.diag(corr)[:, None]
    wins = (own > corr).sum() + 0.5 * (own == corr).sum()
    wins -= 0.5 * m  # drop the i == j self-comparisons (always ties)
    return float(100.0 * wins / (m * (m - 1)))


def feature_distance(gt_feats: np.ndarray, rec_feats: np.ndarray) -> float:
    """Mean over items of (1 - Pearson) between feature vectors."""
    g = np.asarray(gt_feats, dtype=np.float64)
    r = np.asarray(rec_feats, dtype=np.float64)
    require(g.shape == r.shape and g.ndim == 2, f"features must be matching [m, F], got {g.shape} vs {r.shape}")
    return float(np.mean([1.0 - _pearson(g[i], r[i]) for i in range(g.shape[0])]))


# ---------------------------------------------------------------------------
# depth metrics


@dataclass(frozen=True)
class DepthMetrics:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float

    def to_dict(self) -> dict:
        return {"abs_rel": self.abs_rel, "sq_rel": self.sq_rel,
                "rmse": self.rmse, "rmse_log": self.rmse_log}


def depth_metrics(gt, pred) -> DepthMetrics:
    """Standard monocular depth errors: AbsRel, SqRel, RMSE, RMSE(log)."""
    g = np.asarray(gt.values if isinstance(gt, DepthMap) else gt, dtype=np.float64)
    p = np.asarray(pred.values if isinstance(pred, DepthMap) else pred, dtype=np.float64)
    require(g.shape == p.shape, f"shape mismatch: {g.shape} vs {p.shape}")
    require(bool((g > 0.0).all() and (p > 0.0).all()), "depth values must be strictly positive")
    diff = g - p
    return DepthMetrics(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff ** 2 / g)),
        rmse=float(np.sqrt(np.mean(diff ** 2))),
        rmse_log=float(np.sqrt(np.mean((np.log(g) - np.log(p)) ** 2))),
    )


# ---------------------------------------------------------------------------
# color fidelity (computed on palettes)


def _hist_rgb(img: np.ndarray, bins: int) -> np.ndarray:
    """Per-channel normalized histograms of 8-bit-quantized values, [3, bins]."""
    u8 = np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.int64)
    out = np.empty((3, bins))
    n = u8.shape[0] * u8.shape[1]
    for c in range(3):
        codes = (u8[:, :, c].ravel() * bins) // 256
        out[c] = np.bincount(codes, minlength=bins) / n
    return out


def color_discrepancy(gt, rec, bins: int = 64) -> float:
    """Sum over channels of absolute differences of normalized histograms.

    Values are quantized to [0, 255] before binning; the histogram range is
    fixed to that interval.
    """
    require(isinstance(bins, (int, np.integer)) and 1 <= bins <= 256,
            f"bins must be in [1, 256], got {bins!r}")
    g = gt.image if isinstance(gt, SpatialPalette) else np.asarray(gt)
    r = rec.image if isinstance(rec, SpatialPalette) else np.asarray(rec)
    require(g.ndim == 3 and g.shape[2] == 3, f"gt must be [H, W, 3], got {g.shape}")
    require(r.ndim == 3 and r.shape[2] == 3, f"rec must be [H, W, 3], got {r.shape}")
    return float(np.abs(_hist_rgb(g, bins) - _hist_rgb(r, bins)).sum())


def stress(gt, rec) -> float:
    """Scale-free residual error between palette samples.

    With C the reference samples and C_hat the predicted ones, a single
    least-squares gain F = sum(C_hat * C) / sum(C_hat^2) aligns the scales;
    the score is 100 * sqrt(sum((F * C_hat - C)^2) / sum(C^2)). Zero iff the
    palettes agree up to a global positive scale.
    """
    c = _flat64(gt.image if isinstance(gt, SpatialPalette) else gt)
    ch = _flat64(rec.image if isinstance(rec, SpatialPalette) else rec)
    require(c.shape == ch.shape, f"sample counts differ: {c.shape} vs {ch.shape}")
    ssc = float(c @ c)
    ssch = float(ch @ ch)
    require(ssch > 0.0, "stress is undefined for an all-zero prediction")
    require(ssc > 0.0, "stress is undefined for an all-zero reference")
    f = float(ch @ c) / ssch
    return float(100.0 * np.sqrt(np.sum((f * ch - c) ** 2) / ssc))


# ---------------------------------------------------------------------------
# feature extractors


class FeatureExtractor:
    """Maps an RGB image to a fixed-length feature vector.

    `extract` receives the stimulus id as well so implementations may look
    features up instead of computing them (e.g. files produced off-line by a
    real network).
    """

    def __init__(self, extractor_id: str):
        require(isinstance(extractor_id, str) and extractor_id != "", "extractor id must be non-empty")
        self.id = extractor_id

    def extract(self, rgb: np.ndarray, stim_id: str | None = None) -> np.ndarray:
        raise NotImplementedError


class ReferenceExtractor(FeatureExtractor):
    """Frozen random conv stack with global mean/std pooling per channel."""

    _CHANNELS = (16, 32, 64, 64)

    def __init__(self, extractor_id: str, depth: int):
        super().__init__(extractor_id)
        require(1 <= depth <= len(self._CHANNELS), f"depth must be in [1, {len(self._CHANNELS)}], got {depth}")
        rng = child_rng(EXTRACTOR_SEED, extractor_id)
        layers: list[nn.Layer] = []
        cin = 3
        for cout in self._CHANNELS[:depth]:
            layers += [nn.Conv2d(cin, cout, rng, stride=2), nn.ReLU()]
            cin = cout
        self._net = nn.Sequential(layers)

    def extract(self, rgb: np.ndarray, stim_id: str | None = None) -> np.ndarray:
        x = np.asarray(rgb, dtype=np.float32)
        require(x.ndim == 3 and x.shape[2] == 3, f"expected [H, W, 3], got {x.shape}")
        require(bool(np.isfinite(x).all()), "image contains NaN or Inf")
        maps = self._net.forward(x[None])[0]
        return np.concatenate([maps.mean(axis=(0, 1)), maps.std(axis=(0, 1))]).astype(np.float64)


class FileFeatureExtractor(FeatureExtractor):
    """Reads per-stimulus feature vectors from <root>/<stim_id>.f32 files."""

    def __init__(self, extractor_id: str, root):
        super().__init__(extractor_id)
        self.root = Path(root)

    def extract(self, rgb: np.ndarray, stim_id: str | None = None) -> np.ndarray:
        require(stim_id is not None, "file-based extraction needs a stimulus id")
        path = self.root / f"{stim_id}.f32"
        require(path.exists(), f"no feature file for stimulus {stim_id!r} at {path}")
        return np.fromfile(path, dtype="<f4").astype(np.float64)


def default_extractors() -> list[FeatureExtractor]:
    """The two reference extractors: shallow (low-level) and deep (high-level)."""
    return [ReferenceExtractor("lowlevel", depth=2), ReferenceExtractor("highlevel", depth=4)]


# ---------------------------------------------------------------------------
# set evaluation


@dataclass(frozen=True)
class MetricsReport:
    """Aggregated metrics over an evaluation set."""

    item_count: int
    config_hash: str
    pixcorr: float
    ssim: float
    color_discrepancy: float
    stress: float
    two_way: dict
    feature_distance: dict
    depth: dict | None

    def __post_init__(self):
        require(self.item_count >= 1, "report needs at least one item")
        for v in (self.pixcorr, self.ssim, self.color_discrepancy, self.stress):
            require(bool(np.isfinite(v)), "report contains a non-finite metric")

    def to_dict(self) -> dict:
        return {"item_count": self.item_count, "config_hash": self.config_hash,
                "pixcorr": self.pixcorr, "ssim": self.ssim,
                "color_discrepancy": self.color_discrepancy, "stress": self.stress,
                "two_way": self.two_way, "feature_distance": self.feature_distance,
                "depth": self.depth}


def _stim_ids(directory: Path) -> set[str]:
    return {p.name[:-8] for p in directory.glob("*_rgb.png")}


def _pair_items(gt_dir: Path, rec_dir: Path, allow_partial: bool) -> list[str]:
    require(gt_dir.is_dir(), f"not a directory: {gt_dir}")
    require(rec_dir.is_dir(), f"not a directory: {rec_dir}")
    gt_ids, rec_ids = _stim_ids(gt_dir), _stim_ids(rec_dir)
    both = sorted(gt_ids & rec_ids)
    unmatched = sorted(gt_ids ^ rec_ids)
    if unmatched and not allow_partial:
        shown = ", ".join(unmatched[:20]) + (" ..." if len(unmatched) > 20 else "")
        raise ValidationError(f"{len(unmatched)} unpaired items between {gt_dir} and {rec_dir}: {shown}")
    require(len(both) >= 1, f"no paired *_rgb.png items between {gt_dir} and {rec_dir}")
    return both


def evaluate_set(gt_dir, rec_dir, extractors: list[FeatureExtractor] | None = None,
                 config: RunConfig | None = None, out_dir=None,
                 allow_partial: bool = False, jobs: int = 1) -> MetricsReport:
    """Pair `<stim>_rgb.png` (and optional `<stim>_depth.png`) files across
    two directories, compute all metrics, and optionally write
    report.json + per_item.csv into out_dir.

    Items are processed independently (optionally by a thread pool) and
    reduced in sorted-stimulus order, so results do not depend on jobs.
    """
    config = config or RunConfig()
    extractors = default_extractors() if extractors is None else extractors
    gt_dir, rec_dir = Path(gt_dir), Path(rec_dir)
    items = _pair_items(gt_dir, rec_dir, allow_partial)

    def one(stim: str) -> dict:
        gt_rgb = pngio.load_rgb(gt_dir / f"{stim}_rgb.png")
        rec_rgb = pngio.load_rgb(rec_dir / f"{stim}_rgb.png")
        row = {
            "stimulus_id": stim,
            "pixcorr": pixcorr(gt_rgb, rec_rgb),
            "ssim": ssim(gt_rgb, rec_rgb),
            "color_discrepancy": color_discrepancy(gt_rgb, rec_rgb, config.cd_bins),
            "stress": stress(make_palette(gt_rgb, config.palette_block),
                             make_palette(rec_rgb, config.palette_block)),
            "features": {ex.id: (ex.extract(gt_rgb, stim), ex.extract(rec_rgb, stim))
                         for ex in extractors},
            "depth": None,
        }
        gt_d, rec_d = gt_dir / f"{stim}_depth.png", rec_dir / f"{stim}_depth.png"
        if gt_d.exists() and rec_d.exists():
            row["depth"] = depth_metrics(pngio.load_depth16(gt_d), pngio.load_depth16(rec_d))
        return row

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(one, items))
    else:
        rows = [one(s) for s in items]

    two_way, feat_dist = {}, {}
    for ex in extractors:
        gt_f = np.stack([r["features"][ex.id][0] for r in rows])
        rec_f = np.stack([r["features"][ex.id][1] for r in rows])
        if len(rows) >= 2:
            two_way[ex.id] = two_way_identification(gt_f, rec_f)
        feat_dist[ex.id] = feature_distance(gt_f, rec_f)

    depth_rows = [r["depth"] for r in rows if r["depth"] is not None]
    depth_agg = None
    if depth_rows:
        depth_agg = {k: float(np.mean([d.to_dict()[k] for d in depth_rows]))
                     for k in ("abs_rel", "sq_rel", "rmse", "rmse_log")}

    report = MetricsReport(
        item_count=len(rows), config_hash=config.hash(),
        pixcorr=float(np.mean([r["pixcorr"] for r in rows])),
        ssim=float(np.mean([r["ssim"] for r in rows])),
        color_discrepancy=float(np.mean([r["color_discrepancy"] for r in rows])),
        stress=float(np.mean([r["stress"] for r in rows])),
        two_way=two_way, feature_distance=feat_dist, depth=depth_agg)

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "report.json", "w") as fh:
            json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        _write_per_item_csv(out_dir / "per_item.csv", rows, extractors)
    return report


def _write_per_item_csv(path, rows: list[dict], extractors: list[FeatureExtractor]) -> None:
    cols = ["stimulus_id", "pixcorr", "ssim", "color_discrepancy", "stress",
            "abs_rel", "sq_rel", "rmse", "rmse_log"]
    cols += [f"feat_corr_{ex.id}" for ex in extractors]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for r in rows:
            base = [r["stimulus_id"], r["pixcorr"], r["ssim"], r["color_discrepancy"], r["stress"]]
            if r["depth"] is not None:
                d = r["depth"].to_dict()
                base += [d["abs_rel"], d["sq_rel"], d["rmse"], d["rmse_log"]]
            else:
                base += ["", "", "", ""]
            for ex in extractors:
                g, rc = r["features"][ex.id]
                base.append(1.0 - feature_distance(g[None], rc[None]))
            writer.writerow(base)
