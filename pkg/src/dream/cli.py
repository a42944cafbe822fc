"""Operator command line for the decoding pipeline.

Subcommands cover the whole lifecycle: synthesize a dataset, train the two
models, decode held-out responses into cue files and reconstructions,
evaluate against ground truth, and render a qualitative report.

Every command resolves one flat configuration (defaults, then --config JSON,
then --set key=value overrides), writes the resolved snapshot next to its
outputs, and exits 0 on success, 2 on validation problems, 3 when a remote
backend is unreachable, 4 on internal failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import guidance, metrics, pngio, rpkm, rvac
from .core import (BackendUnavailableError, DepthMap, ProtocolError, RunConfig,
                   SemanticEmbedding, ValidationError, child_rng, require)

log = logging.getLogger("dream")


# ---------------------------------------------------------------------------
# config plumbing


def _parse_override(text: str) -> tuple[str, object]:
    require("=" in text, f"--set expects key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw  # bare strings are fine unquoted
    return key.strip(), value


def resolve_config(args) -> RunConfig:
    payload = RunConfig().to_dict()
    if getattr(args, "config", None):
        path = Path(args.config)
        require(path.exists(), f"config file not found: {path}")
        with open(path) as fh:
            loaded = json.load(fh)
        require(isinstance(loaded, dict), f"{path}: config must be a flat JSON object")
        unknown = sorted(set(loaded) - set(payload))
        require(not unknown, f"unknown config keys: {', '.join(unknown)}")
        payload.update(loaded)
    for item in getattr(args, "set", None) or []:
        key, value = _parse_override(item)
        require(key in payload, f"unknown config key: {key}")
        payload[key] = value
    return RunConfig.from_dict(payload)


def write_snapshot(out_dir, config: RunConfig) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    snapshot = dict(config.to_dict(), config_hash=config.hash())
    with open(out_dir / "config.resolved.json", "w") as fh:
        json.dump(snapshot, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _data_root(args) -> Path:
    root = getattr(args, "data", None) or os.environ.get("DREAM_DATA_ROOT")
    require(bool(root), "no dataset root: pass --data or set DREAM_DATA_ROOT")
    return Path(root)


def _append_training_log(out_dir: Path, entry: dict) -> None:
    path = out_dir / "training_log.json"
    entries = []
    if path.exists():
        with open(path) as fh:
            entries = json.load(fh)
    entries.append(entry)
    with open(path, "w") as fh:
        json.dump(entries, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    config = resolve_config(args)
    out = args.out or os.environ.get("DREAM_DATA_ROOT")
    require(bool(out), "no output root: pass --out or set DREAM_DATA_ROOT")
    root = Path(out)
    manifests = data_mod.generate_synthetic(config, config.seed, root)
    write_snapshot(root, config)
    for split, m in manifests.items():
        print(f"wrote {split}: {len(m.items)} items under {root / split}")
    return 0


def _load_triplets(root: Path, split: str) -> rvac.TripletBatch:
    _, sd = data_mod.load_dataset(root, split)
    require(sd.fmri is not None, f"{split} split has no fmri arrays")
    require(sd.embeddings is not None, f"{split} split has no embedding arrays")
    emb = sd.embeddings.astype(np.float64)
    # the synthetic world has one semantic code per class; it serves as both
    # the text-side and image-side target
    return rvac.TripletBatch(fmri=sd.fmri, text=emb, image=emb)


def cmd_train_rvac(args) -> int:
    config = resolve_config(args)
    root = _data_root(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    triplets = _load_triplets(root, "train")
    encoder, history = rvac.train_rvac(triplets, config)
    encoder.save(out / "rvac.ckpt", config.hash(), history)
    with open(out / "rvac_history.json", "w") as fh:
        json.dump(history, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_snapshot(out, config)
    print(f"rvac: loss {history[0]['loss']:.4f} -> {history[-1]['loss']:.4f} "
          f"over {len(history)} epochs; checkpoint at {out / 'rvac.ckpt'}")
    return 0


def cmd_train_rpkm(args) -> int:
    config = resolve_config(args)
    root = _data_root(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stage = args.stage
    if stage == 1:
        _, sd = data_mod.load_dataset(root, "train")
        require(sd.fmri is not None, "train split has no fmri arrays")
        enc, report = rpkm.train_stage1(rpkm.PairedData(rgbd=sd.rgbd, fmri=sd.fmri), config)
        enc.save(out / "rpkm_encoder.ckpt", config.hash(), list(report.loss_history))
    elif stage == 2:
        _, sd = data_mod.load_dataset(root, "train")
        require(sd.fmri is not None, "train split has no fmri arrays")
        enc_path = args.encoder or out / "rpkm_encoder.ckpt"
        encoder, _ = rpkm.RgbdEncoder.load(enc_path)
        dec, report = rpkm.train_stage2(rpkm.PairedData(rgbd=sd.rgbd, fmri=sd.fmri), encoder, config)
        dec.save(out / "rpkm_decoder_s2.ckpt", config.hash(), list(report.loss_history))
    else:
        enc_path = args.encoder or out / "rpkm_encoder.ckpt"
        dec_path = args.decoder or out / "rpkm_decoder_s2.ckpt"
        encoder, _ = rpkm.RgbdEncoder.load(enc_path)
        decoder, _ = rpkm.RgbdDecoder.load(dec_path)
        _, sd = data_mod.load_dataset(root, "unpaired")
        encoder.freeze()
        decoder, report = rpkm.train_stage3(sd.rgbd, encoder, decoder, config)
        decoder.save(out / "rpkm_decoder.ckpt", config.hash(), list(report.loss_history))
        encoder.save(out / "rpkm_encoder.ckpt", config.hash(), [])  # frozen flag persisted
    _append_training_log(out, report.to_dict())
    write_snapshot(out, config)
    print(f"rpkm stage {stage}: loss {report.initial_loss:.4f} -> {report.final_loss:.4f}")
    return 0


def cmd_decode(args) -> int:
    config = resolve_config(args)
    if args.omega_c is not None:
        config = config.replace(omega_c=args.omega_c)
    if args.omega_d is not None:
        config = config.replace(omega_d=args.omega_d)
    root = _data_root(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    encoder, _ = rvac.FmriEncoder.load(args.rvac)
    decoder, _ = rpkm.RgbdDecoder.load(args.decoder)
    backend_kwargs = {}
    if args.backend == "remote" and args.backend_url:
        backend_kwargs["url"] = args.backend_url
    backend = guidance.get_backend(args.backend, **backend_kwargs)
    _, sd = data_mod.load_dataset(root, "test")
    require(sd.fmri is not None, "test split has no fmri arrays")
    count = len(sd.ids) if args.items is None else min(args.items, len(sd.ids))
    gt_out = Path(args.gt_out) if args.gt_out else None
    if gt_out:
        gt_out.mkdir(parents=True, exist_ok=True)

    for lo in range(0, count, 32):
        hi = min(lo + 32, count)
        rgbd_hat = rpkm.decode_batch(decoder, sd.fmri[lo:hi])
        tokens = encoder.encode(sd.fmri[lo:hi].astype(np.float32))
        for i in range(hi - lo):
            stim = sd.ids[lo + i]
            sem = SemanticEmbedding(tokens=tokens[i].astype(np.float64))
            scene = rgbd_hat[i].astype(np.float64)
            palette = guidance.make_palette(scene[:, :, :3], config.palette_block)
            depth = np.clip(scene[:, :, 3], data_mod.DEPTH_FLOOR, 1.0)
            bundle = guidance.GuidanceBundle(
                semantics=sem, palette=palette, depth=DepthMap(values=depth),
                omega_c=config.omega_c, omega_d=config.omega_d)
            z = child_rng(config.seed, f"z-{stim}").standard_normal(16)
            recon = guidance.reconstruct(bundle, backend, z)
            pngio.save_rgb(out / f"{stim}_rgb.png", recon)
            pngio.save_depth16(out / f"{stim}_depth.png", depth)
            pngio.save_rgb(out / f"{stim}_palette.png", palette.image)
            np.ascontiguousarray(sem.tokens, dtype="<f4").tofile(out / f"{stim}_sem.f32")
            if gt_out:
                gt = sd.rgbd[lo + i].astype(np.float64)
                pngio.save_rgb(gt_out / f"{stim}_rgb.png", gt[:, :, :3])
                pngio.save_depth16(gt_out / f"{stim}_depth.png", gt[:, :, 3])
        log.info("decoded %d/%d", hi, count)
    write_snapshot(out, config)
    print(f"decoded {count} items with backend {args.backend} "
          f"(omega_c={config.omega_c}, omega_d={config.omega_d}) into {out}")
    return 0


def cmd_evaluate(args) -> int:
    config = resolve_config(args)
    out = Path(args.out)
    report = metrics.evaluate_set(args.gt, args.rec, extractors=None, config=config,
                                  out_dir=out, allow_partial=args.allow_partial, jobs=args.jobs)
    write_snapshot(out, config)
    d = report.to_dict()
    print(f"items: {d['item_count']}")
    for key in ("pixcorr", "ssim", "color_discrepancy", "stress"):
        print(f"{key}: {d[key]:.4f}")
    for ex, val in sorted(d["two_way"].items()):
        print(f"two_way[{ex}]: {val:.2f}")
    for ex, val in sorted(d["feature_distance"].items()):
        print(f"feature_distance[{ex}]: {val:.4f}")
    if d["depth"]:
        for k, v in sorted(d["depth"].items()):
            print(f"depth.{k}: {v:.4f}")
    return 0


def _depth_to_rgb(depth: np.ndarray) -> np.ndarray:
    return np.repeat(depth[:, :, None], 3, axis=2)


def cmd_report(args) -> int:
    config = resolve_config(args)
    gt_dir, rec_dir, out = Path(args.gt), Path(args.rec), Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stims = sorted({p.name[:-8] for p in gt_dir.glob("*_rgb.png")} &
                   {p.name[:-8] for p in rec_dir.glob("*_rgb.png")})
    require(len(stims) >= 1, f"no paired items between {gt_dir} and {rec_dir}")
    stims = stims[:args.items]

    rows = []
    row_labels = ["ground truth", "reconstruction", "palette cue", "decoded depth", "true depth"]
    grid_rows: list[list[np.ndarray]] = [[] for _ in row_labels]
    for stim in stims:
        gt_rgb = pngio.load_rgb(gt_dir / f"{stim}_rgb.png")
        rec_rgb = pngio.load_rgb(rec_dir / f"{stim}_rgb.png")
        grid_rows[0].append(gt_rgb)
        grid_rows[1].append(rec_rgb)
        pal = rec_dir / f"{stim}_palette.png"
        grid_rows[2].append(pngio.load_rgb(pal) if pal.exists() else np.ones_like(gt_rgb))
        dd = rec_dir / f"{stim}_depth.png"
        grid_rows[3].append(_depth_to_rgb(pngio.load_depth16(dd)) if dd.exists() else np.ones_like(gt_rgb))
        gd = gt_dir / f"{stim}_depth.png"
        grid_rows[4].append(_depth_to_rgb(pngio.load_depth16(gd)) if gd.exists() else np.ones_like(gt_rgb))

    pad = 2
    h, w = grid_rows[0][0].shape[:2]
    ncol = len(stims)
    canvas = np.ones((len(grid_rows) * (h + pad) - pad, ncol * (w + pad) - pad, 3))
    for r, tiles in enumerate(grid_rows):
        for c, tile in enumerate(tiles):
            canvas[r * (h + pad):r * (h + pad) + h, c * (w + pad):c * (w + pad) + w] = tile
    pngio.save_rgb(out / "grid.png", canvas)

    lines = ["# Reconstruction report", "",
             f"Columns: {', '.join(stims)}", "",
             f"Grid rows: {', '.join(row_labels)} (see grid.png)", ""]
    if args.metrics:
        mpath = Path(args.metrics)
        require(mpath.exists(), f"metrics report not found: {mpath}")
        with open(mpath) as fh:
            rep = json.load(fh)
        lines += ["| metric | value |", "| --- | --- |"]
        for key in ("pixcorr", "ssim", "color_discrepancy", "stress"):
            lines.append(f"| {key} | {rep[key]:.4f} |")
        for ex, val in sorted(rep.get("two_way", {}).items()):
            lines.append(f"| two_way[{ex}] | {val:.2f} |")
        for ex, val in sorted(rep.get("feature_distance", {}).items()):
            lines.append(f"| feature_distance[{ex}] | {val:.4f} |")
        for k, v in sorted((rep.get("depth") or {}).items()):
            lines.append(f"| depth.{k} | {v:.4f} |")
        lines.append(f"| items | {rep['item_count']} |")
    else:
        lines.append("No metrics report supplied (pass --metrics report.json).")
    (out / "summary.md").write_text("\n".join(lines) + "\n")
    write_snapshot(out, config)
    print(f"report written to {out} ({len(stims)} columns)")
    return 0


# ---------------------------------------------------------------------------
# parser and entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dream", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON file with config overrides")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key (repeatable)")

    p = sub.add_parser("gen-data", help="synthesize train/test/unpaired splits")
    common(p)
    p.add_argument("--out", help="dataset root (default: DREAM_DATA_ROOT)")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train-rvac", help="train the fMRI-to-semantics encoder")
    common(p)
    p.add_argument("--data", help="dataset root (default: DREAM_DATA_ROOT)")
    p.add_argument("--out", required=True, help="output directory for checkpoints")
    p.set_defaults(fn=cmd_train_rvac)

    p = sub.add_parser("train-rpkm", help="train one RGBD stage (1, 2, or 3)")
    common(p)
    p.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    p.add_argument("--data", help="dataset root (default: DREAM_DATA_ROOT)")
    p.add_argument("--out", required=True, help="output directory for checkpoints")
    p.add_argument("--encoder", help="stages 2-3: encoder checkpoint (default: <out>/rpkm_encoder.ckpt)")
    p.add_argument("--decoder", help="stage 3: decoder checkpoint (default: <out>/rpkm_decoder_s2.ckpt)")
    p.set_defaults(fn=cmd_train_rpkm)

    p = sub.add_parser("decode", help="decode the test split into cues and reconstructions")
    common(p)
    p.add_argument("--data", help="dataset root (default: DREAM_DATA_ROOT)")
    p.add_argument("--rvac", required=True, help="rvac encoder checkpoint")
    p.add_argument("--decoder", required=True, help="rpkm decoder checkpoint")
    p.add_argument("--out", required=True, help="output directory for reconstructions and cues")
    p.add_argument("--gt-out", help="also write ground-truth rgb/depth PNGs here")
    p.add_argument("--backend", choices=("toy", "remote"), default="toy")
    p.add_argument("--backend-url", help="remote backend URL (default: DREAM_BACKEND_URL)")
    p.add_argument("--omega-c", type=float, default=None, help="override color guidance weight")
    p.add_argument("--omega-d", type=float, default=None, help="override depth guidance weight")
    p.add_argument("--items", type=int, default=None, help="decode only the first N items")
    p.set_defaults(fn=cmd_decode)

    p = sub.add_parser("evaluate", help="compute metrics between two image directories")
    common(p)
    p.add_argument("--gt", required=True, help="ground-truth directory")
    p.add_argument("--rec", required=True, help="reconstruction directory")
    p.add_argument("--out", required=True, help="where report.json and per_item.csv go")
    p.add_argument("--allow-partial", action="store_true",
                   help="evaluate the intersection instead of failing on unpaired items")
    p.add_argument("--jobs", type=int, default=1, help="parallel workers (results are order-stable)")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("report", help="render a qualitative grid and summary table")
    common(p)
    p.add_argument("--gt", required=True)
    p.add_argument("--rec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics", help="report.json from evaluate")
    p.add_argument("--items", type=int, default=8, help="columns in the grid")
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:  # argparse handles --help and bad flags
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.fn(args)
    except ValidationError as e:
        print(f"error: validation: {e}", file=sys.stderr)
        return 2
    except BackendUnavailableError as e:
        print(f"error: backend-unavailable: {e}", file=sys.stderr)
        return 3
    except ProtocolError as e:
        print(f"error: protocol: {e}", file=sys.stderr)
        return 4
    except Exception as e:  # noqa: BLE001 - the CLI boundary reports, not raises
        print(f"error: internal: {type(e).__name__}: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
