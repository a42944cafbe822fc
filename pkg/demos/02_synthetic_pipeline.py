#!/usr/bin/env python3
"""End-to-end run at reduced scale, through the library API.

Generates a synthetic world, trains the semantic encoder on the full train
split, then treats scene-voxel pairs as scarce for the depth pathway: two
paired stages on a 350-pair budget, followed by refinement on the unpaired
scenes (the regime that stage is for). Prints held-out numbers against the
trivial baselines. About a minute on a laptop CPU; the operator CLI drives
the same calls at full scale, where every margin widens.
"""

import tempfile
import time
from pathlib import Path

import numpy as np

from dream import data, rpkm, rvac
from dream.core import RunConfig
from dream.metrics import depth_metrics

CONFIG = RunConfig().replace(train_items=1200, test_items=50, unpaired_items=1000, seed=42)
PAIR_BUDGET = 350


def main():
    t0 = time.monotonic()

    # --- 1. synthetic dataset: paired train/test plus unpaired scenes
    root = Path(tempfile.mkdtemp(prefix="dream-demo-"))
    info = data.generate_synthetic(CONFIG, CONFIG.seed, root)
    counts = {split: len(m.items) for split, m in info.items()}
    print(f"dataset at {root}: {counts}")
    _, train = data.load_dataset(root, "train")
    _, test = data.load_dataset(root, "test")
    _, unpaired = data.load_dataset(root, "unpaired")

    # --- 2. semantic encoder: contrastive training with fmri mixing
    triplets = rvac.TripletBatch(fmri=train.fmri,
                                 text=train.embeddings.astype(np.float64),
                                 image=train.embeddings.astype(np.float64))
    encoder, history = rvac.train_rvac(triplets, CONFIG)
    held_out = rvac.TripletBatch(fmri=test.fmri,
                                 text=test.embeddings.astype(np.float64),
                                 image=test.embeddings.astype(np.float64))
    acc = rvac.retrieval_accuracy(encoder, held_out, batch_size=16)
    print(f"semantic encoder: loss {history[0]['loss']:.3f} -> {history[-1]['loss']:.3f}, "
          f"held-out top-1 retrieval @16 {acc:.1%}")

    # --- 3. depth pathway on scarce pairs: align voxels, train the decoder
    pairs = rpkm.PairedData(rgbd=train.rgbd[:PAIR_BUDGET], fmri=train.fmri[:PAIR_BUDGET])
    scene_enc, _ = rpkm.train_stage1(pairs, CONFIG)
    decoder, _ = rpkm.train_stage2(pairs, scene_enc, CONFIG)

    def held_out_errors(dec):
        decoded = rpkm.decode_batch(dec, test.fmri)
        l1 = float(np.abs(test.rgbd - decoded).mean())
        absrel = float(np.mean([depth_metrics(test.rgbd[i, :, :, 3],
                                              decoded[i, :, :, 3]).abs_rel
                                for i in range(len(test.ids))]))
        return l1, absrel

    l1_paired, absrel_paired = held_out_errors(decoder)

    # --- 4. unpaired refinement: freeze the voxel head, cycle through scenes
    scene_enc.freeze()
    decoder, _ = rpkm.train_stage3(unpaired.rgbd, scene_enc, decoder, CONFIG)
    l1_final, absrel_final = held_out_errors(decoder)
    print(f"decoder on {PAIR_BUDGET} pairs: held-out L1 {l1_paired:.4f}, "
          f"after refinement on {len(unpaired.ids)} unpaired scenes {l1_final:.4f} "
          f"({(l1_paired - l1_final) / l1_paired:+.1%})")

    # --- 5. against the trivial baselines (predict the mean training scene)
    mean_scene = train.rgbd.mean(axis=0)
    l1_mean = float(np.abs(test.rgbd - mean_scene).mean())
    absrel_mean = float(np.mean([depth_metrics(test.rgbd[i, :, :, 3],
                                               mean_scene[:, :, 3]).abs_rel
                                 for i in range(len(test.ids))]))
    print(f"baselines: L1 {l1_final:.4f} vs mean-scene {l1_mean:.4f}; "
          f"depth AbsRel {absrel_paired:.4f} -> {absrel_final:.4f} vs mean-depth "
          f"{absrel_mean:.4f}")

    print(f"total {time.monotonic() - t0:.0f}s")


if __name__ == "__main__":
    main()
