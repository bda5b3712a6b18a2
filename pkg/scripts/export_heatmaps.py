"""Write heatmaps and mask overlays for a trained phase-2 checkpoint.

    python scripts/export_heatmaps.py runs/desk/phase2.ckpt --out runs/desk/heatmaps

Also prints how often the heatmap maximum lands inside the defect mask.
"""
from __future__ import annotations

import argparse

import numpy as np

from ltad import pipeline
from ltad.data import load_folder_dataset, load_mask


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("checkpoint")
    ap.add_argument("--out", required=True)
    ap.add_argument("--root", default=None, help="dataset root (default: the one stored in the checkpoint)")
    args = ap.parse_args(argv)

    p2 = pipeline.load_phase2(args.checkpoint)
    cfg = p2.models.cfg
    index = load_folder_dataset(args.root or cfg.data_root)
    written = pipeline.export_heatmaps(p2, index, args.out)
    print(f"wrote {len(written)} heatmaps to {args.out}")

    anomalous = [r for c in p2.manifest.classes for r in index.test_samples[c] if r.is_anomalous]
    scores = pipeline.compute_patch_scores(p2.models, anomalous)
    side = cfg.encoder.image_side
    maps = pipeline.anomaly_maps(scores, anomalous, cfg.lambda_fusion, side, cfg.smooth_sigma)
    hits = [bool(load_mask(r, side)[np.unravel_index(np.argmax(maps[r.id].pixel_map), (side, side))]) for r in anomalous]
    print(f"argmax inside mask: {np.mean(hits):.3f} over {len(hits)} anomalous images")


if __name__ == "__main__":
    main()
