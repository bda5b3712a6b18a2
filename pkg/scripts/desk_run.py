"""Reference desk run: synthetic corpus, toy encoder, both phases, report.

    python scripts/desk_run.py --out runs/desk --seed 0

Writes the corpus (unless it already exists), the phase checkpoints and
loss curves, ``report.json`` and a small ``summary.json`` with timings.
"""
from __future__ import annotations

import argparse
import json
import logging
import time
from pathlib import Path

from ltad import pipeline
from ltad.config import toy_config
from ltad.data import CorpusSpec, generate_synthetic_corpus, load_folder_dataset

DESK_CORPUS = CorpusSpec(num_classes=5, per_class_train=40, per_class_test=20, image_size=224, seed=0)


def desk_index(root):
    root = Path(root)
    if root.is_dir() and any(root.glob("*/train")):
        return load_folder_dataset(root)
    return generate_synthetic_corpus(root, DESK_CORPUS)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--corpus", default=None, help="corpus directory (default: <out>/corpus)")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    out = Path(args.out)
    index = desk_index(args.corpus or out / "corpus")
    cfg = toy_config(seed=args.seed, data_root=str(index.root))
    timings = {}
    t = time.perf_counter()
    p1 = pipeline.run_phase1(cfg, out, index=index)
    timings["phase1_s"] = time.perf_counter() - t
    t = time.perf_counter()
    p2 = pipeline.run_phase2(cfg, p1, out, index=index)
    timings["phase2_s"] = time.perf_counter() - t
    t = time.perf_counter()
    report = pipeline.evaluate(p2, index=index, out_path=out / "report.json")
    timings["eval_s"] = time.perf_counter() - t
    summary = {"seed": args.seed, "detection": report.det_summary, "segmentation": report.seg_summary,
               "kept_counts": p2.manifest.kept_counts(), "timings": timings}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    print(json.dumps(summary, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
