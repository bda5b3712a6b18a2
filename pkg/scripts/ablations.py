"""Ablation sweep on the desk corpus.

    python scripts/ablations.py --out runs/ablations --seeds 1 2 3

For every seed this trains the full toy model once and reports All/High/Low
detection and segmentation AUROC for

* ``full``            the trained model at the configured lambda
* ``no_sad``          reconstruction score only (lambda = 0; identical to a
                      ``disable_sad`` model, see tests/test_pipeline.py)
* ``shuffled``        pseudo class names cyclically permuted at evaluation
* ``sad_only``        semantic score only (``disable_rm``-style scoring)

and, with ``--variants``, retrains phase 2 under extra settings:
``learned_free`` (classifier vectors learned without text), ``das``
(data-adaptive real/synthetic mixing) and ``real_only`` (no synthesis).
Results go to ``<out>/ablations.json`` and are printed as a table.
"""
from __future__ import annotations

import argparse
import json
import logging
import statistics
from pathlib import Path

from ltad import pipeline
from ltad.config import toy_config
from ltad.text import cyclic_derangement

from desk_run import desk_index

VARIANTS = {
    "learned_free": {"sad.classifier_source": "learned_free"},
    "das": {"synthesis.das_enabled": True},
    "real_only": {"synthesis.p_real": 1.0, "synthesis.das_enabled": False},
}


def _summary(report):
    return {"det": report.det_summary, "seg": report.seg_summary}


def run_seed(index, seed, variants, out):
    cfg = toy_config(seed=seed, data_root=str(index.root))
    p1 = pipeline.run_phase1(cfg, out / f"seed{seed}", index=index)
    p2 = pipeline.run_phase2(cfg, p1, out / f"seed{seed}", index=index)
    records = [r for c in p2.manifest.classes for r in index.test_samples[c]]
    scores = pipeline.compute_patch_scores(p2.models, records)
    shuffled = pipeline.compute_patch_scores(p2.models, records, cyclic_derangement(len(p2.models.classes)))
    res = {
        "full": _summary(pipeline.evaluate(p2, index=index, scores=scores)),
        "no_sad": _summary(pipeline.evaluate(p2, index=index, scores=scores, lam=0.0)),
        "shuffled": _summary(pipeline.evaluate(p2, index=index, scores=shuffled)),
        "sad_only": _summary(pipeline.evaluate(p2, index=index, scores=scores, lam=1e9)),
    }
    for name in variants:
        vcfg = cfg.with_overrides(VARIANTS[name])
        phase1 = pipeline.load_phase1(p1.checkpoint_path, vcfg)
        vp2 = pipeline.run_phase2(vcfg, phase1, index=index)
        res[name] = _summary(pipeline.evaluate(vp2, index=index))
    return res


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/ablations")
    ap.add_argument("--corpus", default=None)
    ap.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    ap.add_argument("--variants", nargs="*", default=[], choices=sorted(VARIANTS))
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING)

    out = Path(args.out)
    index = desk_index(args.corpus or out / "corpus")
    results = {seed: run_seed(index, seed, args.variants, out) for seed in args.seeds}
    (out / "ablations.json").write_text(json.dumps(results, indent=2, sort_keys=True))

    rows = sorted({k for r in results.values() for k in r})
    print(f"{'setting':<14}{'All det':>9}{'Low det':>9}{'All seg':>9}   (median over seeds {args.seeds})")
    for name in rows:
        med = lambda f: statistics.median(f(results[s][name]) for s in args.seeds)  # noqa: E731
        print(f"{name:<14}{med(lambda r: r['det']['all']):>9.4f}{med(lambda r: r['det']['low']):>9.4f}{med(lambda r: r['seg']['all']):>9.4f}")


if __name__ == "__main__":
    main()
