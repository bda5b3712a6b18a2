"""Command-line entry point: ``ltad <verb> [options]``.

Every verb accepts ``--config`` (a JSON file as written by
``ExperimentConfig.save``; defaults to the toy desk config), ``--seed``,
``--out`` and repeatable ``--set key=value`` overrides with dotted keys
(``--set optim.lr=0.001``). Values are parsed as JSON when possible.
Failures exit with status 1 and a one-line JSON error on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .config import ExperimentConfig, toy_config


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def parse_overrides(items: Sequence[str]) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        out[key.strip()] = _parse_value(raw)
    return out


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else toy_config()
    overrides = parse_overrides(args.set)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "root", None):
        overrides["data_root"] = args.root
    if getattr(args, "manifest", None):
        overrides["manifest_path"] = args.manifest
    return cfg.with_overrides(overrides) if overrides else cfg


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--seed", type=int, help="experiment seed override")
    p.add_argument("--out", help="output file or directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted config override")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ltad", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("split", help="draw a long-tailed manifest from a folder dataset")
    _common(p)
    p.add_argument("--root", required=True)
    p.add_argument("--type", choices=["exp", "exponential", "step"], default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--reverse", action="store_true", help="least popular class first")

    p = sub.add_parser("synth-data", help="write the procedural defect corpus")
    _common(p)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--train", type=int, default=40)
    p.add_argument("--test", type=int, default=20)
    p.add_argument("--defect-rate", type=float, default=0.5)
    p.add_argument("--size", type=int, default=224)

    p = sub.add_parser("train-phase1", help="train synthesis decoder and pseudo class names")
    _common(p)
    p.add_argument("--root")
    p.add_argument("--manifest")

    p = sub.add_parser("train-phase2", help="train reconstruction and semantic heads")
    _common(p)
    p.add_argument("--root")
    p.add_argument("--phase1", help="phase-1 checkpoint (omit only with synthesis off)")

    p = sub.add_parser("eval", help="score the test split and write a JSON report")
    _common(p)
    p.add_argument("--root")
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("export-heatmaps", help="write per-image heatmaps and overlays")
    _common(p)
    p.add_argument("--root")
    p.add_argument("--checkpoint", required=True)
    return parser


def _emit(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


def run(args) -> dict:
    from . import pipeline

    if args.verb == "synth-data":
        from .data import CorpusSpec, generate_synthetic_corpus

        if not args.out:
            raise ValueError("synth-data needs --out")
        spec = CorpusSpec(args.classes, args.train, args.test, args.size, args.defect_rate, args.seed or 0)
        index = generate_synthetic_corpus(args.out, spec)
        return {"root": str(args.out), "classes": index.classes, "digest": index.digest()}

    if args.verb == "split":
        from .data import load_folder_dataset
        from .splits import SplitSpec, sample_split

        cfg = load_config(args)
        spec = cfg.split.to_dict()
        if args.type:
            spec["imbalance_type"] = args.type
        if args.beta is not None:
            spec["beta"] = args.beta
        if args.reverse:
            spec["class_order"] = "reversed"
        if args.seed is not None:
            spec["seed"] = args.seed
        manifest = sample_split(load_folder_dataset(args.root), SplitSpec.from_dict(spec), cfg.nominal_counts)
        out = Path(args.out or "manifest.json")
        out.parent.mkdir(parents=True, exist_ok=True)
        manifest.save(out)
        return {"manifest": str(out), "kept": manifest.kept_counts(), "digest": manifest.digest()}

    cfg = load_config(args)
    out = Path(args.out or "runs")
    if args.verb == "train-phase1":
        res = pipeline.run_phase1(cfg, out)
        return {"checkpoint": str(res.checkpoint_path), "sha256": res.checkpoint_digest, "final_loss": res.losses[-1] if res.losses else None}
    if args.verb == "train-phase2":
        res = pipeline.run_phase2(cfg, args.phase1, out)
        return {"checkpoint": str(res.checkpoint_path), "sha256": res.checkpoint_digest, "final_loss": res.losses[-1] if res.losses else None}
    if args.verb == "eval":
        # stored config, with any explicit overrides layered on top
        stored = pipeline.load_phase2(args.checkpoint)
        base = stored.models.cfg
        overrides = parse_overrides(args.set)
        if args.root:
            overrides["data_root"] = args.root
        cfg = base.with_overrides(overrides) if overrides else base
        target = out if out.suffix == ".json" else out / "report.json"
        report = pipeline.evaluate(stored, cfg=cfg, out_path=target)
        return {"report": str(target), "detection": report.det_summary, "segmentation": report.seg_summary}
    if args.verb == "export-heatmaps":
        stored = pipeline.load_phase2(args.checkpoint)
        cfg = stored.models.cfg
        if args.root:
            cfg = cfg.with_overrides({"data_root": args.root})
        written = pipeline.export_heatmaps(stored, None, out, cfg)
        return {"out": str(out), "count": len(written)}
    raise ValueError(f"unknown verb {args.verb}")  # pragma: no cover


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        _emit(run(args))
    except Exception as exc:  # report every failure as structured JSON
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
