"""Long-tailed training subsets drawn from a balanced dataset index.

The test split is never touched here; only per-class lists of normal
training ids are resampled.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

IMBALANCE_TYPES = ("exponential", "step")
CLASS_ORDERS = ("by_popularity", "reversed")
_TYPE_ALIASES = {"exp": "exponential", "step": "step", "exponential": "exponential"}


@dataclass(frozen=True)
class SplitSpec:
    imbalance_type: str = "exponential"
    beta: float = 100.0
    class_order: str = "by_popularity"
    seed: int = 0

    def __post_init__(self):
        kind = _TYPE_ALIASES.get(self.imbalance_type)
        if kind is None:
            raise ValueError(f"unknown imbalance type {self.imbalance_type!r}")
        object.__setattr__(self, "imbalance_type", kind)
        if self.class_order not in CLASS_ORDERS:
            raise ValueError(f"unknown class order {self.class_order!r}")
        if not self.beta >= 1:
            raise ValueError(f"imbalance factor must be >= 1, got {self.beta}")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "SplitSpec":
        return cls(
            imbalance_type=d["imbalance_type"],
            beta=float(d["beta"]),
            class_order=d.get("class_order", "by_popularity"),
            seed=int(d.get("seed", 0)),
        )


@dataclass
class SplitManifest:
    spec: SplitSpec
    source_digest: str
    per_class_samples: dict[str, list[str]]
    target_counts: dict[str, int]
    majority: list[str] = field(default_factory=list)
    minority: list[str] = field(default_factory=list)

    @property
    def classes(self) -> list[str]:
        return list(self.per_class_samples)

    def kept_counts(self) -> dict[str, int]:
        return {c: len(ids) for c, ids in self.per_class_samples.items()}

    def to_json(self) -> str:
        doc = {
            "spec": self.spec.to_dict(),
            "source_digest": self.source_digest,
            "classes": [
                {
                    "name": c,
                    "target": self.target_counts[c],
                    "kept": len(ids),
                    "samples": list(ids),
                }
                for c, ids in self.per_class_samples.items()
            ],
            "majority": list(self.majority),
            "minority": list(self.minority),
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SplitManifest":
        doc = json.loads(text)
        per_class = {e["name"]: list(e["samples"]) for e in doc["classes"]}
        targets = {e["name"]: int(e["target"]) for e in doc["classes"]}
        return cls(
            spec=SplitSpec.from_dict(doc["spec"]),
            source_digest=doc["source_digest"],
            per_class_samples=per_class,
            target_counts=targets,
            majority=list(doc["majority"]),
            minority=list(doc["minority"]),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "SplitManifest":
        with open(path) as fh:
            return cls.from_json(fh.read())

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def order_classes(class_counts: Mapping[str, int], class_order: str = "by_popularity") -> list[str]:
    """Descending original count, ties broken by class name."""
    ordered = sorted(class_counts, key=lambda c: (-class_counts[c], c))
    if class_order == "reversed":
        ordered.reverse()
    return ordered


def compute_target_counts(class_counts: Mapping[str, int], spec: SplitSpec) -> dict[str, int]:
    """Per-class target cardinalities, returned in popularity order.

    Exponential: ``max(1, floor(N_max * beta ** (-c / (C - 1))))`` for the
    c-th ordered class. Step: the first ``ceil(C / 2)`` classes keep
    ``N_max``, the rest get ``max(1, floor(N_max / beta))``.
    """
    if not class_counts:
        raise ValueError("class_counts is empty")
    for c, n in class_counts.items():
        if n < 1:
            raise ValueError(f"class {c!r} has no samples")
    if spec.beta < 1:
        raise ValueError(f"imbalance factor must be >= 1, got {spec.beta}")

    ordered = order_classes(class_counts, spec.class_order)
    n_classes = len(ordered)
    n_max = class_counts[ordered[0]]

    targets: dict[str, int] = {}
    if spec.imbalance_type == "exponential":
        if n_classes < 2:
            raise ValueError("exponential imbalance needs at least two classes")
        for i, c in enumerate(ordered):
            # small epsilon so that exact powers (e.g. 100 * 100**-1) floor correctly
            value = n_max * spec.beta ** (-i / (n_classes - 1))
            targets[c] = max(1, math.floor(value + 1e-9))
    else:
        n_major = math.ceil(n_classes / 2)
        low = max(1, math.floor(n_max / spec.beta + 1e-9))
        for i, c in enumerate(ordered):
            targets[c] = n_max if i < n_major else low
    return targets


def _class_seed(seed: int, digest: str, class_name: str) -> np.random.Generator:
    h = hashlib.sha256(f"{seed}:{digest}:{class_name}".encode()).digest()
    return np.random.default_rng(int.from_bytes(h[:8], "little"))


def index_digest(per_class_ids: Mapping[str, Sequence[str]]) -> str:
    payload = json.dumps({c: list(per_class_ids[c]) for c in sorted(per_class_ids)}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def partition_high_low(manifest_or_targets) -> tuple[list[str], list[str]]:
    """Split classes into the ceil(C/2) most populated (by target) and the rest."""
    targets = (
        manifest_or_targets.target_counts
        if isinstance(manifest_or_targets, SplitManifest)
        else manifest_or_targets
    )
    ordered = sorted(targets, key=lambda c: (-targets[c], c))
    n_major = math.ceil(len(ordered) / 2)
    return ordered[:n_major], ordered[n_major:]


def sample_split(
    index, spec: SplitSpec, class_counts: Mapping[str, int] | None = None
) -> SplitManifest:
    """Draw a long-tailed manifest from ``index``.

    ``index`` is either a ``DatasetIndex`` or a mapping class -> list of
    sample ids. Each class keeps ``min(target, available)`` ids drawn
    uniformly without replacement; the draw depends only on the seed, the
    index digest and the class name.

    ``class_counts`` optionally gives the nominal per-class cardinalities
    used for popularity ordering and targets (defaults to the available
    counts), e.g. when a nominally balanced dataset has a short class.
    """
    if hasattr(index, "train_normals"):
        per_class_ids = {c: [r.id for r in index.train_normals[c]] for c in index.classes}
    else:
        per_class_ids = {c: list(ids) for c, ids in index.items()}
    for c, ids in per_class_ids.items():
        if not ids:
            raise ValueError(f"class {c!r} has no training samples")
        if len(set(ids)) != len(ids):
            raise ValueError(f"class {c!r} has duplicate sample ids")

    digest = index_digest(per_class_ids)
    counts = {c: len(ids) for c, ids in per_class_ids.items()}
    if class_counts is not None:
        if set(class_counts) != set(counts):
            raise ValueError("class_counts must cover exactly the index classes")
        counts = dict(class_counts)
    targets = compute_target_counts(counts, spec)

    per_class: dict[str, list[str]] = {}
    for c in targets:
        ids = per_class_ids[c]
        keep = min(targets[c], len(ids))
        if keep == len(ids):
            per_class[c] = list(ids)
            continue
        rng = _class_seed(spec.seed, digest, c)
        picked = rng.choice(len(ids), size=keep, replace=False)
        per_class[c] = [ids[i] for i in sorted(picked)]

    majority, minority = partition_high_low(targets)
    return SplitManifest(
        spec=spec,
        source_digest=digest,
        per_class_samples=per_class,
        target_counts=targets,
        majority=majority,
        minority=minority,
    )
