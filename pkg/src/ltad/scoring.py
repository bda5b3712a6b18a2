"""Score fusion, anomaly maps, AUROC and All/High/Low reports."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import gaussian_filter
from scipy.stats import rankdata

log = logging.getLogger(__name__)

# lambda defaults per dataset family
LAMBDA_DEFAULTS = {"mvtec": 500.0, "visa": 400.0, "dagm": 300.0}


def fuse(s_rec, s_sem, lam: float):
    if lam < 0:
        raise ValueError("fusion weight must be non-negative")
    return s_rec + lam * s_sem


def patch_map_to_pixel_map(patch_scores, out_size: tuple[int, int], smooth_sigma: float = 4.0) -> np.ndarray:
    """Bilinear upsampling of an ``(H1, W1)`` grid to ``out_size`` then Gaussian smoothing."""
    grid = torch.as_tensor(np.asarray(patch_scores, dtype=np.float64))
    h, w = out_size
    if h < grid.shape[0] or w < grid.shape[1]:
        raise ValueError("output size smaller than the patch grid")
    up = F.interpolate(grid[None, None], size=(h, w), mode="bilinear", align_corners=False)[0, 0].numpy()
    if smooth_sigma > 0:
        up = gaussian_filter(up, sigma=smooth_sigma, mode="nearest")
    return up


def image_score(pixel_map) -> float:
    return float(np.max(pixel_map))


@dataclass
class AnomalyMap:
    patch_scores: np.ndarray
    pixel_map: np.ndarray
    image_score: float

    @classmethod
    def from_patches(cls, patch_scores, out_size, smooth_sigma: float = 4.0) -> "AnomalyMap":
        pix = patch_map_to_pixel_map(patch_scores, out_size, smooth_sigma)
        return cls(np.asarray(patch_scores), pix, image_score(pix))


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC with average ranks for ties.

    Equals ``P(s_pos > s_neg) + 0.5 * P(s_pos == s_neg)``.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores contain NaN or infinity")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC is undefined with a single label value")
    ranks = rankdata(s, method="average")
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class EvalReport:
    detection: dict[str, Optional[float]]
    segmentation: dict[str, Optional[float]]
    det_summary: dict[str, Optional[float]]
    seg_summary: dict[str, Optional[float]]
    majority: list[str]
    minority: list[str]
    digests: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "detection": {**self.det_summary, "per_class": dict(self.detection)},
            "segmentation": {**self.seg_summary, "per_class": dict(self.segmentation)},
            "majority": list(self.majority),
            "minority": list(self.minority),
            "digests": dict(self.digests),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalReport":
        det = dict(d["detection"])
        seg = dict(d["segmentation"])
        return cls(
            detection=det.pop("per_class"),
            segmentation=seg.pop("per_class"),
            det_summary=det,
            seg_summary=seg,
            majority=list(d["majority"]),
            minority=list(d["minority"]),
            digests=dict(d.get("digests", {})),
        )


def _mean(values: Sequence[Optional[float]]) -> Optional[float]:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def summarize(per_class: Mapping[str, Optional[float]], majority, minority) -> dict[str, Optional[float]]:
    return {
        "all": _mean([per_class[c] for c in per_class]),
        "high": _mean([per_class[c] for c in majority]),
        "low": _mean([per_class[c] for c in minority]),
    }


def class_metrics(image_scores, image_labels, pixel_maps=None, masks=None, class_name: str = "") -> dict:
    """Detection AUROC on image scores; segmentation AUROC pooled over all pixels of the class."""
    det = auroc(image_scores, image_labels)
    seg = None
    if pixel_maps is not None:
        pix = np.concatenate([np.asarray(m, dtype=np.float64).ravel() for m in pixel_maps])
        gt = np.concatenate([np.asarray(m).ravel() for m in masks]).astype(bool)
        if gt.any() and not gt.all():
            seg = auroc(pix, gt)
        else:
            log.warning("class %s has no anomalous test pixels; segmentation AUROC left out", class_name)
    return {"det_auroc": det, "seg_auroc": seg}


def aggregate_report(per_class: Mapping[str, Mapping], manifest, digests: Optional[dict] = None) -> EvalReport:
    """Unweighted All/High/Low means; ``manifest`` supplies the majority/minority sets."""
    majority = list(manifest.majority)
    minority = list(manifest.minority)
    missing = [c for c in [*majority, *minority] if c not in per_class]
    if missing:
        raise KeyError(f"no evaluation results for classes {missing}")
    order = [*majority, *minority]
    det = {c: per_class[c]["det_auroc"] for c in order}
    seg = {c: per_class[c].get("seg_auroc") for c in order}
    for name, table in (("detection", det), ("segmentation", seg)):
        for c, v in table.items():
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} AUROC for {c} outside [0, 1]: {v}")
    return EvalReport(
        detection=det,
        segmentation=seg,
        det_summary=summarize(det, majority, minority),
        seg_summary=summarize(seg, majority, minority),
        majority=majority,
        minority=minority,
        digests=dict(digests or {}),
    )


def _heat_colours(x: np.ndarray) -> np.ndarray:
    # black -> red -> yellow -> white ramp
    r = np.clip(3 * x, 0, 1)
    g = np.clip(3 * x - 1, 0, 1)
    b = np.clip(3 * x - 2, 0, 1)
    return (np.stack([r, g, b], axis=-1) * 255).round().astype(np.uint8)


def write_heatmap(
    pixel_map: np.ndarray,
    path,
    overlay_path=None,
    image: Optional[np.ndarray] = None,
    mask: Optional[np.ndarray] = None,
) -> None:
    """Per-image min-max normalised heatmap PNG plus a JSON sidecar with the raw range.

    With ``overlay_path`` and ``image`` given, also writes the heatmap blended
    over the image with the ground-truth mask boundary drawn in green.
    """
    from PIL import Image

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lo, hi = float(np.min(pixel_map)), float(np.max(pixel_map))
    norm = (pixel_map - lo) / (hi - lo) if hi > lo else np.zeros_like(pixel_map)
    heat = _heat_colours(norm)
    Image.fromarray(heat).save(path, format="PNG")
    with open(path.with_suffix(".json"), "w") as fh:
        json.dump({"min": lo, "max": hi}, fh)
    if overlay_path is not None and image is not None:
        base = (np.asarray(image, dtype=np.float64) * 255).round()
        over = (0.5 * base + 0.5 * heat).round().astype(np.uint8)
        if mask is not None and np.any(mask):
            m = np.asarray(mask).astype(bool)
            edge = m & ~(
                np.roll(m, 1, 0) & np.roll(m, -1, 0) & np.roll(m, 1, 1) & np.roll(m, -1, 1)
            )
            over[edge] = (0, 255, 0)
        overlay_path = Path(overlay_path)
        overlay_path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(over).save(overlay_path, format="PNG")
