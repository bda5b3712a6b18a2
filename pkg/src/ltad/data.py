"""MVTec-style folder datasets and a procedural defect corpus.

Layout::

    <root>/<class>/train/good/*.png
    <root>/<class>/test/good/*.png
    <root>/<class>/test/<defect>/*.png
    <root>/<class>/ground_truth/<defect>/<stem>_mask.png
"""
from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


@dataclass(frozen=True)
class ImageRecord:
    id: str
    path: str
    class_name: str
    label: str  # "normal" | "anomalous"
    mask_path: Optional[str] = None

    @property
    def is_anomalous(self) -> bool:
        return self.label == "anomalous"


@dataclass
class DatasetIndex:
    classes: list[str]
    train_normals: dict[str, list[ImageRecord]] = field(default_factory=dict)
    test_samples: dict[str, list[ImageRecord]] = field(default_factory=dict)
    root: Optional[str] = None

    def records(self):
        for c in self.classes:
            yield from self.train_normals.get(c, [])
            yield from self.test_samples.get(c, [])

    def train_lookup(self) -> dict[str, ImageRecord]:
        return {r.id: r for c in self.classes for r in self.train_normals[c]}

    def digest(self) -> str:
        rows = [
            [r.id, r.class_name, r.label, os.path.basename(r.mask_path) if r.mask_path else None]
            for r in self.records()
        ]
        return hashlib.sha256(json.dumps(rows).encode()).hexdigest()


def _images_in(folder: Path) -> list[Path]:
    if not folder.is_dir():
        return []
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_folder_dataset(root) -> DatasetIndex:
    """Index an MVTec-layout directory.

    Anomalous test images are paired with ``ground_truth/<defect>/<stem>_mask.*``.
    Raises ``FileNotFoundError`` for a missing mask and ``ValueError`` for a
    class with no training images.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir() and (p / "train").is_dir())
    if not classes:
        raise ValueError(f"no classes found under {root}")

    index = DatasetIndex(classes=classes, root=str(root))
    for c in classes:
        train = [
            ImageRecord(id=f"{c}/train/good/{p.stem}", path=str(p), class_name=c, label="normal")
            for p in _images_in(root / c / "train" / "good")
        ]
        if not train:
            raise ValueError(f"class {c!r} has no training images")
        index.train_normals[c] = train

        tests: list[ImageRecord] = []
        test_dir = root / c / "test"
        defect_dirs = sorted(p for p in test_dir.iterdir() if p.is_dir()) if test_dir.is_dir() else []
        missing: list[str] = []
        for d in defect_dirs:
            for p in _images_in(d):
                rid = f"{c}/test/{d.name}/{p.stem}"
                if d.name == "good":
                    tests.append(ImageRecord(rid, str(p), c, "normal"))
                    continue
                masks = [
                    m
                    for m in _images_in(root / c / "ground_truth" / d.name)
                    if m.stem in (f"{p.stem}_mask", p.stem)
                ]
                if not masks:
                    missing.append(str(p))
                    continue
                tests.append(ImageRecord(rid, str(p), c, "anomalous", str(masks[0])))
        if missing:
            raise FileNotFoundError("anomalous test images without masks: " + ", ".join(missing))
        index.test_samples[c] = tests
    return index


def load_image(record_or_path, side: int = 224) -> np.ndarray:
    """RGB image resized bilinearly to ``side x side``, float32 in [0, 1]."""
    path = record_or_path.path if isinstance(record_or_path, ImageRecord) else record_or_path
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if im.size != (side, side):
                im = im.resize((side, side), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    return arr


def load_mask(record: ImageRecord, side: int = 224) -> np.ndarray:
    """Binary {0, 1} uint8 mask; all zeros for normal records."""
    if record.mask_path is None:
        return np.zeros((side, side), dtype=np.uint8)
    with Image.open(record.mask_path) as im:
        im = im.convert("L")
        if im.size != (side, side):
            im = im.resize((side, side), Image.NEAREST)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return (arr >= 0.5).astype(np.uint8)


# --------------------------------------------------------------------------
# synthetic corpus

@dataclass(frozen=True)
class CorpusSpec:
    num_classes: int = 5
    per_class_train: int = 40
    per_class_test: int = 20
    image_size: int = 224
    defect_rate: float = 0.5
    seed: int = 0


# one procedural family per class; cycled when num_classes exceeds the list
FAMILIES = ("striped_disc", "checker_square", "dotted_grid", "rings", "wave_band", "cross_hatch", "triangle")
DEFECTS = ("patch_swap", "scratch", "blot")


def _rng(*keys) -> np.random.Generator:
    h = hashlib.sha256(":".join(str(k) for k in keys).encode()).digest()
    return np.random.default_rng(int.from_bytes(h[:8], "little"))


def _grid(size: int):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return (xx + 0.5) / size, (yy + 0.5) / size


def _render_normal(family: str, class_rng_seed: int, rng: np.random.Generator, size: int) -> np.ndarray:
    """Render one normal image; class palette is fixed, per-image jitter is small."""
    palette_rng = np.random.default_rng(class_rng_seed)
    bg = palette_rng.uniform(0.1, 0.4, 3)
    fg = palette_rng.uniform(0.55, 0.95, 3)
    period = palette_rng.uniform(0.06, 0.12)

    x, y = _grid(size)
    cx, cy = 0.5 + rng.normal(0, 0.015, 2)
    phase = rng.uniform(0, 2 * np.pi)
    angle = palette_rng.uniform(0, np.pi) + rng.normal(0, 0.03)
    u = (x - cx) * np.cos(angle) + (y - cy) * np.sin(angle)
    v = -(x - cx) * np.sin(angle) + (y - cy) * np.cos(angle)
    r = np.hypot(x - cx, y - cy)

    if family == "striped_disc":
        inside = r < 0.38
        pattern = 0.5 + 0.5 * np.sin(2 * np.pi * u / period + phase)
        weight = np.where(inside, pattern, 0.0)
    elif family == "checker_square":
        inside = (np.abs(u) < 0.32) & (np.abs(v) < 0.32)
        cells = (np.floor(u / (1.5 * period) + phase) + np.floor(v / (1.5 * period))) % 2
        weight = np.where(inside, 0.2 + 0.8 * cells, 0.0)
    elif family == "dotted_grid":
        du = (u / period + phase / (2 * np.pi)) % 1.0 - 0.5
        dv = (v / period) % 1.0 - 0.5
        weight = (np.hypot(du, dv) < 0.28).astype(np.float64)
    elif family == "rings":
        weight = 0.5 + 0.5 * np.cos(2 * np.pi * r / period + phase)
        weight *= r < 0.45
    elif family == "wave_band":
        band = np.abs(v - 0.08 * np.sin(2 * np.pi * u / (3 * period) + phase)) < 0.18
        weight = band.astype(np.float64) * (0.6 + 0.4 * np.cos(2 * np.pi * u / period))
    elif family == "cross_hatch":
        a = 0.5 + 0.5 * np.sin(2 * np.pi * u / period + phase)
        b = 0.5 + 0.5 * np.sin(2 * np.pi * v / period)
        weight = np.maximum(a, b) ** 4
    else:  # triangle
        inside = (v > -0.3) & (v < 0.3 - 1.7 * np.abs(u))
        weight = inside * (0.5 + 0.5 * np.sin(2 * np.pi * (u + v) / period + phase))

    weight = np.clip(weight, 0.0, 1.0)[..., None]
    img = bg * (1 - weight) + fg * weight
    img = img * rng.uniform(0.95, 1.05) + rng.normal(0, 0.01, img.shape)
    return np.clip(img, 0.0, 1.0)


def _add_defect(img: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, str]:
    """Return (defective image, exact boolean mask of changed pixels, defect kind)."""
    size = img.shape[0]
    kind = DEFECTS[int(rng.integers(len(DEFECTS)))]
    out = img.copy()
    x, y = _grid(size)
    lo, hi = 0.2, 0.8

    if kind == "patch_swap":
        side = max(2, int(size * rng.uniform(0.14, 0.22)))
        x0, y0 = (rng.uniform(lo, hi - 0.22, 2) * size).astype(int)
        x1, y1 = (rng.uniform(0.05, 0.95 - 0.22, 2) * size).astype(int)
        patch = np.rot90(img[y1 : y1 + side, x1 : x1 + side], k=1)
        # invert to guarantee a visible change even on isotropic textures
        out[y0 : y0 + side, x0 : x0 + side] = 1.0 - patch
        region = np.zeros((size, size), bool)
        region[y0 : y0 + side, x0 : x0 + side] = True
    elif kind == "scratch":
        cx, cy = rng.uniform(lo, hi, 2)
        theta = rng.uniform(0, np.pi)
        half_len = rng.uniform(0.12, 0.22)
        width = rng.uniform(0.012, 0.025)
        along = (x - cx) * np.cos(theta) + (y - cy) * np.sin(theta)
        across = -(x - cx) * np.sin(theta) + (y - cy) * np.cos(theta)
        region = (np.abs(along) < half_len) & (np.abs(across) < width)
        colour = rng.choice([0.0, 1.0], size=3)
        out[region] = colour
    else:  # blot
        cx, cy = rng.uniform(lo, hi, 2)
        ra, rb = rng.uniform(0.05, 0.1, 2)
        region = ((x - cx) / ra) ** 2 + ((y - cy) / rb) ** 2 < 1.0
        colour = rng.uniform(0, 1, 3)
        colour[int(rng.integers(3))] = rng.choice([0.0, 1.0])
        out[region] = 0.5 * out[region] + 0.5 * colour

    q_in = np.round(img * 255).astype(np.uint8)
    q_out = np.round(np.clip(out, 0, 1) * 255).astype(np.uint8)
    changed = np.any(q_in != q_out, axis=-1)
    mask = region & changed
    # keep unmasked pixels byte-identical to the normal rendering
    q_out[~mask] = q_in[~mask]
    return q_out, mask, kind


def _save_png(arr: np.ndarray, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG", optimize=False)


def generate_synthetic_corpus(out_dir, spec: CorpusSpec | None = None, **kwargs) -> DatasetIndex:
    """Write a deterministic procedural defect corpus to ``out_dir``.

    Every class is a distinct texture family with a class-specific palette;
    anomalous test images carry a patch swap, scratch or blot together with
    the exact binary mask of changed pixels.
    """
    spec = spec or CorpusSpec(**kwargs)
    if spec.image_size < 32:
        raise ValueError("image_size must be >= 32")
    if not 0 < spec.defect_rate < 1:
        raise ValueError("defect_rate must lie in (0, 1)")
    n_anom = int(math.floor(spec.per_class_test * spec.defect_rate))
    if n_anom < 1:
        raise ValueError("per_class_test * defect_rate < 1: no anomalies to evaluate")
    if spec.num_classes < 1 or spec.per_class_train < 1:
        raise ValueError("need at least one class and one training image per class")

    out = Path(out_dir)
    size = spec.image_size
    index = DatasetIndex(classes=[], root=str(out))
    for k in range(spec.num_classes):
        family = FAMILIES[k % len(FAMILIES)]
        name = f"{family}_{k:02d}"
        palette_seed = int.from_bytes(hashlib.sha256(f"{spec.seed}:palette:{k}".encode()).digest()[:8], "little")
        index.classes.append(name)

        train = []
        for i in range(spec.per_class_train):
            rng = _rng(spec.seed, name, "train", i)
            img = np.round(_render_normal(family, palette_seed, rng, size) * 255).astype(np.uint8)
            path = out / name / "train" / "good" / f"{i:03d}.png"
            _save_png(img, path)
            train.append(ImageRecord(f"{name}/train/good/{i:03d}", str(path), name, "normal"))
        index.train_normals[name] = train

        tests = []
        for i in range(spec.per_class_test):
            rng = _rng(spec.seed, name, "test", i)
            clean = _render_normal(family, palette_seed, rng, size)
            if i < n_anom:
                img, mask, kind = _add_defect(clean, rng)
                if not mask.any():
                    raise RuntimeError(f"empty defect mask for {name} test {i}")
                path = out / name / "test" / kind / f"{i:03d}.png"
                mpath = out / name / "ground_truth" / kind / f"{i:03d}_mask.png"
                _save_png(img, path)
                _save_png(mask.astype(np.uint8) * 255, mpath)
                tests.append(ImageRecord(f"{name}/test/{kind}/{i:03d}", str(path), name, "anomalous", str(mpath)))
            else:
                img = np.round(clean * 255).astype(np.uint8)
                path = out / name / "test" / "good" / f"{i:03d}.png"
                _save_png(img, path)
                tests.append(ImageRecord(f"{name}/test/good/{i:03d}", str(path), name, "normal"))
        # same ordering as load_folder_dataset: by defect directory, then stem
        tests.sort(key=lambda r: r.id)
        index.test_samples[name] = tests
    index.classes.sort()
    with open(out / "corpus.json", "w") as fh:
        json.dump(spec.__dict__, fh, indent=2)
    return index
