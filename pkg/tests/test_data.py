import numpy as np
import pytest
from PIL import Image

from ltad.data import (
    CorpusSpec,
    ImageRecord,
    generate_synthetic_corpus,
    load_folder_dataset,
    load_image,
    load_mask,
)


def _png(path, arr):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def _mvtec_tree(root, with_mask=True):
    rng = np.random.default_rng(0)
    for c in ["bottle", "cable"]:
        for i in range(5):
            _png(root / c / "train" / "good" / f"{i:03d}.png", rng.integers(0, 255, (32, 32, 3), dtype=np.uint8))
        _png(root / c / "test" / "good" / "000.png", rng.integers(0, 255, (32, 32, 3), dtype=np.uint8))
        _png(root / c / "test" / "crack" / "007.png", rng.integers(0, 255, (32, 32, 3), dtype=np.uint8))
        if with_mask:
            m = np.zeros((32, 32), np.uint8)
            m[4:9, 4:9] = 255
            _png(root / c / "ground_truth" / "crack" / "007_mask.png", m)


class TestFolderDataset:
    def test_counts_and_labels(self, tmp_path):
        _mvtec_tree(tmp_path)
        idx = load_folder_dataset(tmp_path)
        assert idx.classes == ["bottle", "cable"]
        assert sum(len(v) for v in idx.train_normals.values()) == 10
        good = [r for r in idx.test_samples["bottle"] if r.label == "normal"]
        assert len(good) == 1 and good[0].mask_path is None
        bad = [r for r in idx.test_samples["bottle"] if r.is_anomalous]
        assert bad[0].mask_path.endswith("007_mask.png")

    def test_missing_mask_names_the_image(self, tmp_path):
        _mvtec_tree(tmp_path, with_mask=False)
        with pytest.raises(FileNotFoundError, match="007"):
            load_folder_dataset(tmp_path)

    def test_empty_class(self, tmp_path):
        (tmp_path / "empty" / "train" / "good").mkdir(parents=True)
        with pytest.raises(ValueError):
            load_folder_dataset(tmp_path)

    def test_missing_root(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_folder_dataset(tmp_path / "nope")


class TestImages:
    def test_resize_shape_and_range(self, tmp_path):
        arr = np.random.default_rng(1).integers(0, 255, (448, 448, 3), dtype=np.uint8)
        _png(tmp_path / "x.png", arr)
        img = load_image(tmp_path / "x.png", 224)
        assert img.shape == (224, 224, 3) and img.dtype == np.float32
        assert 0.0 <= img.min() and img.max() <= 1.0

    def test_same_size_round_trip(self, tmp_path):
        arr = np.random.default_rng(2).integers(0, 255, (224, 224, 3), dtype=np.uint8)
        _png(tmp_path / "x.png", arr)
        np.testing.assert_array_equal(np.round(load_image(tmp_path / "x.png") * 255).astype(np.uint8), arr)

    def test_mask_stays_binary(self, tmp_path):
        m = np.zeros((97, 97), np.uint8)
        m[10:40, 20:77] = 255
        _png(tmp_path / "m.png", m)
        rec = ImageRecord("a", str(tmp_path / "m.png"), "c", "anomalous", str(tmp_path / "m.png"))
        out = load_mask(rec, 224)
        assert set(np.unique(out)) <= {0, 1} and out.any()

    def test_unreadable_file(self, tmp_path):
        (tmp_path / "bad.png").write_bytes(b"not an image")
        with pytest.raises(OSError):
            load_image(tmp_path / "bad.png")


class TestSyntheticCorpus:
    def test_counts(self, tmp_path):
        idx = generate_synthetic_corpus(tmp_path, CorpusSpec(5, 40, 20, image_size=48))
        assert sum(len(v) for v in idx.train_normals.values()) == 200
        tests = [r for v in idx.test_samples.values() for r in v]
        assert sum(r.is_anomalous for r in tests) == 50
        assert sum(not r.is_anomalous for r in tests) == 50

    def test_byte_identical(self, tmp_path):
        spec = CorpusSpec(2, 3, 4, image_size=48, seed=5)
        a = generate_synthetic_corpus(tmp_path / "a", spec)
        b = generate_synthetic_corpus(tmp_path / "b", spec)
        for ra, rb in zip(a.records(), b.records()):
            assert open(ra.path, "rb").read() == open(rb.path, "rb").read()

    def test_reload_reproduces_index(self, tiny_corpus):
        root, idx = tiny_corpus
        back = load_folder_dataset(root)
        assert back.classes == idx.classes
        assert back.digest() == idx.digest()
        for c in idx.classes:
            assert [(r.id, r.label, r.mask_path) for r in back.test_samples[c]] == [
                (r.id, r.label, r.mask_path) for r in idx.test_samples[c]
            ]

    def test_mask_fraction_bounds(self, tmp_path):
        idx = generate_synthetic_corpus(tmp_path, CorpusSpec(7, 1, 10, image_size=224, seed=3))
        for r in idx.records():
            if r.is_anomalous:
                frac = load_mask(r).mean()
                assert frac * 224 * 224 >= 1 and frac <= 0.25

    def test_mask_covers_exactly_the_changed_pixels(self, tmp_path):
        spec = CorpusSpec(3, 1, 6, image_size=96, defect_rate=0.5, seed=9)
        idx = generate_synthetic_corpus(tmp_path, spec)
        # re-render the clean counterpart with the generator's own rng stream
        from ltad.data import FAMILIES, _render_normal, _rng
        import hashlib

        for k, name in enumerate(sorted(idx.classes)):
            family = name.rsplit("_", 1)[0]
            kk = int(name.rsplit("_", 1)[1])
            palette = int.from_bytes(hashlib.sha256(f"{spec.seed}:palette:{kk}".encode()).digest()[:8], "little")
            for r in idx.test_samples[name]:
                if not r.is_anomalous:
                    continue
                i = int(r.id.rsplit("/", 1)[1])
                clean = np.round(_render_normal(family, palette, _rng(spec.seed, name, "test", i), 96) * 255).astype(np.uint8)
                img = np.asarray(Image.open(r.path).convert("RGB"))
                mask = np.asarray(Image.open(r.mask_path)) > 127
                changed = np.any(img != clean, axis=-1)
                np.testing.assert_array_equal(changed, mask)
            assert family in FAMILIES

    @pytest.mark.parametrize("kw", [{"image_size": 16}, {"defect_rate": 0.0}, {"per_class_test": 1}])
    def test_invalid_spec(self, tmp_path, kw):
        with pytest.raises(ValueError):
            generate_synthetic_corpus(tmp_path, **kw)
