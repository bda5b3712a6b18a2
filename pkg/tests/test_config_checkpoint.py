import pytest
import torch
from hypothesis import given, strategies as st

from ltad.checkpoint import MAGIC, file_digest, load_checkpoint, prefixed, save_checkpoint, unprefixed
from ltad.config import ExperimentConfig, full_scale_config, toy_config


class TestConfig:
    def test_json_round_trip(self, tmp_path):
        cfg = toy_config(**{"seed": 7, "sad.pooling": "mean", "ablation.shuffle_permutation": [1, 2, 0]})
        cfg.save(tmp_path / "c.json")
        back = ExperimentConfig.load(tmp_path / "c.json")
        assert back == cfg
        assert back.digest() == cfg.digest()

    def test_full_scale_round_trip(self):
        cfg = full_scale_config("visa")
        assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg
        assert cfg.lambda_fusion == 400.0

    @given(st.floats(1e-6, 1.0), st.integers(0, 2**31))
    def test_overrides(self, lr, seed):
        cfg = toy_config().with_overrides({"optim.lr": lr, "seed": seed})
        assert cfg.optim.lr == lr and cfg.seed == seed
        assert cfg.rm == toy_config().rm

    def test_unknown_keys(self):
        with pytest.raises(KeyError):
            toy_config().with_overrides({"optim.momentum": 0.9})
        with pytest.raises(KeyError):
            toy_config().with_overrides({"nothing.lr": 0.9})
        with pytest.raises(KeyError):
            ExperimentConfig.from_dict({"bogus": 1})

    def test_both_branches_disabled(self):
        with pytest.raises(ValueError):
            toy_config(**{"ablation.disable_sad": True, "ablation.disable_rm": True})

    def test_negative_lambda(self):
        with pytest.raises(ValueError):
            toy_config(lambda_fusion=-1.0)

    def test_digest_sensitive(self):
        assert toy_config().digest() != toy_config(seed=1).digest()


class TestCheckpoint:
    def _tensors(self):
        g = torch.Generator().manual_seed(0)
        return {
            "b.w": torch.randn(3, 4, generator=g),
            "a.x": torch.arange(5, dtype=torch.int64),
            "c.d": torch.randn(2, dtype=torch.float64, generator=g),
        }

    def test_round_trip(self, tmp_path):
        t = self._tensors()
        save_checkpoint(tmp_path / "x.ckpt", t, {"kind": "test", "n": [1, 2]})
        back, meta = load_checkpoint(tmp_path / "x.ckpt")
        assert meta == {"kind": "test", "n": [1, 2]}
        assert set(back) == set(t)
        for k in t:
            assert back[k].dtype == t[k].dtype and torch.equal(back[k], t[k])

    def test_byte_identical(self, tmp_path):
        t = self._tensors()
        d1 = save_checkpoint(tmp_path / "1.ckpt", t, {"b": 1, "a": 2})
        # insertion order of tensors and meta keys must not matter
        d2 = save_checkpoint(tmp_path / "2.ckpt", dict(reversed(list(t.items()))), {"a": 2, "b": 1})
        assert d1 == d2 == file_digest(tmp_path / "1.ckpt")
        assert (tmp_path / "1.ckpt").read_bytes() == (tmp_path / "2.ckpt").read_bytes()

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"NOTACKPT" + bytes(16))
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "x.ckpt")

    def test_bad_version(self, tmp_path):
        header = b'{"format_version": 99, "meta": {}, "tensors": []}'
        (tmp_path / "x.ckpt").write_bytes(MAGIC + len(header).to_bytes(8, "little") + header)
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "x.ckpt")

    def test_prefix_helpers(self):
        state = {"w": torch.ones(1), "b": torch.zeros(1)}
        p = prefixed("heads", state)
        assert set(p) == {"heads.w", "heads.b"}
        assert unprefixed("heads", {**p, "headsx.w": torch.ones(1)}) == state
