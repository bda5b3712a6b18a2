"""End-to-end plumbing on a three-class corpus with a few epochs."""
import json

import numpy as np
import pytest
import torch

from ltad import pipeline as P
from ltad.checkpoint import load_checkpoint, save_checkpoint
from ltad.config import toy_config
from ltad.encoder import build_encoder
from ltad.text import cyclic_derangement


def tiny_cfg(root, **over):
    base = {
        "data_root": str(root),
        "rm.width": 32,
        "rm.heads": 2,
        "optim.batch_size": 4,
        "optim.epochs_phase1": 6,
        "optim.epochs_phase2": 3,
        "latent_dim": 16,
        "decoder_hidden": 16,
    }
    base.update(over)
    return toy_config(**base)


@pytest.fixture(scope="module")
def runs(tiny_corpus, tmp_path_factory):
    root, index = tiny_corpus
    out = tmp_path_factory.mktemp("runs")
    cfg = tiny_cfg(root)
    p1 = P.run_phase1(cfg, out / "p1", index=index)
    full = P.run_phase2(cfg, P.load_phase1(p1.checkpoint_path), out / "full", index=index)
    nosad_cfg = tiny_cfg(root, **{"ablation.disable_sad": True})
    nosad = P.run_phase2(nosad_cfg, P.load_phase1(p1.checkpoint_path, nosad_cfg), out / "nosad", index=index)
    return {"cfg": cfg, "index": index, "out": out, "p1": p1, "full": full, "nosad": nosad}


class TestPhase1:
    def test_loss_decreases(self, runs):
        losses = runs["p1"].losses
        assert len(losses) == 6 and losses[-1] < losses[0]

    def test_names_trained_encoders_frozen(self, runs):
        d = runs["p1"].digests
        assert d["bank"] != d["bank_init"]
        cfg = runs["cfg"]
        assert d["encoder"] == build_encoder(cfg.encoder, cfg.encoder_seed).digest()
        assert d["text_encoder"] == P.build_text_encoder(cfg).digest()

    def test_artifacts(self, runs):
        out = runs["out"] / "p1"
        assert (out / "manifest.json").exists() and (out / "phase1.ckpt").exists()
        rows = (out / "phase1_loss.csv").read_text().strip().splitlines()
        assert rows[0] == "epoch,loss" and len(rows) == 7

    def test_reload_round_trip(self, runs):
        back = P.load_phase1(runs["p1"].checkpoint_path)
        assert back.models.bank.digest() == runs["p1"].digests["bank"]
        assert back.manifest.digest() == runs["p1"].manifest.digest()
        for a, b in zip(back.models.decoder.parameters(), runs["p1"].models.decoder.parameters()):
            assert torch.equal(a, b)


class TestPhase2:
    def test_frozen_digests(self, runs):
        for name in ("full", "nosad"):
            d = runs[name].digests
            assert d["encoder"] == runs["p1"].digests["encoder"]
            assert d["text_encoder"] == runs["p1"].digests["text_encoder"]
            assert d["bank"] == runs["p1"].digests["bank"]
            assert runs[name].models.bank.digest() == runs["p1"].digests["bank"]

    def test_disable_sad_checkpoint_has_no_heads(self, runs):
        tensors, _ = load_checkpoint(runs["nosad"].checkpoint_path)
        assert not any(k.startswith("sad.") for k in tensors)
        assert any(k.startswith("rm.") for k in tensors)
        assert P.load_phase2(runs["nosad"].checkpoint_path).models.sad is None

    def test_disable_sad_leaves_rm_trajectory_bitwise(self, runs):
        a = runs["full"].models.rm.state_dict()
        b = runs["nosad"].models.rm.state_dict()
        assert a.keys() == b.keys()
        assert all(torch.equal(a[k], b[k]) for k in a)

    def test_checkpoint_reload_scores_identical(self, runs):
        index = runs["index"]
        recs = [r for c in runs["full"].manifest.classes for r in index.test_samples[c]][:3]
        a = P.compute_patch_scores(runs["full"].models, recs)
        b = P.compute_patch_scores(P.load_phase2(runs["full"].checkpoint_path).models, recs)
        for r in recs:
            assert np.array_equal(a.s_rec[r.id], b.s_rec[r.id]) and np.array_equal(a.s_sem[r.id], b.s_sem[r.id])

    def test_phase1_checkpoint_required_with_synthesis(self, runs, tiny_corpus):
        with pytest.raises(ValueError):
            P.run_phase2(runs["cfg"], None, index=tiny_corpus[1])

    def test_frozen_violation_detected(self, runs):
        m = P.load_phase1(runs["p1"].checkpoint_path).models
        before = {"encoder": m.encoder.digest(), "text_encoder": m.text_encoder.digest(), "bank": m.bank.digest()}
        with torch.no_grad():
            m.bank.pseudo_names.add_(1.0)
        with pytest.raises(P.FrozenParameterError):
            P._check_frozen(before, m, include_bank=True)


class TestDeterminism:
    def test_same_seed_same_bytes(self, runs, tmp_path):
        cfg, index = runs["cfg"], runs["index"]
        again = P.run_phase2(cfg, P.load_phase1(runs["p1"].checkpoint_path), tmp_path, index=index)
        assert again.checkpoint_digest == runs["full"].checkpoint_digest
        assert (tmp_path / "phase2.ckpt").read_bytes() == runs["full"].checkpoint_path.read_bytes()

    def test_phase1_repeatable(self, runs, tmp_path):
        again = P.run_phase1(runs["cfg"], tmp_path, index=runs["index"])
        assert again.checkpoint_digest == runs["p1"].checkpoint_digest

    def test_different_seed_differs(self, runs):
        cfg = runs["cfg"].with_overrides({"seed": 5, "optim.epochs_phase1": 1})
        assert P.run_phase1(cfg, index=runs["index"]).digests["bank"] != runs["p1"].digests["bank"]


class TestEvaluate:
    def test_lambda_zero_equals_disable_sad(self, runs, tmp_path):
        index = runs["index"]
        a = P.evaluate(runs["full"], index=index, lam=0.0)
        b = P.evaluate(runs["nosad"], index=index)
        assert a.detection == b.detection and a.segmentation == b.segmentation
        assert a.det_summary == b.det_summary and a.seg_summary == b.seg_summary

    def test_report_reproducible(self, runs, tmp_path):
        index = runs["index"]
        P.evaluate(runs["full"].checkpoint_path, index=index, out_path=tmp_path / "a.json")
        P.evaluate(runs["full"].checkpoint_path, index=index, out_path=tmp_path / "b.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
        rep = json.loads((tmp_path / "a.json").read_text())
        assert rep["digests"]["checkpoint"] == runs["full"].checkpoint_digest
        assert set(rep["detection"]["per_class"]) == set(runs["full"].manifest.classes)

    def test_shuffle_changes_only_semantic_scores(self, runs):
        index = runs["index"]
        recs = [r for c in runs["full"].manifest.classes for r in index.test_samples[c]]
        m = runs["full"].models
        a = P.compute_patch_scores(m, recs)
        b = P.compute_patch_scores(m, recs, cyclic_derangement(len(m.classes)))
        assert all(np.array_equal(a.s_rec[k], b.s_rec[k]) for k in a.s_rec)
        assert any(not np.array_equal(a.s_sem[k], b.s_sem[k]) for k in a.s_sem)

    def test_encoder_mismatch_refused(self, runs, tmp_path):
        tensors, meta = load_checkpoint(runs["full"].checkpoint_path)
        meta["digests"]["encoder"] = "0" * 64
        save_checkpoint(tmp_path / "bad.ckpt", tensors, meta)
        with pytest.raises(ValueError, match="encoder digest"):
            P.load_phase2(tmp_path / "bad.ckpt")
        with pytest.raises(ValueError, match="encoder spec"):
            P.load_phase1(runs["p1"].checkpoint_path, runs["cfg"].with_overrides({"encoder_seed": 3}))

    def test_wrong_kind(self, runs):
        with pytest.raises(ValueError):
            P.load_phase2(runs["p1"].checkpoint_path)


class TestHeatmaps:
    def test_one_file_per_test_image(self, runs, tmp_path):
        index = runs["index"]
        written = P.export_heatmaps(runs["full"], index, tmp_path)
        n_test = sum(len(index.test_samples[c]) for c in runs["full"].manifest.classes)
        assert len(written) == n_test
        assert len(list((tmp_path / "heatmaps").rglob("*.png"))) == n_test
        assert len(list((tmp_path / "overlays").rglob("*.png"))) == n_test

    def test_unwritable_target(self, runs, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        with pytest.raises(OSError):
            P.export_heatmaps(runs["full"], runs["index"], blocker / "sub")
