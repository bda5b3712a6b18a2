import time

import pytest
import torch

from ltad import pipeline
from ltad.config import toy_config
from ltad.data import CorpusSpec, generate_synthetic_corpus

_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture
def criterion(request):
    """``criterion(tag, ok, detail)`` records and prints one PASS/FAIL line, then asserts ``ok``."""

    def report(tag: str, ok: bool, detail: str = "") -> None:
        line = f"{'PASS' if ok else 'FAIL'}  {tag}  {detail}".rstrip()
        request.config.stash[_ACCEPTANCE].append(line)
        print(line)
        assert ok, line

    return report


@pytest.fixture(scope="session", autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Three classes, small images; enough for plumbing tests."""
    root = tmp_path_factory.mktemp("tiny_corpus")
    index = generate_synthetic_corpus(root, CorpusSpec(num_classes=3, per_class_train=6, per_class_test=4, image_size=64, seed=11))
    return root, index


@pytest.fixture(scope="session")
def desk_corpus(tmp_path_factory):
    """The five-class 224 px reference corpus."""
    root = tmp_path_factory.mktemp("desk_corpus")
    return root, generate_synthetic_corpus(root, CorpusSpec())


def train_desk(root, index, seed, out=None):
    cfg = toy_config(seed=seed, data_root=str(root))
    t0 = time.perf_counter()
    p1 = pipeline.run_phase1(cfg, out, index=index)
    p2 = pipeline.run_phase2(cfg, p1, out, index=index)
    records = [r for c in p2.manifest.classes for r in index.test_samples[c]]
    scores = pipeline.compute_patch_scores(p2.models, records)
    report = pipeline.evaluate(p2, index=index, scores=scores)
    return {"cfg": cfg, "p1": p1, "p2": p2, "scores": scores, "report": report, "seconds": time.perf_counter() - t0}


@pytest.fixture(scope="session")
def desk_run(desk_corpus, tmp_path_factory):
    """Seed-0 toy run on the reference corpus, shared by the slow tests."""
    root, index = desk_corpus
    run = train_desk(root, index, 0, tmp_path_factory.mktemp("desk_run"))
    return {**run, "index": index, "root": root}
