"""Shared fixtures: a small synthetic corpus with extracted features."""

import numpy as np
import pytest

from weakmtl import data, dsp
from weakmtl.model import ArchConfig

TINY_DSP = dsp.DspConfig(n_mels=32)

TINY_ARCH = ArchConfig(
    n_mels=32,
    n_frames=100,
    shared_channels=8,
    scene_channels=8,
    gru_hidden=4,
    fc_hidden=8,
    n_scenes=4,
    n_events=25,
    freq_pools=(8, 2, 2),
    scene_time_pool=25,
)


def extract_corpus_features(corpus_dir, out_dir, cfg=TINY_DSP):
    annotations = data.load_annotations(corpus_dir / "annotations.jsonl", data.Vocabulary())
    out_dir.mkdir(parents=True, exist_ok=True)
    for ann in annotations:
        wav = dsp.read_wav(corpus_dir / ann.source)
        fm = dsp.extract_features(wav, cfg)
        dsp.write_feature_file(data.feature_path(out_dir, ann.clip_id), fm)
    data.save_annotations(out_dir / "annotations.jsonl", annotations)
    return annotations


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """8 clips of 2 s audio with features at 32 mel bins (T=100)."""
    root = tmp_path_factory.mktemp("tiny_corpus")
    corpus = root / "corpus"
    feats = root / "feats"
    data.synth_corpus(corpus, n_clips=8, seed=1234, clip_seconds=2.0)
    annotations = extract_corpus_features(corpus, feats)
    return {"corpus": corpus, "feats": feats, "annotations": annotations}


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


_ACCEPTANCE_LINES = []


def record_criterion(number, label, ok):
    _ACCEPTANCE_LINES.append((number, label, ok))


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for number, label, ok in sorted(_ACCEPTANCE_LINES):
            status = "PASS" if ok else "FAIL"
            terminalreporter.write_line(f"criterion {number}: {status} - {label}")
