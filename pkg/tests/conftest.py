from __future__ import annotations

import sys

import pytest

from mlatr.corpus import TARGET_LANGUAGES, AudioRef, CaptionRecord, DatasetManifest, TranslationTable


def make_manifest(n_audio: int, n_caps: int = 1, split: str = "train", prefix: str = "clip") -> DatasetManifest:
    audio = [AudioRef(f"{prefix}{i:04d}", f"{prefix}{i:04d}.wav", 10.0, 16000) for i in range(n_audio)]
    caps = [
        CaptionRecord(f"{prefix}{i:04d}", f"caption {j} for sound {i}")
        for i in range(n_audio)
        for j in range(n_caps)
    ]
    return DatasetManifest(split=split, audio=tuple(audio), captions=tuple(caps), name=f"{prefix}-{split}")


def full_table(manifest: DatasetManifest, languages=TARGET_LANGUAGES) -> TranslationTable:
    entries = {}
    for a in manifest.audio_ids:
        for lang in languages:
            entries[(a, lang)] = CaptionRecord(a, f"{lang} text for {a}", lang, is_translation=True)
    return TranslationTable(entries)


@pytest.fixture
def manifest_factory():
    return make_manifest


@pytest.fixture
def table_factory():
    return full_table


def orthogonal_problem(n: int = 64, prefix: str = "clip"):
    """``n`` clips whose patches are all one basis vector, captioned by a unique token.

    Patch dropout cannot change a clip's pooled value, so the problem is
    separable and unaffected by masking.
    """
    import numpy as np

    from mlatr.features import PatchGrid

    base = make_manifest(n, prefix=prefix)
    caps = tuple(CaptionRecord(a, f"token{i}") for i, a in enumerate(base.audio_ids))
    manifest = DatasetManifest("train", base.audio, caps, f"{prefix}-orthogonal")
    basis = np.eye(256)
    grids = {a: PatchGrid(np.tile(basis[i % 256], (4, 62, 1)), np.ones((4, 62), bool)) for i, a in enumerate(manifest.audio_ids)}
    return manifest, grids


def toy_report(languages=("eng",), dataset="toy-test"):
    """Fixed, hand-picked metrics for report rendering tests."""
    from mlatr.evaluate import Metrics, RetrievalReport

    blocks = {}
    for i, lang in enumerate(languages):
        blocks[("audio_to_text", lang)] = Metrics(0.25 + 0.01 * i, 0.5, 0.75, 0.375, 4)
        blocks[("text_to_audio", lang)] = Metrics(0.125, 0.5 - 0.01 * i, 0.875, 0.3125, 8)
    return RetrievalReport(blocks, dataset, "0123abcd")


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.RESULTS:
        terminalreporter.write_line(line)
