from __future__ import annotations

import json
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_manifest, toy_report
from mlatr.corpus import LANGUAGES, CaptionRecord
from mlatr.encoders import ToyAudioEncoder, ToyTextEncoder
from mlatr.errors import EmptyRelevance, MissingLanguageFile, UnsupportedFormat, ValidationError
from mlatr.evaluate import (
    Metrics,
    RelevanceMap,
    RetrievalReport,
    emit_report,
    evaluate_split,
    format_table,
    map_at_10,
    parse_csv,
    plot_report,
    rank_positions,
    recall_at_k,
    score_metrics,
)
from mlatr.features import PatchGrid
from mlatr.retrieval_core import ProjectionHead
from oracles import map10_bruteforce, ranks_bruteforce, recall_bruteforce

GOLDEN = Path(__file__).parent / "golden"


def _singletons(n):
    return [{i} for i in range(n)]


def test_identity_scores_give_perfect_recall():
    s = np.eye(6) + 0.01
    assert recall_at_k(s, _singletons(6), 1) == 1.0
    assert map_at_10(s, _singletons(6)) == 1.0


def test_reversed_ranking():
    s = np.tile(np.arange(10, 0, -1, dtype=float), (10, 1))
    rel = [{9}] * 10  # relevant item always scored lowest
    assert recall_at_k(s, rel, 5) == 0.0
    assert recall_at_k(s, rel, 10) == 1.0


def test_ap_examples():
    row = np.arange(20, 0, -1, dtype=float)[None, :]  # rank r holds item r-1
    assert map_at_10(row, [{0}]) == 1.0
    assert map_at_10(row, [{3}]) == 0.25
    assert map_at_10(row, [{0, 1, 2, 10, 11}]) == pytest.approx(0.6, abs=1e-15)
    assert map_at_10(row, [{0, 1, 2, 10, 11}], norm="k") == pytest.approx(0.3, abs=1e-15)


def test_singleton_ap_is_reciprocal_rank():
    rng = np.random.default_rng(0)
    s = rng.normal(size=(12, 15))
    rel = [{int(rng.integers(15))} for _ in range(12)]
    ranks = rank_positions(s)
    expected = np.mean([1 / ranks[q, j] if ranks[q, j] <= 10 else 0 for q, (j,) in enumerate(rel)])
    assert map_at_10(s, rel) == pytest.approx(expected, rel=1e-14)


def test_ties_break_by_lower_index():
    s = np.zeros((1, 5))
    np.testing.assert_array_equal(rank_positions(s)[0], [1, 2, 3, 4, 5])
    assert recall_at_k(s, [{0}], 1) == 1.0
    assert recall_at_k(s, [{4}], 4) == 0.0


def test_errors():
    with pytest.raises(EmptyRelevance):
        recall_at_k(np.eye(2), [{0}, set()], 1)
    with pytest.raises(ValidationError):
        recall_at_k(np.eye(2), _singletons(2), 0)
    with pytest.raises(ValidationError):
        map_at_10(np.eye(2), _singletons(2), norm="weird")


def _instance(seed):
    rng = np.random.default_rng(seed)
    kind = seed % 3
    if kind == 0:  # random singleton relevance
        n = int(rng.integers(2, 33))
        s = rng.normal(size=(n, n))
        rel = [{int(rng.integers(n))} for _ in range(n)]
    elif kind == 1:  # audio queries with five captions each
        n_audio = int(rng.integers(1, 7))
        s = rng.normal(size=(n_audio, 5 * n_audio))
        rel = [set(range(5 * i, 5 * i + 5)) for i in range(n_audio)]
    else:  # heavy ties from coarse quantisation
        n = int(rng.integers(2, 33))
        s = rng.integers(0, 3, size=(n, n)).astype(float)
        rel = [set(map(int, rng.choice(n, size=int(rng.integers(1, min(n, 5) + 1)), replace=False))) for _ in range(n)]
    return s, rel


def test_oracle_equality_1000_trials():
    for seed in range(1000):
        s, rel = _instance(seed)
        for k in (1, 5, 10):
            assert recall_at_k(s, rel, k) == recall_bruteforce(s, rel, k)
        assert map_at_10(s, rel) == map10_bruteforce(s, rel)
        assert map_at_10(s, rel, norm="k") == map10_bruteforce(s, rel, norm="k")


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_rank_positions_match_oracle(seed):
    s, _ = _instance(seed)
    ranks = rank_positions(s)
    for q in range(s.shape[0]):
        assert list(ranks[q]) == ranks_bruteforce(list(s[q]))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 20))
    s = rng.normal(size=(n, n))  # continuous scores: no ties
    rel = [set(map(int, rng.choice(n, size=int(rng.integers(1, min(n, 3) + 1)), replace=False))) for _ in range(n)]
    perm = rng.permutation(n)
    inv = np.argsort(perm)
    s2 = s[:, perm]
    rel2 = [{int(inv[j]) for j in r} for r in rel]
    assert score_metrics(s, rel) == score_metrics(s2, rel2)


def test_perfect_model_bound():
    n_audio = 5
    s = np.zeros((n_audio, 5 * n_audio))
    rel = []
    for i in range(n_audio):
        s[i, 5 * i : 5 * i + 5] = 1.0
        rel.append(set(range(5 * i, 5 * i + 5)))
    m = score_metrics(s, rel)
    assert (m.r1, m.r5, m.r10, m.map10) == (1.0, 1.0, 1.0, 1.0)


def test_relevance_map_is_consistent():
    caps = [CaptionRecord("a", "x"), CaptionRecord("a", "y"), CaptionRecord("b", "z")]
    rel = RelevanceMap.from_captions(["a", "b"], caps)
    for audio, keys in rel.a2t.items():
        for k in keys:
            assert audio in rel.t2a[k]
    assert [sorted(x) for x in rel.indices("audio_to_text")] == [[0, 1], [2]]
    assert [sorted(x) for x in rel.indices("text_to_audio")] == [[0], [0], [1]]
    with pytest.raises(ValidationError):
        RelevanceMap(("a",), ("k",), ("zzz",))


def test_metrics_invariants():
    with pytest.raises(ValidationError):
        Metrics(0.5, 0.4, 0.6, 0.1, 3)
    with pytest.raises(ValidationError):
        Metrics(0.1, 0.2, 1.2, 0.1, 3)


# ---------------------------------------------------------------- split evaluation


def _split(n_audio=4):
    manifest = make_manifest(n_audio, n_caps=2, split="test")
    grids = {a: PatchGrid(np.tile(np.eye(256)[i], (4, 62, 1)), np.ones((4, 62), bool)) for i, a in enumerate(manifest.audio_ids)}
    return manifest, grids


class _Lookup:
    """Text encoder mapping a caption to the one-hot of its audio index."""

    concurrent_safe = True

    def __init__(self, ids, dim=256):
        from mlatr.encoders import TextEncoderSpec

        self.index = {a: i for i, a in enumerate(ids)}
        self.spec = TextEncoderSpec("lookup", dim)

    def forward(self, caps):
        return np.stack([np.eye(self.spec.embed_dim)[self.index[c.audio_id]] for c in caps]), None

    def parameters(self):
        return {}


class _Identity:
    concurrent_safe = True

    def __init__(self):
        from mlatr.encoders import AudioEncoderSpec

        self.spec = AudioEncoderSpec("identity", 256)

    def forward(self, grids):
        return np.stack([g.patches[0, 0] for g in grids]), None

    def parameters(self):
        return {}


def test_perfect_split_evaluation():
    manifest, grids = _split(4)
    eye = ProjectionHead(np.eye(256), None, "audio"), ProjectionHead(np.eye(256), None, "text")
    rep = evaluate_split(manifest, {}, _Identity(), _Lookup(manifest.audio_ids), eye, ["eng"], grids.__getitem__)
    assert rep.languages == ["eng"]
    a2t, t2a = rep.get("audio_to_text", "eng"), rep.get("text_to_audio", "eng")
    assert (a2t.r1, a2t.map10, a2t.n) == (1.0, 1.0, 4)
    assert (t2a.r1, t2a.map10, t2a.n) == (1.0, 1.0, 8)


def test_languages_evaluated_independently():
    manifest, grids = _split(6)
    fra = [CaptionRecord(c.audio_id, f"chien {c.text}", "fra", True) for c in manifest.captions[::2]]
    audio, text = ToyAudioEncoder(16), ToyTextEncoder(16)
    heads = ProjectionHead.init("audio", 16, 8, 0), ProjectionHead.init("text", 16, 8, 0)
    rep = evaluate_split(manifest, {"fra": fra}, audio, text, heads, ["eng", "fra"], grids.__getitem__)
    assert rep.languages == ["eng", "fra"]
    assert rep.get("text_to_audio", "fra").n == 6
    only_fra = evaluate_split(manifest, {"fra": fra}, audio, text, heads, ["fra"], grids.__getitem__)
    assert only_fra.get("audio_to_text", "fra") == rep.get("audio_to_text", "fra")
    # independent per-language oracle
    a = np.stack([audio.forward([grids[x]])[0][0] for x in manifest.audio_ids]) @ heads[0].weight.T
    t = np.stack([text.embed_text(f"fra: {c.text}") for c in fra]) @ heads[1].weight.T
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    t /= np.linalg.norm(t, axis=1, keepdims=True)
    s = a @ t.T
    idx = {x: i for i, x in enumerate(manifest.audio_ids)}
    rel = [{idx[c.audio_id]} for c in fra]
    assert rep.get("text_to_audio", "fra").r1 == recall_bruteforce(s.T, rel, 1)
    assert rep.get("text_to_audio", "fra").map10 == pytest.approx(map10_bruteforce(s.T, rel), abs=1e-15)


def test_missing_language_file():
    manifest, grids = _split(2)
    heads = ProjectionHead.init("audio", 16, 8, 0), ProjectionHead.init("text", 16, 8, 0)
    with pytest.raises(MissingLanguageFile):
        evaluate_split(manifest, {}, ToyAudioEncoder(16), ToyTextEncoder(16), heads, ["eng", "deu"], grids.__getitem__)


def test_evaluation_is_repeatable_and_parallel_safe():
    manifest, grids = _split(8)
    heads = ProjectionHead.init("audio", 16, 8, 0), ProjectionHead.init("text", 16, 8, 0)
    args = (manifest, {}, ToyAudioEncoder(16), ToyTextEncoder(16), heads, ["eng"], grids.__getitem__)
    assert evaluate_split(*args) == evaluate_split(*args, jobs=4)


# ---------------------------------------------------------------- reports


def test_table_golden():
    assert format_table(toy_report()) == (GOLDEN / "table_eng.txt").read_text()
    two = {"AudioCaps": toy_report(("eng", "fra"), "AudioCaps"), "Clotho": toy_report(("eng", "fra"), "Clotho")}
    assert format_table(two) == (GOLDEN / "table_two_datasets.txt").read_text()


def test_table_shape_for_single_language():
    rows = format_table(toy_report()).splitlines()
    assert len(rows) == 5  # three header lines, one language row, hash footer
    assert rows[4] == "config_hash 0123abcd"
    cells = rows[3].split()
    assert cells[0] == "eng" and cells[1:] == ["25.0", "50.0", "75.0", "37.5", "12.5", "50.0", "87.5", "31.2"]


def test_csv_and_json_golden_and_round_trip(tmp_path):
    rep = toy_report(("eng", "fra"))
    csv_path = emit_report(rep, "csv", tmp_path / "r.csv")
    assert csv_path.read_text() == (GOLDEN / "report.csv").read_text()
    assert parse_csv(csv_path.read_text()) == {"toy-test": rep}
    json_path = emit_report(rep, "json", tmp_path / "r.json")
    assert json_path.read_text() == (GOLDEN / "report.json").read_text()
    obj = json.loads(json_path.read_text())
    assert set(obj["audio_to_text"]["fra"]) == {"r1", "r5", "r10", "map10", "n"}
    assert RetrievalReport.from_json(obj) == rep


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(*[st.floats(0, 1) for _ in range(4)], st.integers(1, 500)), min_size=1, max_size=8))
def test_csv_round_trip_property(values):
    blocks = {}
    for lang, (a, b, c, m, n) in zip(LANGUAGES, values):
        r1, r5, r10 = sorted((a, b, c))
        blocks[("audio_to_text", lang)] = Metrics(r1, r5, r10, m, n)
        blocks[("text_to_audio", lang)] = Metrics(r1, r5, r10, m, n + 1)
    rep = RetrievalReport(blocks, "prop", "h")
    assert parse_csv(emit_report(rep, "csv")) == {"prop": rep}


def test_plot_shape(tmp_path):
    rep = toy_report(LANGUAGES)
    fig = plot_report(rep)
    ax = fig.axes[0]
    assert [t.get_text() for t in ax.get_xticklabels()] == list(LANGUAGES)
    assert len(ax.containers) == 2 and all(len(c) == 8 for c in ax.containers)
    out = emit_report(rep, "plot", tmp_path / "fig.svg")
    ET.parse(out)  # well-formed SVG
    again = emit_report(rep, "plot", tmp_path / "fig2.svg")
    assert out.read_bytes() == again.read_bytes()


def test_plot_compares_reports_per_direction():
    reports = {"baseline": toy_report(LANGUAGES, "baseline"), "mixture LE": toy_report(LANGUAGES, "mixture")}
    fig = plot_report(reports)
    assert len(fig.axes) == 2
    assert all(len(ax.containers) == 2 for ax in fig.axes)


def test_unsupported_format():
    with pytest.raises(UnsupportedFormat):
        emit_report(toy_report(), "xlsx")
