"""Retrieval metrics (R@k, mAP@10) and split-level evaluation across languages."""

from __future__ import annotations

import json
from collections.abc import Collection, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mlatr.augment import annotate_prompt
from mlatr.corpus import ENGLISH, CaptionRecord, DatasetManifest, canonical_language
from mlatr.encoders import encode_audio, encode_text
from mlatr.errors import EmptyRelevance, MissingLanguageFile, UnsupportedFormat, ValidationError
from mlatr.features import patch_dropout
from mlatr.retrieval_core import ProjectionHead, project, similarity_matrix

DIRECTIONS = ("audio_to_text", "text_to_audio")
AP_NORMS = ("min", "k")
RECALL_KS = (1, 5, 10)


@dataclass(frozen=True)
class RelevanceMap:
    """Audio gallery/queries and caption gallery/queries with their links.

    Caption ``j`` belongs to audio ``caption_audio[j]``.
    """

    audio_ids: tuple[str, ...]
    caption_keys: tuple[str, ...]
    caption_audio: tuple[str, ...]
    a2t: dict[str, frozenset[str]] = field(init=False, repr=False)
    t2a: dict[str, frozenset[str]] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if len(self.caption_keys) != len(self.caption_audio):
            raise ValidationError("caption keys and owners differ in length")
        known = set(self.audio_ids)
        a2t: dict[str, set[str]] = {a: set() for a in self.audio_ids}
        for key, owner in zip(self.caption_keys, self.caption_audio):
            if owner not in known:
                raise ValidationError(f"caption {key!r} points at unknown audio {owner!r}")
            a2t[owner].add(key)
        object.__setattr__(self, "a2t", {a: frozenset(s) for a, s in a2t.items()})
        object.__setattr__(self, "t2a", {k: frozenset({o}) for k, o in zip(self.caption_keys, self.caption_audio)})

    @classmethod
    def from_captions(cls, audio_ids: Sequence[str], captions: Sequence[CaptionRecord]) -> RelevanceMap:
        keys = tuple(f"{c.audio_id}#{c.language}#{i}" for i, c in enumerate(captions))
        return cls(tuple(audio_ids), keys, tuple(c.audio_id for c in captions))

    def indices(self, direction: str) -> list[frozenset[int]]:
        """Relevant gallery indices per query for ``direction``."""
        if direction == "audio_to_text":
            pos = {k: j for j, k in enumerate(self.caption_keys)}
            return [frozenset(pos[k] for k in self.a2t[a]) for a in self.audio_ids]
        if direction == "text_to_audio":
            pos = {a: i for i, a in enumerate(self.audio_ids)}
            return [frozenset(pos[a] for a in self.t2a[k]) for k in self.caption_keys]
        raise ValidationError(f"unknown direction {direction!r}")


def _relevant(rel, direction, n_queries) -> list[Collection[int]]:
    if isinstance(rel, RelevanceMap):
        if direction is None:
            raise ValidationError("direction is required with a RelevanceMap")
        rel = rel.indices(direction)
    rel = list(rel)
    if len(rel) != n_queries:
        raise ValidationError(f"{len(rel)} relevance sets for {n_queries} queries")
    for q, items in enumerate(rel):
        if not items:
            raise EmptyRelevance(f"query {q} has no relevant item")
    return rel


def rank_positions(scores: np.ndarray) -> np.ndarray:
    """1-based rank of each gallery item per query row.

    Higher score ranks first; ties go to the lower gallery index.
    """
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, axis=1, kind="stable")
    ranks = np.empty_like(order)
    rows = np.arange(scores.shape[0])[:, None]
    ranks[rows, order] = np.arange(1, scores.shape[1] + 1)[None, :]
    return ranks


def recall_at_k(scores, rel, k: int, direction: str | None = None) -> float:
    """Fraction of queries with any relevant item in the top ``k``."""
    if k < 1:
        raise ValidationError("k must be >= 1")
    scores = np.asarray(scores, dtype=np.float64)
    relevant = _relevant(rel, direction, scores.shape[0])
    ranks = rank_positions(scores)
    hits = [min(ranks[q, j] for j in items) <= k for q, items in enumerate(relevant)]
    return float(np.mean(hits))


def average_precision_at_10(ranks_of_relevant: Sequence[int], n_relevant: int, norm: str = "min") -> float:
    found = 0
    total = 0.0
    for r in sorted(ranks_of_relevant):
        if r > 10:
            break
        found += 1
        total += found / r
    return total / (min(n_relevant, 10) if norm == "min" else 10)


def map_at_10(scores, rel, direction: str | None = None, norm: str = "min") -> float:
    """Mean AP@10; ``norm="min"`` divides by ``min(|relevant|, 10)``, ``norm="k"`` by 10."""
    if norm not in AP_NORMS:
        raise ValidationError(f"unknown AP normaliser {norm!r}")
    scores = np.asarray(scores, dtype=np.float64)
    relevant = _relevant(rel, direction, scores.shape[0])
    ranks = rank_positions(scores)
    aps = [average_precision_at_10([ranks[q, j] for j in items], len(items), norm) for q, items in enumerate(relevant)]
    return sum(aps) / len(aps)


@dataclass(frozen=True)
class Metrics:
    r1: float
    r5: float
    r10: float
    map10: float
    n: int

    def __post_init__(self) -> None:
        for name in ("r1", "r5", "r10", "map10"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name}={v} outside [0, 1]")
        if not self.r1 <= self.r5 <= self.r10:
            raise ValidationError("recall must be non-decreasing in k")

    def as_dict(self) -> dict:
        return {"r1": self.r1, "r5": self.r5, "r10": self.r10, "map10": self.map10, "n": self.n}


def score_metrics(scores, relevant, ap_norm: str = "min") -> Metrics:
    scores = np.asarray(scores, dtype=np.float64)
    relevant = _relevant(relevant, None, scores.shape[0])
    ranks = rank_positions(scores)
    best = np.array([min(ranks[q, j] for j in items) for q, items in enumerate(relevant)])
    aps = [average_precision_at_10([ranks[q, j] for j in items], len(items), ap_norm) for q, items in enumerate(relevant)]
    return Metrics(
        r1=float(np.mean(best <= 1)),
        r5=float(np.mean(best <= 5)),
        r10=float(np.mean(best <= 10)),
        map10=sum(aps) / len(aps),
        n=len(relevant),
    )


@dataclass(frozen=True)
class RetrievalReport:
    """Metrics keyed by ``(direction, language)``."""

    blocks: Mapping[tuple[str, str], Metrics]
    dataset: str = ""
    config_hash: str = ""

    def __post_init__(self) -> None:
        for direction, lang in self.blocks:
            if direction not in DIRECTIONS:
                raise ValidationError(f"unknown direction {direction!r}")
            canonical_language(lang)
        # deterministic key order: direction, then language as first inserted
        langs = self.languages
        ordered = {(d, lang): self.blocks[(d, lang)] for d in DIRECTIONS for lang in langs if (d, lang) in self.blocks}
        object.__setattr__(self, "blocks", ordered)

    @property
    def languages(self) -> list[str]:
        seen: list[str] = []
        for _, lang in self.blocks:
            if lang not in seen:
                seen.append(lang)
        return seen

    def get(self, direction: str, language: str) -> Metrics:
        return self.blocks[(direction, language)]

    def to_json(self) -> dict:
        out: dict = {d: {} for d in DIRECTIONS}
        for (d, lang), m in self.blocks.items():
            out[d][lang] = m.as_dict()
        out["meta"] = {"dataset": self.dataset, "config_hash": self.config_hash}
        return out

    @classmethod
    def from_json(cls, obj: Mapping) -> RetrievalReport:
        blocks = {}
        for d in DIRECTIONS:
            for lang, m in obj.get(d, {}).items():
                blocks[(d, lang)] = Metrics(m["r1"], m["r5"], m["r10"], m["map10"], int(m["n"]))
        meta = obj.get("meta", {})
        return cls(blocks, meta.get("dataset", ""), meta.get("config_hash", ""))


def _encode_split_audio(manifest, clip_loader, audio_encoder, audio_head, jobs):
    grids = [patch_dropout(clip_loader(a), 0.0, 0, training=False) for a in manifest.audio_ids]
    emb = encode_audio(audio_encoder, grids, manifest.audio_ids, jobs=jobs)
    return project(audio_head, emb.vectors)


def evaluate_split(
    manifest: DatasetManifest,
    captions_by_language: Mapping[str, Sequence[CaptionRecord]],
    audio_encoder,
    text_encoder,
    heads: tuple[ProjectionHead, ProjectionHead],
    languages: Sequence[str],
    clip_loader,
    *,
    prompt_style: str = "prefix_tag",
    ap_norm: str = "min",
    jobs: int = 1,
    config_hash: str = "",
) -> RetrievalReport:
    """Score every requested language against all audio of the split.

    English captions come from the manifest unless supplied explicitly.
    Audio clips without a caption in some language are not used as
    audio-to-text queries for that language but stay in the gallery.
    """
    audio_head, text_head = heads
    languages = [canonical_language(lang) for lang in languages]
    caps_by_lang = dict(captions_by_language)
    if ENGLISH in languages and ENGLISH not in caps_by_lang:
        caps_by_lang[ENGLISH] = [c for c in manifest.captions if c.language == ENGLISH]
    missing = [lang for lang in languages if lang not in caps_by_lang]
    if missing:
        raise MissingLanguageFile(f"no test captions for: {', '.join(missing)}")

    a = _encode_split_audio(manifest, clip_loader, audio_encoder, audio_head, jobs)

    def one(lang: str):
        caps = list(caps_by_lang[lang])
        if not caps:
            raise MissingLanguageFile(f"empty caption set for {lang}")
        texts = [annotate_prompt(c, prompt_style) for c in caps]
        t = project(text_head, encode_text(text_encoder, texts, jobs=1).vectors)
        s = similarity_matrix(a, t)
        rel = RelevanceMap.from_captions(manifest.audio_ids, caps)
        a2t_rel = rel.indices("audio_to_text")
        queries = [i for i, items in enumerate(a2t_rel) if items]
        a2t = score_metrics(s[queries], [a2t_rel[i] for i in queries], ap_norm)
        t2a = score_metrics(s.T, rel.indices("text_to_audio"), ap_norm)
        return lang, a2t, t2a

    if jobs > 1 and getattr(text_encoder, "concurrent_safe", False):
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(one, languages))
    else:
        results = [one(lang) for lang in languages]
    blocks = {}
    for lang, a2t, t2a in results:
        blocks[("audio_to_text", lang)] = a2t
        blocks[("text_to_audio", lang)] = t2a
    return RetrievalReport(blocks, dataset=manifest.name, config_hash=config_hash)


# ---------------------------------------------------------------- reports

REPORT_FORMATS = ("table", "csv", "json", "plot")
CSV_COLUMNS = ("dataset", "config_hash", "direction", "language", "r1", "r5", "r10", "map10", "n")
_METRIC_LABELS = (("r1", "R@1"), ("r5", "R@5"), ("r10", "R@10"), ("map10", "mAP10"))
_DIRECTION_LABELS = {"audio_to_text": "Audio->Text", "text_to_audio": "Text->Audio"}


def _as_reports(reports) -> dict[str, RetrievalReport]:
    if isinstance(reports, RetrievalReport):
        return {reports.dataset or "dataset": reports}
    return dict(reports)


def _all_languages(reports: Mapping[str, RetrievalReport]) -> list[str]:
    langs: list[str] = []
    for rep in reports.values():
        for lang in rep.languages:
            if lang not in langs:
                langs.append(lang)
    return langs


def format_table(reports) -> str:
    """Rows are languages; columns are dataset, then direction, then R@1/R@5/R@10/mAP10 in percent."""
    reports = _as_reports(reports)
    cell, label_w = 6, 10
    block = cell * len(_METRIC_LABELS)
    columns = [(name, d) for name, rep in reports.items() for d in DIRECTIONS if any(k[0] == d for k in rep.blocks)]
    line1, line2, line3 = ["dataset".ljust(label_w)], ["direction".ljust(label_w)], ["language".ljust(label_w)]
    last = None
    for name, d in columns:
        line1.append((name if name != last else "").ljust(block)[:block])
        last = name
        line2.append(_DIRECTION_LABELS[d].ljust(block))
        line3.append("".join(label.rjust(cell) for _, label in _METRIC_LABELS))
    rows = [" ".join(line1).rstrip(), " ".join(line2).rstrip(), " ".join(line3)]
    for lang in _all_languages(reports):
        cells = [lang.ljust(label_w)]
        for name, d in columns:
            m = reports[name].blocks.get((d, lang))
            if m is None:
                cells.append("".join("-".rjust(cell) for _ in _METRIC_LABELS))
            else:
                cells.append("".join(f"{100 * getattr(m, key):.1f}".rjust(cell) for key, _ in _METRIC_LABELS))
        rows.append(" ".join(cells))
    hashes = sorted({rep.config_hash for rep in reports.values() if rep.config_hash})
    if hashes:
        rows.append(f"config_hash {', '.join(hashes)}")
    return "\n".join(rows) + "\n"


def format_csv(reports) -> str:
    reports = _as_reports(reports)
    lines = [",".join(CSV_COLUMNS)]
    for name, rep in reports.items():
        for (d, lang), m in rep.blocks.items():
            lines.append(f"{name},{rep.config_hash},{d},{lang},{m.r1!r},{m.r5!r},{m.r10!r},{m.map10!r},{m.n}")
    return "\n".join(lines) + "\n"


def parse_csv(text: str) -> dict[str, RetrievalReport]:
    rows = [line.split(",") for line in text.splitlines() if line]
    if not rows or tuple(rows[0]) != CSV_COLUMNS:
        raise ValidationError("not a retrieval report CSV")
    blocks: dict[str, dict] = {}
    hashes: dict[str, str] = {}
    for row in rows[1:]:
        rec = dict(zip(CSV_COLUMNS, row))
        hashes[rec["dataset"]] = rec["config_hash"]
        m = Metrics(float(rec["r1"]), float(rec["r5"]), float(rec["r10"]), float(rec["map10"]), int(rec["n"]))
        blocks.setdefault(rec["dataset"], {})[(rec["direction"], rec["language"])] = m
    return {name: RetrievalReport(b, name, hashes[name]) for name, b in blocks.items()}


def format_json(reports) -> str:
    reports = _as_reports(reports)
    if len(reports) == 1:
        obj = next(iter(reports.values())).to_json()
    else:
        obj = {name: rep.to_json() for name, rep in reports.items()}
    return json.dumps(obj, indent=2, sort_keys=False) + "\n"


def plot_report(reports, metric: str = "r1"):
    """Grouped bars per language.

    A single report gives one panel with the two directions as series; several
    reports give one panel per direction with one series per report.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    reports = _as_reports(reports)
    langs = _all_languages(reports)
    x = np.arange(len(langs))
    label = dict(_METRIC_LABELS)[metric]
    if len(reports) == 1:
        rep = next(iter(reports.values()))
        fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * len(langs) + 1.5), 3.2))
        panels = [(ax, rep.dataset, [(_DIRECTION_LABELS[d], d, rep) for d in DIRECTIONS])]
    else:
        fig, axes = plt.subplots(1, 2, figsize=(max(6.0, 1.6 * len(langs) + 2), 3.2), sharey=True)
        panels = [(ax, _DIRECTION_LABELS[d], [(name, d, rep) for name, rep in reports.items()]) for ax, d in zip(axes, DIRECTIONS)]
    for ax, title, series in panels:
        width = 0.8 / len(series)
        for i, (name, d, rep) in enumerate(series):
            values = [100 * getattr(rep.blocks[(d, lang)], metric) if (d, lang) in rep.blocks else 0.0 for lang in langs]
            ax.bar(x + (i - (len(series) - 1) / 2) * width, values, width, label=name)
        ax.set_xticks(x)
        ax.set_xticklabels(langs)
        ax.set_xlabel("target language")
        ax.set_title(title)
        ax.set_ylim(0, 100)
        ax.legend(fontsize="small")
    panels[0][0].set_ylabel(f"{label} (%)")
    fig.tight_layout()
    return fig


def emit_report(reports, fmt: str, out: str | Path | None = None, metric: str = "r1") -> Path | str:
    """Render ``reports`` as ``fmt``; writes to ``out`` when given and returns the path, else the text."""
    if fmt not in REPORT_FORMATS:
        raise UnsupportedFormat(f"unknown report format {fmt!r}; expected one of {', '.join(REPORT_FORMATS)}")
    if fmt == "plot":
        if out is None:
            raise ValidationError("plot output needs a file path")
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        out = Path(out)
        fig = plot_report(reports, metric)
        with matplotlib.rc_context({"svg.hashsalt": "mlatr", "svg.fonttype": "path"}):
            if out.suffix == ".png":
                fig.savefig(out, dpi=120, metadata={"Software": None})
            else:
                fig.savefig(out, format="svg", metadata={"Date": None, "Creator": None})
        plt.close(fig)
        return out
    text = {"table": format_table, "csv": format_csv, "json": format_json}[fmt](reports)
    if out is None:
        return text
    Path(out).write_text(text, encoding="utf-8")
    return Path(out)
