"""Audio-caption manifests and multilingual translation tables."""

from __future__ import annotations

import json
import logging
import unicodedata
from collections.abc import Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

from mlatr.errors import (
    DanglingCaption,
    DuplicateAudioId,
    MalformedRecord,
    TranslatorFailure,
    UncaptionedAudio,
    UnknownLanguage,
    ValidationError,
)
from mlatr.seeding import rng_for

log = logging.getLogger(__name__)

ENGLISH = "eng"
LANGUAGES: tuple[str, ...] = ("eng", "fra", "deu", "spa", "nld", "cat", "jpn", "zho")
TARGET_LANGUAGES: tuple[str, ...] = LANGUAGES[1:]
LANGUAGE_ALIASES = {"fre": "fra"}

Split = Literal["train", "valid", "test"]
SPLITS = ("train", "valid", "test")


def canonical_language(code: str) -> str:
    """Validate a 3-letter code, mapping aliases (``fre`` -> ``fra``)."""
    if not isinstance(code, str):
        raise UnknownLanguage(f"language code must be a string, got {code!r}")
    norm = code.strip().lower()
    norm = LANGUAGE_ALIASES.get(norm, norm)
    if norm not in LANGUAGES:
        raise UnknownLanguage(f"unknown language code {code!r}; expected one of {', '.join(LANGUAGES)}")
    return norm


def parse_languages(spec: str | Iterable[str]) -> list[str]:
    """``"eng,fra"`` or an iterable of codes -> canonical list, order kept, duplicates dropped."""
    items = spec.split(",") if isinstance(spec, str) else list(spec)
    out: list[str] = []
    for item in items:
        if isinstance(item, str) and not item.strip():
            continue
        code = canonical_language(item)
        if code not in out:
            out.append(code)
    return out


def nfc(text: str) -> str:
    return unicodedata.normalize("NFC", text)


@dataclass(frozen=True)
class CaptionRecord:
    audio_id: str
    text: str
    language: str = ENGLISH
    is_translation: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "language", canonical_language(self.language))
        if not isinstance(self.text, str) or not self.text.strip():
            raise ValidationError(f"empty caption text for audio {self.audio_id!r}")
        object.__setattr__(self, "text", nfc(self.text))
        if not self.is_translation and self.language != ENGLISH:
            raise ValidationError(
                f"source caption for {self.audio_id!r} has language {self.language}; "
                "only translated captions may be non-English"
            )


@dataclass(frozen=True)
class AudioRef:
    audio_id: str
    uri: str
    duration_s: float
    sample_rate_hz: int

    def __post_init__(self) -> None:
        if not self.duration_s > 0:
            raise ValidationError(f"audio {self.audio_id!r}: duration_s must be > 0")
        if not self.sample_rate_hz > 0:
            raise ValidationError(f"audio {self.audio_id!r}: sample_rate_hz must be > 0")


@dataclass(frozen=True)
class DatasetManifest:
    split: str
    audio: tuple[AudioRef, ...]
    captions: tuple[CaptionRecord, ...]
    name: str = ""
    root: Path | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if self.split not in SPLITS:
            raise ValidationError(f"unknown split {self.split!r}")
        object.__setattr__(self, "audio", tuple(self.audio))
        object.__setattr__(self, "captions", tuple(self.captions))
        seen: set[str] = set()
        for ref in self.audio:
            if ref.audio_id in seen:
                raise DuplicateAudioId(f"duplicate audio_id {ref.audio_id!r}")
            seen.add(ref.audio_id)
        captioned: set[str] = set()
        for cap in self.captions:
            if cap.audio_id not in seen:
                raise DanglingCaption(f"caption references unknown audio_id {cap.audio_id!r}")
            captioned.add(cap.audio_id)
        bare = [ref.audio_id for ref in self.audio if ref.audio_id not in captioned]
        if bare:
            raise UncaptionedAudio(f"audio without captions: {', '.join(bare[:10])}")

    @property
    def audio_ids(self) -> list[str]:
        return [ref.audio_id for ref in self.audio]

    def audio_by_id(self) -> dict[str, AudioRef]:
        return {ref.audio_id: ref for ref in self.audio}

    def captions_by_audio(self, language: str | None = ENGLISH) -> dict[str, list[CaptionRecord]]:
        out: dict[str, list[CaptionRecord]] = {ref.audio_id: [] for ref in self.audio}
        for cap in self.captions:
            if language is None or cap.language == language:
                out[cap.audio_id].append(cap)
        return out

    def english_pairs(self) -> list[tuple[str, CaptionRecord]]:
        return [(c.audio_id, c) for c in self.captions if c.language == ENGLISH]

    def resolve_uri(self, ref: AudioRef) -> Path:
        path = Path(ref.uri).expanduser()
        if not path.is_absolute() and self.root is not None:
            path = self.root / path
        return path


def _dumps(obj: Mapping) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=True, separators=(",", ":"))


def _require(obj: Mapping, key: str, kind: type | tuple[type, ...], lineno: int, path: str):
    value = obj.get(key)
    if not isinstance(value, kind) or isinstance(value, bool):
        raise MalformedRecord(f"field {key!r} missing or of wrong type", lineno, path)
    return value


def _read_jsonl(path: Path) -> Iterable[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecord(f"invalid JSON ({exc.msg})", lineno, str(path)) from None
            if not isinstance(obj, dict):
                raise MalformedRecord("expected a JSON object", lineno, str(path))
            yield lineno, obj


def _parse_caption(obj: Mapping, lineno: int, path: str, language: str | None = None) -> CaptionRecord:
    audio_id = _require(obj, "audio_id", str, lineno, path)
    text = _require(obj, "text", str, lineno, path)
    lang = obj.get("language", ENGLISH if language is None else language)
    try:
        lang = canonical_language(lang)
        if language is not None and lang != language:
            raise MalformedRecord(f"caption language {lang} in a {language} file", lineno, path)
        return CaptionRecord(audio_id, text, lang, is_translation=lang != ENGLISH)
    except MalformedRecord:
        raise
    except ValidationError as exc:
        raise MalformedRecord(str(exc), lineno, path) from None


def load_manifest(path: str | Path, split: str, name: str | None = None) -> DatasetManifest:
    """Read a JSONL manifest of ``audio`` and ``caption`` lines.

    Source manifests carry English captions only; per-language test captions
    live in separate caption files (see :func:`load_caption_file`).
    """
    path = Path(path)
    spath = str(path)
    audio: list[AudioRef] = []
    captions: list[CaptionRecord] = []
    audio_line: dict[str, int] = {}
    caption_lines: list[int] = []
    for lineno, obj in _read_jsonl(path):
        kind = obj.get("kind")
        if kind == "audio":
            audio_id = _require(obj, "audio_id", str, lineno, spath)
            if audio_id in audio_line:
                raise DuplicateAudioId(
                    f"audio_id {audio_id!r} already defined on line {audio_line[audio_id]}", lineno, spath
                )
            audio_line[audio_id] = lineno
            try:
                audio.append(
                    AudioRef(
                        audio_id=audio_id,
                        uri=_require(obj, "uri", str, lineno, spath),
                        duration_s=float(_require(obj, "duration_s", (int, float), lineno, spath)),
                        sample_rate_hz=_require(obj, "sample_rate_hz", int, lineno, spath),
                    )
                )
            except MalformedRecord:
                raise
            except ValidationError as exc:
                raise MalformedRecord(str(exc), lineno, spath) from None
        elif kind == "caption":
            cap = _parse_caption(obj, lineno, spath)
            if cap.language != ENGLISH:
                raise MalformedRecord("manifest captions must be English", lineno, spath)
            captions.append(cap)
            caption_lines.append(lineno)
        else:
            raise MalformedRecord(f"unknown record kind {kind!r}", lineno, spath)
    for cap, lineno in zip(captions, caption_lines):
        if cap.audio_id not in audio_line:
            raise DanglingCaption(f"caption references unknown audio_id {cap.audio_id!r}", lineno, spath)
    return DatasetManifest(
        split=split,
        audio=tuple(audio),
        captions=tuple(captions),
        name=name or path.stem,
        root=path.parent,
    )


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    """Canonical form: audio lines then caption lines, sorted keys, NFC text."""
    lines = []
    for ref in manifest.audio:
        lines.append(
            _dumps(
                {
                    "kind": "audio",
                    "audio_id": ref.audio_id,
                    "uri": ref.uri,
                    "duration_s": float(ref.duration_s),
                    "sample_rate_hz": int(ref.sample_rate_hz),
                }
            )
        )
    for cap in manifest.captions:
        lines.append(_dumps({"kind": "caption", "audio_id": cap.audio_id, "text": cap.text, "language": cap.language}))
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def load_caption_file(path: str | Path, language: str, manifest: DatasetManifest | None = None) -> list[CaptionRecord]:
    """Per-language caption file: caption lines only (``kind`` optional)."""
    path = Path(path)
    language = canonical_language(language)
    known = set(manifest.audio_ids) if manifest is not None else None
    out = []
    for lineno, obj in _read_jsonl(path):
        if obj.get("kind", "caption") != "caption":
            raise MalformedRecord(f"unexpected record kind {obj.get('kind')!r}", lineno, str(path))
        cap = _parse_caption(obj, lineno, str(path), language)
        if known is not None and cap.audio_id not in known:
            raise DanglingCaption(f"caption references unknown audio_id {cap.audio_id!r}", lineno, str(path))
        out.append(cap)
    return out


def write_caption_file(captions: Iterable[CaptionRecord], path: str | Path, extra: Mapping | None = None) -> None:
    lines = []
    for cap in captions:
        obj = {"kind": "caption", "audio_id": cap.audio_id, "text": cap.text, "language": cap.language}
        if extra:
            obj.update(extra)
        lines.append(_dumps(obj) + "\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


@dataclass(frozen=True)
class TranslationTable:
    """One translated caption per (audio_id, language), never English."""

    entries: Mapping[tuple[str, str], CaptionRecord]
    sources: Mapping[tuple[str, str], str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        ordered = {}
        for key in sorted(self.entries):
            audio_id, lang = key
            cap = self.entries[key]
            if lang == ENGLISH or cap.language != lang or cap.audio_id != audio_id:
                raise ValidationError(f"inconsistent translation entry {key}")
            if not cap.is_translation:
                raise ValidationError(f"translation entry {key} not marked as translation")
            ordered[key] = cap
        object.__setattr__(self, "entries", ordered)
        object.__setattr__(self, "sources", {k: self.sources[k] for k in sorted(self.sources)})

    def __len__(self) -> int:
        return len(self.entries)

    def languages(self) -> list[str]:
        present = {lang for _, lang in self.entries}
        return [lang for lang in TARGET_LANGUAGES if lang in present]

    def keys_for(self, languages: Sequence[str]) -> list[tuple[str, str]]:
        wanted = set(languages)
        return [key for key in self.entries if key[1] in wanted]

    def missing(self, audio_ids: Iterable[str], languages: Iterable[str]) -> list[tuple[str, str]]:
        langs = list(languages)
        return [(a, lang) for a in audio_ids for lang in langs if (a, lang) not in self.entries]


def write_translation_table(table: TranslationTable, path: str | Path) -> None:
    lines = []
    for (audio_id, lang), cap in table.entries.items():
        lines.append(
            _dumps({"audio_id": audio_id, "language": lang, "text": cap.text, "source_text": table.sources.get((audio_id, lang), "")})
            + "\n"
        )
    Path(path).write_text("".join(lines), encoding="utf-8")


def load_translation_table(path: str | Path) -> TranslationTable:
    path = Path(path)
    entries: dict[tuple[str, str], CaptionRecord] = {}
    sources: dict[tuple[str, str], str] = {}
    for lineno, obj in _read_jsonl(path):
        audio_id = _require(obj, "audio_id", str, lineno, str(path))
        text = _require(obj, "text", str, lineno, str(path))
        try:
            lang = canonical_language(_require(obj, "language", str, lineno, str(path)))
            if lang == ENGLISH:
                raise ValidationError("translation tables cannot contain English entries")
            cap = CaptionRecord(audio_id, text, lang, is_translation=True)
        except ValidationError as exc:
            raise MalformedRecord(str(exc), lineno, str(path)) from None
        key = (audio_id, lang)
        if key in entries:
            raise MalformedRecord(f"duplicate translation for {key}", lineno, str(path))
        entries[key] = cap
        src = obj.get("source_text")
        if isinstance(src, str) and src:
            sources[key] = nfc(src)
    return TranslationTable(entries, sources)


def select_source_captions(
    manifest: DatasetManifest,
    languages: Sequence[str],
    seed: int,
    shared_selection: bool = False,
) -> dict[tuple[str, str], CaptionRecord]:
    """Pick one English caption per (audio, language), uniformly and reproducibly.

    Each choice is drawn from its own keyed stream, so the pick for one pair
    never depends on which other pairs are requested.  ``shared_selection``
    reuses one pick per audio for every language.
    """
    by_audio = manifest.captions_by_audio(ENGLISH)
    picks = {}
    for audio_id in manifest.audio_ids:
        pool = by_audio[audio_id]
        for lang in languages:
            stream = "shared" if shared_selection else lang
            idx = int(rng_for(seed, "select", audio_id, stream).integers(len(pool)))
            picks[(audio_id, lang)] = pool[idx]
    return picks


def build_translation_table(
    manifest: DatasetManifest,
    languages: Sequence[str],
    translator,
    seed: int,
    *,
    shared_selection: bool = False,
    allow_partial: bool = False,
    jobs: int = 1,
) -> TranslationTable:
    """Translate one randomly chosen English caption per audio into each language.

    Failures are collected per item.  Unless ``allow_partial`` is set, any
    failure raises :class:`TranslatorFailure` carrying the partial table.
    """
    from mlatr.translators import translate_batch

    if manifest.split != "train":
        raise ValidationError(f"translation tables are built from the train split, not {manifest.split!r}")
    languages = parse_languages(languages)
    if ENGLISH in languages:
        raise ValidationError("English is the source language; it cannot be a translation target")
    picks = select_source_captions(manifest, languages, seed, shared_selection)

    def run(lang: str):
        keys = [key for key in picks if key[1] == lang]
        items = [(picks[k].text, k[0]) for k in keys]
        return keys, translate_batch(translator, items, lang)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, languages))
    else:
        results = [run(lang) for lang in languages]

    entries: dict[tuple[str, str], CaptionRecord] = {}
    sources: dict[tuple[str, str], str] = {}
    failures: list[tuple[str, str, str]] = []
    for keys, outputs in results:
        for key, out in zip(keys, outputs):
            if isinstance(out, Exception):
                failures.append((key[0], key[1], str(out)))
                continue
            entries[key] = CaptionRecord(key[0], out, key[1], is_translation=True)
            sources[key] = picks[key].text
    failures.sort()
    table = TranslationTable(entries, sources)
    if failures:
        if not allow_partial:
            raise TranslatorFailure(failures, partial=table)
        log.warning("translation table is partial: %d item(s) failed", len(failures))
    return table
