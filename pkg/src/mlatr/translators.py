"""Translator clients used to build translation tables offline.

Three backends: a file lookup of pre-translated captions, a deterministic
dictionary mock, and a bridge to an external MT command speaking a simple
line protocol (``<lang>\\t<text>`` in, one translation per line out).
"""

from __future__ import annotations

import json
import re
import subprocess
from collections.abc import Sequence
from pathlib import Path

from mlatr.corpus import ENGLISH, canonical_language, nfc
from mlatr.errors import BackendUnavailable, MalformedRecord, MissingTranslation, MlatrError, ValidationError


class TranslatorClient:
    """Base class.  Subclasses implement :meth:`translate`; batching is optional."""

    name = "base"

    def translate(self, text: str, target: str, audio_id: str | None = None) -> str:
        raise NotImplementedError

    def translate_many(self, items: Sequence[tuple[str, str | None]], target: str) -> list[str | Exception]:
        out: list[str | Exception] = []
        for text, audio_id in items:
            try:
                out.append(self.translate(text, target, audio_id))
            except MlatrError as exc:
                out.append(exc)
        return out


def _check_target(target: str) -> str:
    target = canonical_language(target)
    if target == ENGLISH:
        raise ValidationError("translation target must not be English")
    return target


def _check_output(out: str, text: str, target: str) -> str:
    if not isinstance(out, str) or not out.strip():
        raise BackendUnavailable(f"empty translation of {text!r} into {target}")
    return nfc(out.strip())


def translate(translator: TranslatorClient, text: str, target: str, audio_id: str | None = None) -> str:
    target = _check_target(target)
    return _check_output(translator.translate(text, target, audio_id), text, target)


def translate_batch(
    translator: TranslatorClient, items: Sequence[tuple[str, str | None]], target: str
) -> list[str | Exception]:
    """Translate ``(text, audio_id)`` items; failures come back as exception values."""
    target = _check_target(target)
    raw = translator.translate_many(items, target)
    out: list[str | Exception] = []
    for (text, _), res in zip(items, raw):
        if isinstance(res, Exception):
            out.append(res)
            continue
        try:
            out.append(_check_output(res, text, target))
        except MlatrError as exc:
            out.append(exc)
    return out


# Tiny lexicon for the mock backend; unknown words get a language suffix.
_LEXICON: dict[str, dict[str, str]] = {
    "fra": {"a": "un", "the": "le", "dog": "chien", "barks": "aboie", "bird": "oiseau", "birds": "oiseaux",
            "sing": "chantent", "water": "eau", "runs": "coule", "man": "homme", "speaks": "parle",
            "car": "voiture", "engine": "moteur", "rain": "pluie", "falls": "tombe", "and": "et", "music": "musique"},
    "deu": {"a": "ein", "the": "der", "dog": "hund", "barks": "bellt", "bird": "vogel", "birds": "vögel",
            "sing": "singen", "water": "wasser", "runs": "läuft", "man": "mann", "speaks": "spricht",
            "car": "auto", "engine": "motor", "rain": "regen", "falls": "fällt", "and": "und", "music": "musik"},
    "spa": {"a": "un", "the": "el", "dog": "perro", "barks": "ladra", "bird": "pájaro", "birds": "pájaros",
            "sing": "cantan", "water": "agua", "runs": "corre", "man": "hombre", "speaks": "habla",
            "car": "coche", "engine": "motor", "rain": "lluvia", "falls": "cae", "and": "y", "music": "música"},
    "nld": {"a": "een", "the": "de", "dog": "hond", "barks": "blaft", "bird": "vogel", "birds": "vogels",
            "sing": "zingen", "water": "water", "runs": "stroomt", "man": "man", "speaks": "spreekt",
            "car": "auto", "engine": "motor", "rain": "regen", "falls": "valt", "and": "en", "music": "muziek"},
    "cat": {"a": "un", "the": "el", "dog": "gos", "barks": "borda", "bird": "ocell", "birds": "ocells",
            "sing": "canten", "water": "aigua", "runs": "corre", "man": "home", "speaks": "parla",
            "car": "cotxe", "engine": "motor", "rain": "pluja", "falls": "cau", "and": "i", "music": "música"},
    "jpn": {"dog": "犬", "barks": "吠える", "bird": "鳥", "birds": "鳥たち", "water": "水", "man": "男性",
            "speaks": "話す", "car": "車", "engine": "エンジン", "rain": "雨", "music": "音楽"},
    "zho": {"dog": "狗", "barks": "叫", "bird": "鸟", "birds": "鸟儿", "water": "水", "man": "男人",
            "speaks": "说话", "car": "汽车", "engine": "引擎", "rain": "雨", "music": "音乐"},
}

_WORD = re.compile(r"\w+|[^\w\s]+", re.UNICODE)


class MockTranslator(TranslatorClient):
    """Deterministic word-level substitution; a pure function of (text, target)."""

    name = "mock"

    def __init__(self, fail_on: set[str] | None = None):
        # languages for which every call fails (test hook)
        self.fail_on = set(fail_on or ())

    def translate(self, text: str, target: str, audio_id: str | None = None) -> str:
        if target in self.fail_on or "*" in self.fail_on:
            raise BackendUnavailable(f"mock backend configured to fail for {target}")
        lexicon = _LEXICON.get(target, {})
        words = []
        for tok in _WORD.findall(text.lower()):
            if tok[0].isalnum() or tok[0] == "_":
                words.append(lexicon.get(tok, f"{tok}_{target}"))
            else:
                words.append(tok)
        return " ".join(words)


class FileTranslator(TranslatorClient):
    """Lookup of pre-translated captions stored in translation-table JSONL files.

    Lookup order: ``(source_text, target)`` then ``(audio_id, target)``.
    """

    name = "file"

    def __init__(self, paths: str | Path | Sequence[str | Path]):
        if isinstance(paths, (str, Path)):
            paths = [paths]
        self.by_text: dict[tuple[str, str], str] = {}
        self.by_audio: dict[tuple[str, str], str] = {}
        for path in paths:
            path = Path(path)
            if not path.exists():
                raise BackendUnavailable(f"translation file {path} not found")
            with open(path, encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, start=1):
                    if not line.strip():
                        continue
                    try:
                        obj = json.loads(line)
                        lang = canonical_language(obj["language"])
                        text = obj["text"]
                    except (json.JSONDecodeError, KeyError, TypeError, ValidationError) as exc:
                        raise MalformedRecord(f"bad translation record ({exc})", lineno, str(path)) from None
                    if obj.get("source_text"):
                        self.by_text[(nfc(obj["source_text"]), lang)] = text
                    if obj.get("audio_id"):
                        self.by_audio[(obj["audio_id"], lang)] = text

    def translate(self, text: str, target: str, audio_id: str | None = None) -> str:
        hit = self.by_text.get((nfc(text), target))
        if hit is None and audio_id is not None:
            hit = self.by_audio.get((audio_id, target))
        if hit is None:
            raise MissingTranslation(f"no stored {target} translation for audio {audio_id!r}: {text!r}")
        return hit


class CommandTranslator(TranslatorClient):
    """Bridge to an external MT process: ``<lang>\\t<text>`` lines on stdin,
    one translated line per input on stdout, exit status 0."""

    name = "command"

    def __init__(self, argv: Sequence[str], timeout: float | None = 600.0):
        self.argv = list(argv)
        self.timeout = timeout

    def translate_many(self, items: Sequence[tuple[str, str | None]], target: str) -> list[str | Exception]:
        if not items:
            return []
        payload = "".join(f"{target}\t{' '.join(text.split())}\n" for text, _ in items)
        try:
            proc = subprocess.run(
                self.argv, input=payload.encode("utf-8"), capture_output=True, timeout=self.timeout, check=False
            )
        except (OSError, subprocess.TimeoutExpired) as exc:
            err = BackendUnavailable(f"translator command failed to run: {exc}")
            return [err] * len(items)
        if proc.returncode != 0:
            err = BackendUnavailable(
                f"translator command exited with {proc.returncode}: {proc.stderr.decode('utf-8', 'replace').strip()}"
            )
            return [err] * len(items)
        lines = proc.stdout.decode("utf-8").splitlines()
        if len(lines) != len(items):
            err = BackendUnavailable(f"translator returned {len(lines)} lines for {len(items)} inputs")
            return [err] * len(items)
        return lines

    def translate(self, text: str, target: str, audio_id: str | None = None) -> str:
        res = self.translate_many([(text, audio_id)], target)[0]
        if isinstance(res, Exception):
            raise res
        return res


def make_translator(backend: str, *, paths=(), command: Sequence[str] = ()) -> TranslatorClient:
    if backend == "mock":
        return MockTranslator()
    if backend == "file":
        if not paths:
            raise ValidationError("file backend needs at least one translation file")
        return FileTranslator(paths)
    if backend == "command":
        if not command:
            raise ValidationError("command backend needs a command line")
        return CommandTranslator(command)
    raise ValidationError(f"unknown translator backend {backend!r}")
