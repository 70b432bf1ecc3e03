"""Language enhancement: per-epoch mixing of translated captions into the English pairs."""

from __future__ import annotations

import dataclasses
import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

from mlatr.corpus import ENGLISH, LANGUAGES, TARGET_LANGUAGES, CaptionRecord, DatasetManifest, TranslationTable, canonical_language
from mlatr.errors import InsufficientTranslations, ValidationError
from mlatr.seeding import rng_for

LE_MODES = ("none", "single", "mixture")
PROMPT_STYLES = ("prefix_tag", "none")
DEFAULT_MIX_RATIO = 0.10


@dataclass(frozen=True)
class LEConfig:
    mode: str = "none"
    language: str | None = None  # single mode only
    mix_ratio: float = DEFAULT_MIX_RATIO
    prompt_style: str = "prefix_tag"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in LE_MODES:
            raise ValidationError(f"unknown LE mode {self.mode!r}")
        if not 0.0 <= self.mix_ratio <= 1.0:
            raise ValidationError(f"mix_ratio must be in [0, 1], got {self.mix_ratio}")
        if self.prompt_style not in PROMPT_STYLES:
            raise ValidationError(f"unknown prompt style {self.prompt_style!r}")
        if self.mode == "single":
            if self.language is None:
                raise ValidationError("single-language LE needs a language")
            lang = canonical_language(self.language)
            if lang == ENGLISH:
                raise ValidationError("single-language LE cannot use English")
            object.__setattr__(self, "language", lang)
        elif self.language is not None:
            object.__setattr__(self, "language", canonical_language(self.language))

    @property
    def effective_ratio(self) -> float:
        return 0.0 if self.mode == "none" else self.mix_ratio

    @property
    def languages(self) -> tuple[str, ...]:
        if self.mode == "single":
            return (self.language,)
        if self.mode == "mixture":
            return TARGET_LANGUAGES
        return ()

    def replace(self, **changes) -> LEConfig:
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class EpochSample:
    pairs: tuple[tuple[str, CaptionRecord], ...]
    epoch_index: int
    counts_by_language: dict[str, int]

    @property
    def n_added(self) -> int:
        return sum(n for lang, n in self.counts_by_language.items() if lang != ENGLISH)

    def write_jsonl(self, path: str | Path) -> None:
        lines = []
        for audio_id, cap in self.pairs:
            obj = {"kind": "caption", "audio_id": audio_id, "text": cap.text, "language": cap.language, "epoch": self.epoch_index}
            lines.append(json.dumps(obj, ensure_ascii=False, sort_keys=True, separators=(",", ":")) + "\n")
        Path(path).write_text("".join(lines), encoding="utf-8")


def annotate_prompt(caption: CaptionRecord, style: str = "prefix_tag") -> CaptionRecord:
    """Prefix the caption with ``"<code>: "``; a no-op if already prefixed or style is ``none``."""
    if style == "none":
        return caption
    if style != "prefix_tag":
        raise ValidationError(f"unknown prompt style {style!r}")
    prefix = f"{caption.language}: "
    if caption.text.startswith(prefix):
        return caption
    return dataclasses.replace(caption, text=prefix + caption.text)


def added_count(n_english: int, ratio: float) -> int:
    # Python's round(): half-to-even
    return int(round(ratio * n_english))


def sample_epoch(manifest: DatasetManifest, table: TranslationTable, cfg: LEConfig, epoch_index: int) -> EpochSample:
    """All English pairs plus ``round(mix_ratio * n_english)`` translated pairs.

    Translated pairs are drawn without replacement, uniformly over the table
    entries of the configured language set.  The draw depends only on
    ``(cfg.seed, epoch_index)``.
    """
    if manifest.split != "train":
        raise ValidationError("language enhancement applies to the train split only")
    if epoch_index < 0:
        raise ValidationError("epoch_index must be >= 0")
    english = manifest.english_pairs()
    n_add = added_count(len(english), cfg.effective_ratio)
    added: list[tuple[str, CaptionRecord]] = []
    if n_add:
        known = set(manifest.audio_ids)
        candidates = [key for key in table.keys_for(cfg.languages) if key[0] in known]
        if n_add > len(candidates):
            raise InsufficientTranslations(n_add, len(candidates))
        rng = rng_for(cfg.seed, "le", epoch_index)
        picked = rng.choice(len(candidates), size=n_add, replace=False)
        for idx in picked:
            key = candidates[int(idx)]
            added.append((key[0], table.entries[key]))
    pairs = tuple(english) + tuple(added)
    counts = Counter(cap.language for _, cap in pairs)
    return EpochSample(
        pairs=pairs,
        epoch_index=epoch_index,
        counts_by_language={lang: counts[lang] for lang in LANGUAGES if counts[lang]},
    )
