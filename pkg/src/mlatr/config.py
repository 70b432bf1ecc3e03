"""INI run configuration and its provenance hash."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import os
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path

from mlatr.augment import LEConfig
from mlatr.corpus import LANGUAGES, parse_languages
from mlatr.errors import ValidationError
from mlatr.evaluate import AP_NORMS
from mlatr.features import MelConfig
from mlatr.trainer import TrainConfig

CACHE_ENV = "MLATR_CACHE"
PATH_KEYS = ("train", "valid", "test", "table", "test_captions", "cache", "checkpoints")
_TRAIN_KEYS = tuple(f.name for f in dataclasses.fields(TrainConfig) if f.name != "le")
_LE_KEYS = ("mode", "language", "mix_ratio", "prompt_style")
_MEL_KEYS = tuple(f.name for f in dataclasses.fields(MelConfig))


@dataclass(frozen=True)
class RunConfig:
    paths: dict[str, Path | None] = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    mel: MelConfig = field(default_factory=MelConfig)
    audio_encoder: str = "toy-audio-32"
    text_encoder: str = "toy-text-32"
    languages: tuple[str, ...] = LANGUAGES
    ap_norm: str = "min"
    jobs: int = 1

    def __post_init__(self) -> None:
        if self.ap_norm not in AP_NORMS:
            raise ValidationError(f"unknown ap_norm {self.ap_norm!r}")
        if self.jobs < 1:
            raise ValidationError("jobs must be >= 1")

    @property
    def le(self) -> LEConfig:
        return self.train.le

    def path(self, key: str) -> Path | None:
        return self.paths.get(key)

    def require(self, key: str) -> Path:
        p = self.paths.get(key)
        if p is None:
            raise ValidationError(f"config has no [paths] {key}")
        if key not in ("cache", "checkpoints") and not p.exists():
            raise ValidationError(f"[paths] {key} does not exist: {p}")
        return p

    def replace(self, **changes) -> RunConfig:
        return dataclasses.replace(self, **changes)

    def with_train(self, **changes) -> RunConfig:
        le_changes = {k: changes.pop(k) for k in list(changes) if k.startswith("le_")}
        train = self.train
        if le_changes:
            train = train.replace(le=train.le.replace(**{k[3:]: v for k, v in le_changes.items()}))
        return self.replace(train=train.replace(**changes) if changes else train)

    def hashed_content(self) -> dict:
        """Everything that influences results; paths are excluded so moved runs hash alike."""
        return {
            "train": self.train.as_dict(),
            "mel": dataclasses.asdict(self.mel),
            "encoders": {"audio": self.audio_encoder, "text": self.text_encoder},
            "eval": {"languages": list(self.languages), "ap_norm": self.ap_norm},
        }

    def digest(self) -> str:
        blob = json.dumps(self.hashed_content(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def to_ini(self, include_paths: bool = True) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        if include_paths:
            cp["paths"] = {k: "" if self.paths.get(k) is None else str(self.paths[k]) for k in PATH_KEYS}
        cp["train"] = {k: _fmt(getattr(self.train, k)) for k in _TRAIN_KEYS}
        cp["le"] = {k: _fmt(getattr(self.le, k)) for k in _LE_KEYS}
        cp["mel"] = {k: _fmt(getattr(self.mel, k)) for k in _MEL_KEYS}
        cp["encoders"] = {"audio": self.audio_encoder, "text": self.text_encoder}
        cp["eval"] = {"languages": ",".join(self.languages), "ap_norm": self.ap_norm, "jobs": str(self.jobs)}
        lines = []
        for section in cp.sections():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {v}".rstrip() for k, v in cp[section].items())
            lines.append("")
        return "\n".join(lines)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _coerce(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if default is None:
            if raw == "":
                return None
            try:
                return float(raw)
            except ValueError:
                return raw
    except ValueError:
        raise ValidationError(f"bad value for {key}: {raw!r}") from None
    return raw


def _section(cp: configparser.ConfigParser, name: str, known: tuple[str, ...]) -> dict[str, str]:
    if not cp.has_section(name):
        return {}
    items = dict(cp[name])
    unknown = sorted(set(items) - set(known))
    if unknown:
        raise ValidationError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    return items


def parse_config(text: str, base_dir: str | Path = ".", env: Mapping[str, str] | None = None) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ValidationError(f"config parse error: {exc}") from None
    allowed = {"paths", "train", "le", "mel", "encoders", "eval"}
    extra = sorted(set(cp.sections()) - allowed)
    if extra:
        raise ValidationError(f"unknown config section(s): {', '.join(extra)}")
    base = Path(base_dir)
    paths: dict[str, Path | None] = {}
    for key, raw in _section(cp, "paths", PATH_KEYS).items():
        raw = raw.strip()
        paths[key] = (base / raw) if raw else None
    env = os.environ if env is None else env
    if env.get(CACHE_ENV):
        paths["cache"] = Path(env[CACHE_ENV])

    t_defaults = TrainConfig()
    train_kw = {k: _coerce(v, getattr(t_defaults, k), f"train.{k}") for k, v in _section(cp, "train", _TRAIN_KEYS).items()}
    le_defaults = LEConfig()
    le_kw = {}
    for k, v in _section(cp, "le", _LE_KEYS).items():
        le_kw[k] = (v.strip() or None) if k == "language" else _coerce(v, getattr(le_defaults, k), f"le.{k}")
    le = LEConfig(**le_kw)
    train = TrainConfig(**train_kw, le=le)

    m_defaults = MelConfig()
    mel_kw = {k: _coerce(v, getattr(m_defaults, k), f"mel.{k}") for k, v in _section(cp, "mel", _MEL_KEYS).items()}
    mel = MelConfig(**mel_kw)

    enc = _section(cp, "encoders", ("audio", "text"))
    ev = _section(cp, "eval", ("languages", "ap_norm", "jobs"))
    return RunConfig(
        paths=paths,
        train=train,
        mel=mel,
        audio_encoder=enc.get("audio", "toy-audio-32").strip(),
        text_encoder=enc.get("text", "toy-text-32").strip(),
        languages=tuple(parse_languages(ev["languages"])) if ev.get("languages") else LANGUAGES,
        ap_norm=ev.get("ap_norm", "min").strip(),
        jobs=_coerce(ev.get("jobs", "1"), 1, "eval.jobs"),
    )


def load_config(path: str | Path, env: Mapping[str, str] | None = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"), path.parent, env)
