"""Audio and multilingual text encoder contracts, toy reference encoders, plugin registry.

An encoder is any object with a ``spec`` and a ``forward(items)`` method that
returns ``(embeddings, cache)``.  Trainable encoders additionally expose
``parameters()`` (name -> array, updated in place by the optimizer) and
``backward(cache, grad_embeddings)`` returning gradients keyed like
``parameters()``.
"""

from __future__ import annotations

import json
import re
import subprocess
import tempfile
import threading
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from mlatr.corpus import ENGLISH, LANGUAGES, CaptionRecord, nfc
from mlatr.errors import (
    DuplicateName,
    NonFinite,
    PluginUnavailable,
    ShapeMismatch,
    UnsupportedLanguage,
    ValidationError,
)
from mlatr.features import PATCH, PatchGrid
from mlatr.seeding import rng_for
from mlatr.tensorio import read_tensor, write_tensor

PATCH_DIM = PATCH * PATCH


@dataclass(frozen=True)
class AudioEncoderSpec:
    name: str
    embed_dim: int
    consumes: str = "patch_grid"  # or "waveform"
    trainable: bool = False

    def __post_init__(self) -> None:
        if self.embed_dim <= 0:
            raise ValidationError("embed_dim must be positive")
        if self.consumes not in ("patch_grid", "waveform"):
            raise ValidationError(f"unknown audio input kind {self.consumes!r}")


@dataclass(frozen=True)
class TextEncoderSpec:
    name: str
    embed_dim: int
    languages: frozenset[str] = field(default_factory=lambda: frozenset(LANGUAGES))
    trainable: bool = False

    def __post_init__(self) -> None:
        if self.embed_dim <= 0:
            raise ValidationError("embed_dim must be positive")
        object.__setattr__(self, "languages", frozenset(self.languages))
        if ENGLISH not in self.languages:
            raise ValidationError("text encoders must support English")


@dataclass(frozen=True)
class EmbeddingBatch:
    vectors: np.ndarray
    ids: tuple[str, ...]

    def __post_init__(self) -> None:
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 1:
            raise ShapeMismatch(f"embedding batch must be a non-empty matrix, got {self.vectors.shape}")
        if len(self.ids) != self.vectors.shape[0]:
            raise ShapeMismatch("ids not aligned with embedding rows")
        if not np.all(np.isfinite(self.vectors)):
            raise NonFinite("encoder produced non-finite embeddings")


class ToyAudioEncoder:
    """Seeded random projection of the masked mean of a clip's patches.

    A clip whose patches are all masked pools to the zero vector.
    """

    concurrent_safe = True

    def __init__(self, embed_dim: int = 32, seed: int = 0, trainable: bool = False, name: str | None = None):
        self.spec = AudioEncoderSpec(name or f"toy-audio-{embed_dim}", embed_dim, "patch_grid", trainable)
        rng = rng_for(seed, "toy-audio")
        self.proj = rng.standard_normal((embed_dim, PATCH_DIM)) / np.sqrt(PATCH_DIM)

    @staticmethod
    def pool(grid: PatchGrid) -> np.ndarray:
        if not isinstance(grid, PatchGrid):
            raise ShapeMismatch(f"toy audio encoder consumes PatchGrid, got {type(grid).__name__}")
        if grid.patches.shape[-1] != PATCH_DIM:
            raise ShapeMismatch(f"patches must have {PATCH_DIM} values, got {grid.patches.shape[-1]}")
        kept = grid.patches[grid.keep_mask]
        if kept.shape[0] == 0:
            return np.zeros(PATCH_DIM)
        return kept.mean(axis=0)

    def forward(self, clips: Sequence[PatchGrid]):
        pooled = np.stack([self.pool(c) for c in clips])
        # per-row products keep results independent of batch composition
        return np.stack([self.proj @ row for row in pooled]), pooled

    def parameters(self) -> dict[str, np.ndarray]:
        return {"audio_encoder.proj": self.proj} if self.spec.trainable else {}

    def backward(self, pooled: np.ndarray, grad: np.ndarray) -> dict[str, np.ndarray]:
        return {"audio_encoder.proj": grad.T @ pooled}


_PUNCT = "\"'.,!?;()[]{}«»“”„¡¿。、，！？"
_SPACE = re.compile(r"\s+")


class ToyTextEncoder:
    """Mean of hash-seeded token vectors over whitespace tokens.

    The language prompt (``"fra:"``) is a token like any other, so the same
    words under different prompts embed differently.
    """

    concurrent_safe = True

    def __init__(self, embed_dim: int = 32, seed: int = 0, languages=LANGUAGES, name: str | None = None):
        self.spec = TextEncoderSpec(name or f"toy-text-{embed_dim}", embed_dim, frozenset(languages), False)
        self.seed = seed
        self._vector = lru_cache(maxsize=65536)(self._token_vector)

    def _token_vector(self, token: str) -> np.ndarray:
        return rng_for(self.seed, "toy-text", token).standard_normal(self.spec.embed_dim)

    @staticmethod
    def tokenize(text: str) -> list[str]:
        tokens = []
        for raw in _SPACE.split(nfc(text).strip()):
            tok = raw.casefold().strip(_PUNCT)
            if tok:
                tokens.append(tok)
        return tokens or [nfc(text).strip()]

    def embed_text(self, text: str) -> np.ndarray:
        return np.mean([self._vector(t) for t in self.tokenize(text)], axis=0)

    def forward(self, captions: Sequence[CaptionRecord]):
        for cap in captions:
            if cap.language not in self.spec.languages:
                raise UnsupportedLanguage(f"{self.spec.name} does not support {cap.language}")
        return np.stack([self.embed_text(c.text) for c in captions]), None

    def parameters(self) -> dict[str, np.ndarray]:
        return {}


class ExternalProcessEncoder:
    """Encoder served by a long-running subprocess.

    The framework writes one JSON request per line on the plugin's stdin,
    ``{"kind": "text"|"audio", "payload_path": str}``, and the plugin answers
    with one line holding the path of an MLT1 tensor file ``[N, embed_dim]``.

    Payloads are JSONL.  Text lines carry ``audio_id``, ``text`` and
    ``language``.  Audio lines carry ``patches`` and ``mask`` (MLT1 paths,
    ``[nf, nt, 256]`` and ``[nf, nt]`` as 0/1) for patch-grid plugins, or
    ``waveform`` (MLT1 path, 1-D) for waveform plugins.
    """

    concurrent_safe = False

    def __init__(self, spec, argv: Sequence[str], workdir: str | Path | None = None):
        self.spec = spec
        self.kind = "text" if isinstance(spec, TextEncoderSpec) else "audio"
        self.argv = list(argv)
        self._workdir = Path(workdir) if workdir else Path(tempfile.mkdtemp(prefix="mlatr-plugin-"))
        self._proc: subprocess.Popen | None = None
        self._calls = 0

    def _ensure(self) -> subprocess.Popen:
        if self._proc is None or self._proc.poll() is not None:
            try:
                self._proc = subprocess.Popen(
                    self.argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True, encoding="utf-8"
                )
            except OSError as exc:
                raise PluginUnavailable(f"cannot start plugin {self.spec.name}: {exc}") from exc
        return self._proc

    def _write_payload(self, items, path: Path) -> None:
        lines = []
        for i, item in enumerate(items):
            if self.kind == "text":
                obj = {"audio_id": item.audio_id, "text": item.text, "language": item.language}
            elif isinstance(item, PatchGrid):
                patches = path.with_name(f"{path.stem}-{i}-patches.mlt")
                mask = path.with_name(f"{path.stem}-{i}-mask.mlt")
                write_tensor(patches, item.patches)
                write_tensor(mask, item.keep_mask.astype(np.float32))
                obj = {"patches": str(patches), "mask": str(mask)}
            else:
                wav = path.with_name(f"{path.stem}-{i}-wave.mlt")
                write_tensor(wav, np.asarray(item))
                obj = {"waveform": str(wav)}
            lines.append(json.dumps(obj, ensure_ascii=False) + "\n")
        path.write_text("".join(lines), encoding="utf-8")

    def forward(self, items):
        proc = self._ensure()
        self._calls += 1
        payload = self._workdir / f"req{self._calls:06d}.jsonl"
        self._write_payload(items, payload)
        try:
            proc.stdin.write(json.dumps({"kind": self.kind, "payload_path": str(payload)}) + "\n")
            proc.stdin.flush()
            reply = proc.stdout.readline().strip()
        except (BrokenPipeError, OSError) as exc:
            raise PluginUnavailable(f"plugin {self.spec.name} died: {exc}") from exc
        if not reply:
            raise PluginUnavailable(f"plugin {self.spec.name} returned no reply")
        emb = read_tensor(reply).astype(np.float64)
        if emb.shape != (len(items), self.spec.embed_dim):
            raise ShapeMismatch(f"plugin returned {emb.shape}, expected {(len(items), self.spec.embed_dim)}")
        return emb, None

    def parameters(self) -> dict[str, np.ndarray]:
        return {}

    def close(self) -> None:
        if self._proc is not None and self._proc.poll() is None:
            self._proc.stdin.close()
            self._proc.wait(timeout=10)
        self._proc = None


_LOCKS: dict[int, threading.Lock] = {}
_LOCKS_GUARD = threading.Lock()


def _lock_for(encoder) -> threading.Lock:
    with _LOCKS_GUARD:
        return _LOCKS.setdefault(id(encoder), threading.Lock())


def _run(encoder, items, jobs: int):
    if jobs > 1 and getattr(encoder, "concurrent_safe", False) and len(items) > 1:
        chunks = [list(c) for c in np.array_split(np.arange(len(items)), min(jobs, len(items)))]
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(lambda idx: encoder.forward([items[i] for i in idx])[0], chunks))
        return np.concatenate(parts, axis=0)
    if getattr(encoder, "concurrent_safe", False):
        return encoder.forward(items)[0]
    with _lock_for(encoder):
        return encoder.forward(items)[0]


def encode_audio(encoder, clips: Sequence, ids: Sequence[str] | None = None, jobs: int = 1) -> EmbeddingBatch:
    clips = list(clips)
    want_grid = encoder.spec.consumes == "patch_grid"
    for clip in clips:
        if isinstance(clip, PatchGrid) != want_grid:
            raise ShapeMismatch(f"{encoder.spec.name} consumes {encoder.spec.consumes}")
    vectors = np.asarray(_run(encoder, clips, jobs), dtype=np.float64)
    if vectors.shape != (len(clips), encoder.spec.embed_dim):
        raise ShapeMismatch(f"{encoder.spec.name} produced {vectors.shape}")
    return EmbeddingBatch(vectors, tuple(ids) if ids is not None else tuple(str(i) for i in range(len(clips))))


def encode_text(encoder, captions: Sequence[CaptionRecord], ids: Sequence[str] | None = None, jobs: int = 1) -> EmbeddingBatch:
    captions = list(captions)
    for cap in captions:
        if cap.language not in encoder.spec.languages:
            raise UnsupportedLanguage(f"{encoder.spec.name} does not support {cap.language}")
    vectors = np.asarray(_run(encoder, captions, jobs), dtype=np.float64)
    if vectors.shape != (len(captions), encoder.spec.embed_dim):
        raise ShapeMismatch(f"{encoder.spec.name} produced {vectors.shape}")
    return EmbeddingBatch(vectors, tuple(ids) if ids is not None else tuple(c.audio_id for c in captions))


class EncoderRegistry:
    """Name -> factory; resolving a name returns one shared instance."""

    def __init__(self):
        self._factories: dict[str, tuple[object, Callable[[], object]]] = {}
        self._instances: dict[str, object] = {}
        self._guard = threading.Lock()

    def register(self, spec, factory: Callable[[], object]) -> str:
        with self._guard:
            if spec.name in self._factories:
                raise DuplicateName(f"encoder {spec.name!r} already registered")
            self._factories[spec.name] = (spec, factory)
        return spec.name

    def register_command(self, spec, argv: Sequence[str]) -> str:
        return self.register(spec, lambda: ExternalProcessEncoder(spec, argv))

    def spec(self, name: str):
        try:
            return self._factories[name][0]
        except KeyError:
            raise PluginUnavailable(f"no encoder registered as {name!r}") from None

    def resolve(self, name: str):
        with self._guard:
            if name in self._instances:
                return self._instances[name]
            if name not in self._factories:
                raise PluginUnavailable(f"no encoder registered as {name!r}")
            inst = self._factories[name][1]()
            self._instances[name] = inst
            return inst

    def names(self) -> list[str]:
        return sorted(self._factories)

    def __contains__(self, name: str) -> bool:
        return name in self._factories


def default_registry() -> EncoderRegistry:
    reg = EncoderRegistry()
    for dim in (32, 64, 128):
        reg.register(AudioEncoderSpec(f"toy-audio-{dim}", dim), lambda d=dim: ToyAudioEncoder(d))
        reg.register(
            AudioEncoderSpec(f"toy-audio-{dim}-trainable", dim, trainable=True),
            lambda d=dim: ToyAudioEncoder(d, trainable=True, name=f"toy-audio-{d}-trainable"),
        )
        reg.register(TextEncoderSpec(f"toy-text-{dim}", dim), lambda d=dim: ToyTextEncoder(d))
    return reg


REGISTRY = default_registry()


def register_plugin(spec, factory: Callable[[], object] | Sequence[str], registry: EncoderRegistry | None = None) -> str:
    """Register an in-process factory, or an argv list for an out-of-process plugin."""
    registry = registry or REGISTRY
    if callable(factory):
        return registry.register(spec, factory)
    return registry.register_command(spec, list(factory))


def resolve(name: str, registry: EncoderRegistry | None = None):
    return (registry or REGISTRY).resolve(name)
