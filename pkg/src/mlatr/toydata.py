"""Synthetic sound-event dataset for smoke tests and the demo pipeline.

Each clip mixes a class-specific spectral signature with low-level noise;
captions come from per-class templates built from words the mock
translator knows, so translated test sets stay meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from mlatr.config import RunConfig
from mlatr.corpus import TARGET_LANGUAGES, AudioRef, CaptionRecord, DatasetManifest, write_caption_file, write_manifest
from mlatr.features import write_waveform
from mlatr.seeding import rng_for
from mlatr.trainer import TrainConfig
from mlatr.translators import MockTranslator

SAMPLE_RATE = 16000


@dataclass(frozen=True)
class SoundClass:
    name: str
    tones_hz: tuple[float, ...]
    pulse_hz: float  # amplitude modulation rate, 0 for steady
    noise: float
    captions: tuple[str, ...]


CLASSES = (
    SoundClass("dog", (450.0, 900.0), 2.0, 0.05, ("a dog barks", "the dog barks", "a dog barks and barks", "dog barks", "a man and a dog")),
    SoundClass("birds", (3200.0, 4100.0, 5000.0), 6.0, 0.02, ("birds sing", "the birds sing", "a bird and birds sing", "bird", "birds and music")),
    SoundClass("water", (), 0.0, 0.4, ("water runs", "the water runs", "water and rain", "a water runs", "water falls")),
    SoundClass("engine", (60.0, 120.0, 180.0), 0.0, 0.05, ("a car engine runs", "the engine runs", "a car and engine", "car engine", "the car runs")),
    SoundClass("speech", (220.0, 700.0, 1200.0), 4.0, 0.03, ("a man speaks", "the man speaks", "man speaks and speaks", "a man", "the man speaks and the dog barks")),
    SoundClass("rain", (7000.0,), 11.0, 0.3, ("rain falls", "the rain falls", "rain and water", "a rain falls", "rain falls and falls")),
    SoundClass("music", (262.0, 330.0, 392.0, 523.0), 1.0, 0.01, ("music", "the music", "music and birds sing", "a music", "the music and the man")),
)


def synth_clip(cls: SoundClass, duration_s: float, seed: int, key: str) -> np.ndarray:
    rng = rng_for(seed, "toy-clip", cls.name, key)
    t = np.arange(int(round(duration_s * SAMPLE_RATE))) / SAMPLE_RATE
    x = np.zeros_like(t)
    for f in cls.tones_hz:
        detune = 1.0 + 0.02 * rng.standard_normal()
        x += np.sin(2 * np.pi * f * detune * t + rng.uniform(0, 2 * np.pi))
    if cls.tones_hz:
        x /= len(cls.tones_hz)
    if cls.pulse_hz:
        x *= 0.5 * (1 + np.sign(np.sin(2 * np.pi * cls.pulse_hz * t + rng.uniform(0, 2 * np.pi))))
    x += cls.noise * rng.standard_normal(t.shape)
    return 0.5 * x / max(1e-9, float(np.max(np.abs(x))))


def make_split(root: Path, split: str, n_clips: int, n_caps: int, duration_s: float, seed: int) -> DatasetManifest:
    audio_dir = root / "audio" / split
    audio_dir.mkdir(parents=True, exist_ok=True)
    audio, captions = [], []
    for i in range(n_clips):
        cls = CLASSES[i % len(CLASSES)]
        audio_id = f"{split}-{i:04d}"
        wave = synth_clip(cls, duration_s, seed, f"{split}/{i}")
        write_waveform(audio_dir / f"{audio_id}.wav", wave, SAMPLE_RATE)
        audio.append(AudioRef(audio_id, f"audio/{split}/{audio_id}.wav", duration_s, SAMPLE_RATE))
        for j in range(n_caps):
            captions.append(CaptionRecord(audio_id, cls.captions[(i + j) % len(cls.captions)]))
    manifest = DatasetManifest(split, tuple(audio), tuple(captions), name=f"toy-{split}", root=root)
    write_manifest(manifest, root / f"{split}.jsonl")
    return manifest


def make_toy_dataset(
    root: str | Path,
    *,
    n_train: int = 28,
    n_valid: int = 7,
    n_test: int = 14,
    train_captions: int = 2,
    duration_s: float = 2.0,
    seed: int = 0,
) -> RunConfig:
    """Write wavs, manifests, per-language test captions and ``config.ini``; returns the config."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    make_split(root, "train", n_train, train_captions, duration_s, seed)
    make_split(root, "valid", n_valid, 1, duration_s, seed)
    test = make_split(root, "test", n_test, 5, duration_s, seed)
    cap_dir = root / "test_captions"
    cap_dir.mkdir(exist_ok=True)
    translator = MockTranslator()
    for lang in TARGET_LANGUAGES:
        caps = [CaptionRecord(c.audio_id, translator.translate(c.text, lang), lang, True) for c in test.captions]
        write_caption_file(caps, cap_dir / f"{lang}.jsonl")
    cfg = RunConfig(
        paths={
            "train": Path("train.jsonl"),
            "valid": Path("valid.jsonl"),
            "test": Path("test.jsonl"),
            "table": Path("translations.jsonl"),
            "test_captions": Path("test_captions"),
            "cache": Path("cache"),
            "checkpoints": Path("runs"),
        },
        train=TrainConfig(batch_size=16, epochs=5, learning_rate=1e-3, seed=seed),
    )
    (root / "config.ini").write_text(cfg.to_ini(), encoding="utf-8")
    return cfg
