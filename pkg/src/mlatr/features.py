"""Log-mel front-end, 16x16 patch grids and patch dropout."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import get_window

from mlatr.errors import NonFiniteInput, TooFewFrames, TooShort, ValidationError
from mlatr.seeding import rng_for, stable_hash
from mlatr.tensorio import read_tensor, write_tensor

PATCH = 16
DROPOUT_MODES = ("axis", "patch")


@dataclass(frozen=True)
class MelConfig:
    sample_rate_hz: int = 16000
    n_mels: int = 64
    window_ms: float = 25.0
    hop_ms: float = 10.0
    n_fft: int = 512
    f_min: float = 0.0
    f_max: float | None = None
    log_floor: float = 1e-10

    def __post_init__(self) -> None:
        if self.sample_rate_hz != 16000:
            raise ValidationError("only 16 kHz input is supported; resample beforehand")
        if self.n_mels <= 0 or self.n_mels % PATCH:
            raise ValidationError(f"n_mels must be a positive multiple of {PATCH}")
        if self.win_length < 1 or self.hop_length < 1:
            raise ValidationError("window and hop must be at least one sample")
        if self.n_fft < self.win_length:
            raise ValidationError("n_fft must be >= the window length")
        if not self.log_floor > 0:
            raise ValidationError("log_floor must be positive")

    @property
    def win_length(self) -> int:
        return int(round(self.sample_rate_hz * self.window_ms / 1000))

    @property
    def hop_length(self) -> int:
        return int(round(self.sample_rate_hz * self.hop_ms / 1000))

    @property
    def top_hz(self) -> float:
        return self.sample_rate_hz / 2 if self.f_max is None else self.f_max

    def n_frames(self, n_samples: int) -> int:
        return 1 + (n_samples - self.win_length) // self.hop_length

    def digest(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True)
class MelSpectrogram:
    values: np.ndarray  # [n_mels, n_frames]
    config: MelConfig

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class PatchGrid:
    patches: np.ndarray  # [n_freq, n_time, 256]
    keep_mask: np.ndarray  # [n_freq, n_time] bool

    @property
    def shape(self) -> tuple[int, int]:
        return self.keep_mask.shape

    @property
    def n_patches(self) -> int:
        return self.keep_mask.size

    @property
    def n_kept(self) -> int:
        return int(self.keep_mask.sum())

    def reassemble(self) -> np.ndarray:
        """Inverse of :func:`extract_patches` (ignores the mask)."""
        nf, nt, _ = self.patches.shape
        return self.patches.reshape(nf, nt, PATCH, PATCH).transpose(0, 2, 1, 3).reshape(nf * PATCH, nt * PATCH)


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """HTK-scale triangular filters, ``[n_mels, n_fft // 2 + 1]``, peak weight 1."""
    bins = np.arange(cfg.n_fft // 2 + 1) * cfg.sample_rate_hz / cfg.n_fft
    edges = _mel_to_hz(np.linspace(_hz_to_mel(cfg.f_min), _hz_to_mel(cfg.top_hz), cfg.n_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins - lower) / (center - lower)
    falling = (upper - bins) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


_FB_CACHE: dict[MelConfig, np.ndarray] = {}


def _filterbank(cfg: MelConfig) -> np.ndarray:
    fb = _FB_CACHE.get(cfg)
    if fb is None:
        fb = _FB_CACHE[cfg] = mel_filterbank(cfg)
    return fb


def compute_logmel(waveform, cfg: MelConfig | None = None) -> MelSpectrogram:
    """Natural-log mel energies: Hann window, no centering, power spectrum."""
    cfg = cfg or MelConfig()
    x = np.asarray(waveform, dtype=np.float64)
    if x.ndim != 1:
        raise ValidationError(f"expected a mono waveform, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("waveform contains NaN or infinite samples")
    if x.size < cfg.win_length:
        raise TooShort(f"{x.size} samples is shorter than one {cfg.win_length}-sample window")
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.win_length)[:: cfg.hop_length]
    window = get_window("hann", cfg.win_length, fftbins=True)
    power = np.abs(np.fft.rfft(frames * window, n=cfg.n_fft, axis=1)) ** 2
    mel = power @ _filterbank(cfg).T
    return MelSpectrogram(values=np.log(mel + cfg.log_floor).T.copy(), config=cfg)


def extract_patches(mel: MelSpectrogram) -> PatchGrid:
    """Non-overlapping 16x16 patches; trailing frames that do not fill a patch are dropped."""
    values = np.asarray(mel.values)
    n_mels, n_frames = values.shape
    if n_frames < PATCH:
        raise TooFewFrames(f"{n_frames} frames; need at least {PATCH}")
    if n_mels % PATCH:
        raise ValidationError(f"{n_mels} mel bins is not a multiple of {PATCH}")
    nf, nt = n_mels // PATCH, n_frames // PATCH
    patches = values[:, : nt * PATCH].reshape(nf, PATCH, nt, PATCH).transpose(0, 2, 1, 3).reshape(nf, nt, PATCH * PATCH)
    return PatchGrid(patches=patches, keep_mask=np.ones((nf, nt), dtype=bool))


def dropout_counts(shape: tuple[int, int], rate: float) -> tuple[int, int]:
    """Rows and columns removed by axis dropout; ``round`` is half-to-even."""
    return int(round(rate * shape[0])), int(round(rate * shape[1]))


def patch_dropout(grid: PatchGrid, rate: float, seed: int, training: bool = True, mode: str = "axis") -> PatchGrid:
    """Mask patches for training; values are never modified.

    ``axis`` mode drops whole frequency rows and whole time columns
    (``round(rate * n)`` of each, without replacement).  ``patch`` mode drops
    ``round(rate * n_patches)`` individual patches instead.
    """
    if not 0.0 <= rate < 1.0:
        raise ValidationError(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in DROPOUT_MODES:
        raise ValidationError(f"unknown dropout mode {mode!r}")
    if not training or rate == 0.0:
        return grid
    rng = rng_for(seed, "patch-dropout")
    nf, nt = grid.shape
    keep = grid.keep_mask.copy()
    if mode == "axis":
        n_rows, n_cols = dropout_counts((nf, nt), rate)
        keep[rng.choice(nf, size=n_rows, replace=False), :] = False
        keep[:, rng.choice(nt, size=n_cols, replace=False)] = False
    else:
        n_drop = int(round(rate * nf * nt))
        flat = keep.reshape(-1)
        flat[rng.choice(nf * nt, size=n_drop, replace=False)] = False
    return PatchGrid(patches=grid.patches, keep_mask=keep)


def load_waveform(path: str | Path, expected_rate: int = 16000) -> np.ndarray:
    """Mono float64 samples in [-1, 1] from a PCM or float WAV file."""
    rate, data = wavfile.read(str(path))
    if rate != expected_rate:
        raise ValidationError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz")
    if data.dtype.kind == "i":
        x = data.astype(np.float64) / float(np.iinfo(data.dtype).max + 1)
    elif data.dtype.kind == "u":
        info = np.iinfo(data.dtype)
        x = (data.astype(np.float64) - (info.max + 1) / 2) / ((info.max + 1) / 2)
    else:
        x = data.astype(np.float64)
    if x.ndim == 2:
        x = x.mean(axis=1)
    return x


def write_waveform(path: str | Path, samples: np.ndarray, rate: int = 16000) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32767), -32768, 32767).astype("<i2")
    wavfile.write(str(path), rate, pcm)


_SAFE = re.compile(r"[^A-Za-z0-9._-]")


class FeatureCache:
    """Per-clip log-mel files keyed by (audio_id, MelConfig digest)."""

    def __init__(self, root: str | Path, cfg: MelConfig):
        self.root = Path(root)
        self.cfg = cfg
        self.tag = cfg.digest()[:16]

    def path_for(self, audio_id: str) -> Path:
        safe = _SAFE.sub("_", audio_id)
        if safe != audio_id:
            safe = f"{safe}-{stable_hash(audio_id):016x}"
        return self.root / f"{safe}.{self.tag}.mlt"

    def get(self, audio_id: str) -> MelSpectrogram | None:
        path = self.path_for(audio_id)
        if not path.exists():
            return None
        return MelSpectrogram(values=read_tensor(path).astype(np.float64), config=self.cfg)

    def put(self, audio_id: str, mel: MelSpectrogram) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        path = self.path_for(audio_id)
        write_tensor(path, mel.values)
        return path
