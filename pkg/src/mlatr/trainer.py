"""Contrastive training loop: batching, Adam updates, checkpoints, fine-tuning."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import shutil
import struct
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mlatr.augment import EpochSample, LEConfig, annotate_prompt, sample_epoch
from mlatr.corpus import CaptionRecord, DatasetManifest, TranslationTable
from mlatr.errors import DivergedLoss, IncompatibleCheckpoint, NonFinite, UnsatisfiableConstraint, ValidationError, ZeroNormRow
from mlatr.features import DROPOUT_MODES, PatchGrid, patch_dropout
from mlatr.retrieval_core import DEFAULT_TEMPERATURE, ProjectionHead, info_nce_gradient
from mlatr.seeding import rng_for, stable_hash
from mlatr.tensorio import read_state, write_state

HEADS_MAGIC = b"MLHD"
HEADS_VERSION = 1
LOSS_COLUMNS = ("epoch", "batch", "loss", "loss_a2t", "loss_t2a")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    epochs: int = 20
    learning_rate: float = 5e-5
    finetune_learning_rate: float = 5e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    le: LEConfig = field(default_factory=LEConfig)
    dropout_rate: float = 0.25
    dropout_mode: str = "axis"
    temperature: float = DEFAULT_TEMPERATURE
    joint_dim: int = 512
    use_bias: bool = True
    allow_audio_collisions: bool = False

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")
        # zero is accepted so a frozen run can be used as a control
        if self.learning_rate < 0 or self.finetune_learning_rate < 0:
            raise ValidationError("learning rates must be non-negative")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0) or self.eps <= 0:
            raise ValidationError("invalid Adam hyperparameters")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValidationError("dropout_rate must be in [0, 1)")
        if self.dropout_mode not in DROPOUT_MODES:
            raise ValidationError(f"unknown dropout mode {self.dropout_mode!r}")
        if self.temperature <= 0:
            raise ValidationError("temperature must be positive")
        if self.joint_dim < 1:
            raise ValidationError("joint_dim must be >= 1")

    def replace(self, **changes) -> TrainConfig:
        return dataclasses.replace(self, **changes)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.as_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


# ---------------------------------------------------------------- batching


def _capacities(n: int, batch_size: int) -> list[int]:
    caps = [batch_size] * (n // batch_size)
    rem = n % batch_size
    if rem >= 2:
        caps.append(rem)
    return caps


def make_batches(
    sample: EpochSample | Sequence[tuple[str, CaptionRecord]],
    batch_size: int,
    seed: int,
    epoch: int,
    allow_collisions: bool = False,
) -> list[list[tuple[str, CaptionRecord]]]:
    """Shuffle pairs with a seeded permutation and cut them into batches.

    Batch sizes are ``batch_size`` repeated, plus the remainder when it holds
    at least two pairs.  Unless ``allow_collisions`` is set, no batch holds
    two pairs of the same audio: pairs are grouped by audio and each group is
    spread over the batches with the most free room, largest groups first,
    which always succeeds when any valid assignment exists.
    """
    pairs = list(sample.pairs if isinstance(sample, EpochSample) else sample)
    if not pairs:
        raise ValidationError("cannot batch an empty sample")
    if batch_size < 1:
        raise ValidationError("batch_size must be >= 1")
    perm = rng_for(seed, "batches", epoch).permutation(len(pairs))
    order = [pairs[int(i)] for i in perm]
    caps = _capacities(len(order), batch_size)
    if allow_collisions:
        out, pos = [], 0
        for c in caps:
            out.append(order[pos : pos + c])
            pos += c
        return out

    groups: dict[str, list[int]] = {}
    for pos, (audio_id, _) in enumerate(order):
        groups.setdefault(audio_id, []).append(pos)
    if sum(caps) < len(order):
        # a lone leftover pair is dropped; taking it from the largest group
        # never makes the assignment harder
        largest = max(groups.values(), key=lambda g: (len(g), g[-1]))
        largest.pop()
    ordered = sorted((g for g in groups.values() if g), key=len, reverse=True)

    free = list(caps)
    members: list[list[int]] = [[] for _ in caps]
    singles: list[int] = []
    for positions in ordered:
        if len(positions) == 1:
            singles.append(positions[0])
            continue
        open_batches = [b for b in range(len(free)) if free[b] > 0]
        if len(positions) > len(open_batches):
            audio_id = order[positions[0]][0]
            raise UnsatisfiableConstraint(
                f"audio {audio_id!r} has {len(positions)} pairs but only {len(open_batches)} batches have room"
            )
        chosen = sorted(open_batches, key=lambda b: (-free[b], b))[: len(positions)]
        for b, p in zip(chosen, positions):
            members[b].append(p)
            free[b] -= 1
    b = 0
    for p in sorted(singles):
        while free[b] == 0:
            b += 1
        members[b].append(p)
        free[b] -= 1
    return [[order[p] for p in sorted(m)] for m in members]


def check_no_collisions(batches: Sequence[Sequence[tuple[str, CaptionRecord]]]) -> None:
    for i, batch in enumerate(batches):
        ids = [a for a, _ in batch]
        if len(set(ids)) != len(ids):
            raise AssertionError(f"batch {i} repeats an audio id")


# ---------------------------------------------------------------- optimiser


class Adam:
    """Plain Adam with bias correction over a dict of named float64 arrays."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        """Update ``params`` in place."""
        self.step_count += 1
        c1 = 1.0 - self.beta1**self.step_count
        c2 = 1.0 - self.beta2**self.step_count
        for name in sorted(grads):
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------- state


@dataclass
class TrainState:
    """Everything needed to continue training exactly where it stopped."""

    audio_head: ProjectionHead
    text_head: ProjectionHead
    encoder_params: dict[str, np.ndarray]
    optimizer: Adam
    epoch_index: int  # epochs completed
    config_hash: str
    meta: dict = field(default_factory=dict)

    @property
    def heads(self) -> tuple[ProjectionHead, ProjectionHead]:
        return self.audio_head, self.text_head

    def params(self) -> dict[str, np.ndarray]:
        out = {"audio.weight": self.audio_head.weight, "text.weight": self.text_head.weight}
        if self.audio_head.bias is not None:
            out["audio.bias"] = self.audio_head.bias
        if self.text_head.bias is not None:
            out["text.bias"] = self.text_head.bias
        out.update(self.encoder_params)
        return out


Checkpoint = TrainState


def heads_bytes(audio_head: ProjectionHead, text_head: ProjectionHead) -> bytes:
    """Serialise both heads as little-endian float32 behind a small header."""
    if audio_head.joint_dim != text_head.joint_dim:
        raise ValidationError("heads disagree on joint_dim")
    flags = int(audio_head.bias is not None) | (int(text_head.bias is not None) << 1)
    header = HEADS_MAGIC + struct.pack(
        "<5I", HEADS_VERSION, audio_head.joint_dim, audio_head.embed_dim, text_head.embed_dim, flags
    )
    parts = [header, np.ascontiguousarray(audio_head.weight, dtype="<f4").tobytes()]
    if audio_head.bias is not None:
        parts.append(np.ascontiguousarray(audio_head.bias, dtype="<f4").tobytes())
    parts.append(np.ascontiguousarray(text_head.weight, dtype="<f4").tobytes())
    if text_head.bias is not None:
        parts.append(np.ascontiguousarray(text_head.bias, dtype="<f4").tobytes())
    return b"".join(parts)


def read_heads(path: str | Path) -> tuple[ProjectionHead, ProjectionHead]:
    raw = Path(path).read_bytes()
    if raw[:4] != HEADS_MAGIC:
        raise IncompatibleCheckpoint(f"{path}: not a heads file")
    version, joint, a_dim, t_dim, flags = struct.unpack_from("<5I", raw, 4)
    if version != HEADS_VERSION:
        raise IncompatibleCheckpoint(f"{path}: unsupported heads version {version}")
    pos = 24

    def take(count: int) -> np.ndarray:
        nonlocal pos
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).astype(np.float64)
        pos += 4 * count
        return arr

    a_w = take(joint * a_dim).reshape(joint, a_dim)
    a_b = take(joint) if flags & 1 else None
    t_w = take(joint * t_dim).reshape(joint, t_dim)
    t_b = take(joint) if flags & 2 else None
    if pos != len(raw):
        raise IncompatibleCheckpoint(f"{path}: trailing bytes in heads file")
    return ProjectionHead(a_w, a_b, "audio"), ProjectionHead(t_w, t_b, "text")


def save_checkpoint(state: TrainState, directory: str | Path) -> Path:
    """Write ``heads.bin``, ``state.mls`` and ``checkpoint.json`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "heads.bin").write_bytes(heads_bytes(state.audio_head, state.text_head))
    arrays = {f"param/{k}": v for k, v in state.params().items()}
    arrays.update({f"adam_m/{k}": v for k, v in state.optimizer.m.items()})
    arrays.update({f"adam_v/{k}": v for k, v in state.optimizer.v.items()})
    meta = {
        "adam": {
            "lr": state.optimizer.lr,
            "beta1": state.optimizer.beta1,
            "beta2": state.optimizer.beta2,
            "eps": state.optimizer.eps,
            "step": state.optimizer.step_count,
        },
        "epoch_index": state.epoch_index,
        "config_hash": state.config_hash,
    }
    write_state(directory / "state.mls", arrays, meta)
    sidecar = dict(state.meta)
    sidecar.update(
        {
            "config_hash": state.config_hash,
            "epoch_index": state.epoch_index,
            "joint_dim": state.audio_head.joint_dim,
            "audio_embed_dim": state.audio_head.embed_dim,
            "text_embed_dim": state.text_head.embed_dim,
            # batch order and dropout masks are keyed by (seed, epoch)
            "rng": {"seed": sidecar.get("seed"), "next_epoch": state.epoch_index},
        }
    )
    (directory / "checkpoint.json").write_text(json.dumps(sidecar, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return directory


def load_checkpoint(directory: str | Path) -> TrainState:
    directory = Path(directory)
    try:
        arrays, meta = read_state(directory / "state.mls")
        sidecar = json.loads((directory / "checkpoint.json").read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise IncompatibleCheckpoint(f"{directory}: incomplete checkpoint ({exc.filename})") from None
    params = {k[len("param/") :]: v for k, v in arrays.items() if k.startswith("param/")}
    audio = ProjectionHead(params.pop("audio.weight"), params.pop("audio.bias", None), "audio")
    text = ProjectionHead(params.pop("text.weight"), params.pop("text.bias", None), "text")
    a = meta["adam"]
    opt = Adam(a["lr"], a["beta1"], a["beta2"], a["eps"])
    opt.step_count = a["step"]
    opt.m = {k[len("adam_m/") :]: v for k, v in arrays.items() if k.startswith("adam_m/")}
    opt.v = {k[len("adam_v/") :]: v for k, v in arrays.items() if k.startswith("adam_v/")}
    return TrainState(audio, text, params, opt, meta["epoch_index"], meta["config_hash"], sidecar)


# ---------------------------------------------------------------- loop


@dataclass(frozen=True)
class LossRecord:
    epoch: int
    batch: int
    loss: float
    loss_a2t: float
    loss_t2a: float


@dataclass
class TrainResult:
    state: TrainState
    history: list[LossRecord]
    audio_encoder: object
    text_encoder: object
    valid_map10: list[float] = field(default_factory=list)

    @property
    def checkpoint(self) -> TrainState:
        return self.state


def write_loss_csv(history: Sequence[LossRecord], path: str | Path, config_hash: str = "") -> None:
    """One row per step; floats use ``repr`` so the file round-trips exactly."""
    lines = []
    if config_hash:
        lines.append(f"# config_hash={config_hash}")
    lines.append(",".join(LOSS_COLUMNS))
    for r in history:
        lines.append(f"{r.epoch},{r.batch},{r.loss!r},{r.loss_a2t!r},{r.loss_t2a!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_loss_csv(path: str | Path) -> list[LossRecord]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line or line.startswith("#") or line.startswith("epoch,"):
            continue
        e, b, loss, a2t, t2a = line.split(",")
        out.append(LossRecord(int(e), int(b), float(loss), float(a2t), float(t2a)))
    return out


def _encoder_meta(audio_encoder, text_encoder) -> dict:
    return {
        "audio_encoder": audio_encoder.spec.name,
        "text_encoder": text_encoder.spec.name,
        "audio_embed_dim": audio_encoder.spec.embed_dim,
        "text_embed_dim": text_encoder.spec.embed_dim,
    }


def _check_compatible(state: TrainState, audio_encoder, text_encoder, cfg: TrainConfig | None = None) -> None:
    want = _encoder_meta(audio_encoder, text_encoder)
    for key, value in want.items():
        have = state.meta.get(key, value)
        if have != value:
            raise IncompatibleCheckpoint(f"checkpoint {key}={have!r}, current setup has {value!r}")
    if state.audio_head.embed_dim != audio_encoder.spec.embed_dim or state.text_head.embed_dim != text_encoder.spec.embed_dim:
        raise IncompatibleCheckpoint("head input sizes do not match the encoders")
    if cfg is not None and state.audio_head.joint_dim != cfg.joint_dim:
        raise IncompatibleCheckpoint(f"checkpoint joint_dim {state.audio_head.joint_dim} != configured {cfg.joint_dim}")
    extra = set(state.encoder_params) - set(audio_encoder.parameters())
    if extra:
        raise IncompatibleCheckpoint(f"checkpoint carries encoder weights the encoder lacks: {sorted(extra)}")


def apply_encoder_params(encoder, params: Mapping[str, np.ndarray]) -> None:
    """Point ``encoder.<attr>`` at ``params["audio_encoder.<attr>"]`` (shared, not copied)."""
    for name, arr in params.items():
        setattr(encoder, name.split(".", 1)[1], arr)


def _dropout_seed(seed: int, epoch: int, batch: int, row: int) -> int:
    return stable_hash(f"dropout/{seed}/{epoch}/{batch}/{row}") & 0x7FFF_FFFF_FFFF_FFFF


class _TextCache:
    """Memoised embeddings for a frozen text encoder."""

    def __init__(self, encoder):
        self.encoder = encoder
        self.store: dict[tuple[str, str], np.ndarray] = {}

    def __call__(self, captions: Sequence[CaptionRecord]) -> np.ndarray:
        todo = [c for c in captions if (c.text, c.language) not in self.store]
        if todo:
            unique = list({(c.text, c.language): c for c in todo}.values())
            vecs, _ = self.encoder.forward(unique)
            for c, v in zip(unique, np.asarray(vecs, dtype=np.float64)):
                self.store[(c.text, c.language)] = v
        return np.stack([self.store[(c.text, c.language)] for c in captions])


def train(
    manifest: DatasetManifest,
    table: TranslationTable,
    audio_encoder,
    text_encoder,
    cfg: TrainConfig,
    *,
    clip_loader: Callable[[str], PatchGrid],
    heads: tuple[ProjectionHead, ProjectionHead] | None = None,
    resume: TrainState | None = None,
    checkpoint_dir: str | Path | None = None,
    keep_every_epoch: bool = False,
    validate: Callable[[tuple[ProjectionHead, ProjectionHead], object], float] | None = None,
    dump_epoch_dir: str | Path | None = None,
    config_hash: str | None = None,
    learning_rate: float | None = None,
    fresh_optimizer: bool = False,
    log: Callable[[str], None] | None = None,
) -> TrainResult:
    """Run epochs ``state.epoch_index .. cfg.epochs - 1``.

    ``validate`` receives the current heads and audio encoder and returns
    a validation mAP@10; with a ``checkpoint_dir`` the best epoch is kept in
    ``best/`` and the latest in ``last/``.
    """
    config_hash = config_hash or cfg.digest()
    lr = cfg.learning_rate if learning_rate is None else learning_rate
    le = cfg.le.replace(seed=cfg.seed)
    trainable_audio = bool(audio_encoder.parameters())
    if trainable_audio:
        audio_encoder = copy.deepcopy(audio_encoder)
    if text_encoder.parameters():
        raise ValidationError(f"{text_encoder.spec.name}: trainable text encoders are not supported")
    meta = {**_encoder_meta(audio_encoder, text_encoder), "seed": cfg.seed, "prompt_style": le.prompt_style, "temperature": cfg.temperature}

    if resume is not None:
        _check_compatible(resume, audio_encoder, text_encoder, cfg)
        state = TrainState(
            resume.audio_head.copy(),
            resume.text_head.copy(),
            {**{k: v.copy() for k, v in audio_encoder.parameters().items()}, **{k: v.copy() for k, v in resume.encoder_params.items()}},
            Adam(lr, cfg.beta1, cfg.beta2, cfg.eps) if fresh_optimizer else copy.deepcopy(resume.optimizer),
            0 if fresh_optimizer else resume.epoch_index,
            config_hash,
            meta,
        )
        state.optimizer.lr = lr
    else:
        if heads is None:
            heads = (
                ProjectionHead.init("audio", audio_encoder.spec.embed_dim, cfg.joint_dim, cfg.seed, cfg.use_bias),
                ProjectionHead.init("text", text_encoder.spec.embed_dim, cfg.joint_dim, cfg.seed, cfg.use_bias),
            )
        state = TrainState(
            heads[0].copy(),
            heads[1].copy(),
            {k: v.copy() for k, v in audio_encoder.parameters().items()},
            Adam(lr, cfg.beta1, cfg.beta2, cfg.eps),
            0,
            config_hash,
            meta,
        )
    # the encoder object shares arrays with the state so updates reach it
    apply_encoder_params(audio_encoder, state.encoder_params)

    text_cache = _TextCache(text_encoder)
    history: list[LossRecord] = []
    valid_scores: list[float] = []
    best = -np.inf
    if checkpoint_dir is not None and resume is not None and not fresh_optimizer:
        best = float(resume.meta.get("best_map10", -np.inf))

    for epoch in range(state.epoch_index, cfg.epochs):
        sample = sample_epoch(manifest, table, le, epoch)
        if dump_epoch_dir is not None:
            Path(dump_epoch_dir).mkdir(parents=True, exist_ok=True)
            sample.write_jsonl(Path(dump_epoch_dir) / f"epoch-{epoch:04d}.jsonl")
        batches = make_batches(sample, cfg.batch_size, cfg.seed, epoch, cfg.allow_audio_collisions)
        for b, batch in enumerate(batches):
            grids = [
                patch_dropout(clip_loader(audio_id), cfg.dropout_rate, _dropout_seed(cfg.seed, epoch, b, i), True, cfg.dropout_mode)
                for i, (audio_id, _) in enumerate(batch)
            ]
            e_a, pooled = audio_encoder.forward(grids)
            e_t = text_cache([annotate_prompt(cap, le.prompt_style) for _, cap in batch])
            try:
                res = info_nce_gradient(e_a, e_t, state.audio_head, state.text_head, cfg.temperature, input_grads=trainable_audio)
            except (NonFinite, ZeroNormRow) as exc:
                if checkpoint_dir is not None:
                    save_checkpoint(state, Path(checkpoint_dir) / "diverged")
                raise DivergedLoss(f"epoch {epoch} batch {b}: {exc}") from exc
            grads = dict(res.grads)
            if trainable_audio:
                grads.update(audio_encoder.backward(pooled, res.grad_audio_emb))
            for g in grads.values():
                if not np.all(np.isfinite(g)):
                    if checkpoint_dir is not None:
                        save_checkpoint(state, Path(checkpoint_dir) / "diverged")
                    raise DivergedLoss(f"epoch {epoch} batch {b}: non-finite gradient")
            state.optimizer.step(state.params(), grads)
            history.append(LossRecord(epoch, b, res.loss, *res.per_direction))
        state.epoch_index = epoch + 1
        if log is not None:
            losses = [r.loss for r in history if r.epoch == epoch]
            log(f"epoch {epoch + 1}/{cfg.epochs}: mean loss {np.mean(losses):.6f} over {len(losses)} batches")
        score = None
        if validate is not None:
            score = float(validate(state.heads, audio_encoder))
            valid_scores.append(score)
        if checkpoint_dir is not None:
            root = Path(checkpoint_dir)
            if score is not None and score > best:
                best = score
                state.meta["best_map10"] = best
                state.meta["best_epoch"] = epoch + 1
                save_checkpoint(state, root / "best")
            save_checkpoint(state, root / "last")
            if keep_every_epoch:
                save_checkpoint(state, root / f"epoch-{epoch + 1:04d}")
    if checkpoint_dir is not None:
        root = Path(checkpoint_dir)
        save_checkpoint(state, root / "last")
        if validate is None and not (root / "best").exists():
            shutil.copytree(root / "last", root / "best")
    return TrainResult(state, history, audio_encoder, text_encoder, valid_scores)


def finetune(
    checkpoint: TrainState,
    manifest: DatasetManifest,
    table: TranslationTable,
    audio_encoder,
    text_encoder,
    cfg: TrainConfig,
    **kwargs,
) -> TrainResult:
    """Continue from ``checkpoint`` at the fine-tune rate with fresh Adam moments."""
    return train(
        manifest,
        table,
        audio_encoder,
        text_encoder,
        cfg,
        resume=checkpoint,
        learning_rate=cfg.finetune_learning_rate,
        fresh_optimizer=True,
        **kwargs,
    )
