"""Joint-space projections, cosine similarity and the bidirectional InfoNCE loss.

Conventions used throughout:

* ``a`` is the ``[N, joint_dim]`` matrix of projected audio vectors, ``t`` the
  matching text matrix; row ``i`` of both is the positive pair.
* ``s[i, j] = cos(a_i, t_j)``, so rows are audio queries and columns text.
* The loss is the batch mean of the *sum* of the two directional terms, so a
  constant similarity matrix gives ``2 * ln(N)``.  Several CLAP codebases halve
  this; we do not.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from mlatr.errors import NonFinite, NonSquare, ShapeMismatch, ZeroNormRow

DEFAULT_TEMPERATURE = 0.07

Side = Literal["audio", "text"]


@dataclass
class ProjectionHead:
    """Affine map ``x -> weight @ x + bias`` into the joint space.

    ``bias`` is ``None`` for a strictly linear head.
    """

    weight: np.ndarray  # [joint_dim, embed_dim]
    bias: np.ndarray | None  # [joint_dim]
    side: Side

    def __post_init__(self) -> None:
        self.weight = np.asarray(self.weight, dtype=np.float64)
        if self.weight.ndim != 2:
            raise ShapeMismatch(f"{self.side} head weight must be 2-D, got {self.weight.shape}")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64)
            if self.bias.shape != (self.weight.shape[0],):
                raise ShapeMismatch(
                    f"{self.side} head bias shape {self.bias.shape} does not match "
                    f"joint_dim {self.weight.shape[0]}"
                )
        if not np.all(np.isfinite(self.weight)) or (
            self.bias is not None and not np.all(np.isfinite(self.bias))
        ):
            raise NonFinite(f"{self.side} head has non-finite parameters")

    @property
    def joint_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.weight.shape[1]

    @classmethod
    def init(
        cls,
        side: Side,
        embed_dim: int,
        joint_dim: int,
        seed: int,
        use_bias: bool = True,
    ) -> ProjectionHead:
        """Fan-in uniform init, zero bias; deterministic in ``seed``."""
        stream = 0 if side == "audio" else 1
        rng = np.random.default_rng([seed, 0x9E17, stream])
        bound = 1.0 / np.sqrt(embed_dim)
        weight = rng.uniform(-bound, bound, size=(joint_dim, embed_dim))
        bias = np.zeros(joint_dim) if use_bias else None
        return cls(weight=weight, bias=bias, side=side)

    def copy(self) -> ProjectionHead:
        return ProjectionHead(
            weight=self.weight.copy(),
            bias=None if self.bias is None else self.bias.copy(),
            side=self.side,
        )


@dataclass(frozen=True)
class ProjectedBatch:
    a: np.ndarray
    t: np.ndarray
    ids: tuple[str, ...] = field(default=())

    def __post_init__(self) -> None:
        if self.a.ndim != 2 or self.a.shape != self.t.shape:
            raise ShapeMismatch(f"audio {self.a.shape} and text {self.t.shape} batches differ")
        if self.a.shape[0] < 1:
            raise ShapeMismatch("empty batch")
        if self.ids and len(self.ids) != self.a.shape[0]:
            raise ShapeMismatch("ids not aligned with rows")

    def similarity(self) -> np.ndarray:
        return similarity_matrix(self.a, self.t)


def project(head: ProjectionHead, emb: np.ndarray) -> np.ndarray:
    emb = np.asarray(emb, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[1] != head.embed_dim:
        raise ShapeMismatch(
            f"{head.side} head expects [N, {head.embed_dim}] input, got {emb.shape}"
        )
    out = emb @ head.weight.T
    if head.bias is not None:
        out = out + head.bias
    if not np.all(np.isfinite(out)):
        raise NonFinite(f"non-finite {head.side} projection")
    return out


def _row_norms(x: np.ndarray, side: str) -> np.ndarray:
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise ZeroNormRow(side, int(zero[0]))
    return norms


def similarity_matrix(a: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Cosine similarity ``s[i, j] = <a_i, t_j> / (|a_i| |t_j|)``, clamped to [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if a.ndim != 2 or t.ndim != 2 or a.shape[1] != t.shape[1]:
        raise ShapeMismatch(f"cannot compare {a.shape} with {t.shape}")
    a_hat = a / _row_norms(a, "audio")[:, None]
    t_hat = t / _row_norms(t, "text")[:, None]
    return np.clip(a_hat @ t_hat.T, -1.0, 1.0)


def _neg_log_softmax_diag(z: np.ndarray) -> np.ndarray:
    """Per-row ``-log softmax(z[i])[i]``, accurate when the diagonal dominates.

    Written as ``log(1 + sum_{j != i} exp(z_ij - z_ii))`` so a near-zero term
    is not the difference of two large log-sum-exps.
    """
    d = z - np.diagonal(z)[:, None]
    np.fill_diagonal(d, -np.inf)
    m = np.maximum(d.max(axis=1), 0.0)
    rest = np.exp(d - m[:, None]).sum(axis=1)
    with np.errstate(over="ignore"):
        return np.where(m > 0, m + np.log(np.exp(-m) + rest), np.log1p(rest))


def _check_square(s: np.ndarray, temperature: float) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1] or s.shape[0] < 1:
        raise NonSquare(f"similarity matrix must be square and non-empty, got {s.shape}")
    if not np.all(np.isfinite(s)):
        raise NonFinite("similarity matrix has non-finite entries")
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    return s


def info_nce(
    s: np.ndarray, temperature: float = DEFAULT_TEMPERATURE
) -> tuple[float, tuple[float, float]]:
    """Bidirectional InfoNCE.

    Returns ``(loss, (audio_to_text, text_to_audio))`` where each directional
    value is the batch mean of its per-query term and ``loss`` is their sum.
    """
    s = _check_square(s, temperature)
    z = s / temperature
    a2t = _neg_log_softmax_diag(z).mean()
    t2a = _neg_log_softmax_diag(z.T).mean()
    loss = a2t + t2a
    if not np.isfinite(loss):
        raise NonFinite("InfoNCE loss is not finite")
    return float(loss), (float(a2t), float(t2a))


@dataclass
class LossAndGrads:
    loss: float
    per_direction: tuple[float, float]
    similarity: np.ndarray
    grads: dict[str, np.ndarray]
    grad_audio_emb: np.ndarray | None = None
    grad_text_emb: np.ndarray | None = None


def _normalize_backward(x: np.ndarray, x_hat: np.ndarray, norms: np.ndarray, g: np.ndarray) -> np.ndarray:
    # d(x/|x|)^T g  =  (g - x_hat <x_hat, g>) / |x|
    dot = np.einsum("ij,ij->i", x_hat, g)
    return (g - x_hat * dot[:, None]) / norms[:, None]


def info_nce_gradient(
    audio_emb: np.ndarray,
    text_emb: np.ndarray,
    audio_head: ProjectionHead,
    text_head: ProjectionHead,
    temperature: float = DEFAULT_TEMPERATURE,
    input_grads: bool = False,
) -> LossAndGrads:
    """Loss and hand-derived gradients for the whole projection/cosine/InfoNCE chain.

    Gradient keys: ``audio.weight``, ``audio.bias``, ``text.weight``,
    ``text.bias`` (bias keys absent for bias-free heads).  With
    ``input_grads=True`` the gradients w.r.t. the encoder outputs are returned
    too, for trainable encoders.
    """
    a = project(audio_head, audio_emb)
    t = project(text_head, text_emb)
    n = a.shape[0]
    if t.shape[0] != n:
        raise ShapeMismatch(f"{n} audio rows vs {t.shape[0]} text rows")
    a_norm = _row_norms(a, "audio")
    t_norm = _row_norms(t, "text")
    a_hat = a / a_norm[:, None]
    t_hat = t / t_norm[:, None]
    s = np.clip(a_hat @ t_hat.T, -1.0, 1.0)
    loss, per_dir = info_nce(s, temperature)

    z = s / temperature
    p_row = np.exp(z - z.max(axis=1, keepdims=True))
    p_row /= p_row.sum(axis=1, keepdims=True)
    p_col = np.exp(z - z.max(axis=0, keepdims=True))
    p_col /= p_col.sum(axis=0, keepdims=True)
    eye = np.eye(n)
    g_s = (p_row - eye + p_col - eye) / (n * temperature)

    g_a = _normalize_backward(a, a_hat, a_norm, g_s @ t_hat)
    g_t = _normalize_backward(t, t_hat, t_norm, g_s.T @ a_hat)

    e_a = np.asarray(audio_emb, dtype=np.float64)
    e_t = np.asarray(text_emb, dtype=np.float64)
    grads = {"audio.weight": g_a.T @ e_a, "text.weight": g_t.T @ e_t}
    if audio_head.bias is not None:
        grads["audio.bias"] = g_a.sum(axis=0)
    if text_head.bias is not None:
        grads["text.bias"] = g_t.sum(axis=0)
    out = LossAndGrads(loss=loss, per_direction=per_dir, similarity=s, grads=grads)
    if input_grads:
        out.grad_audio_emb = g_a @ audio_head.weight
        out.grad_text_emb = g_t @ text_head.weight
    return out


def head_loss(
    audio_emb: np.ndarray,
    text_emb: np.ndarray,
    audio_head: ProjectionHead,
    text_head: ProjectionHead,
    temperature: float = DEFAULT_TEMPERATURE,
) -> float:
    """Forward-only loss for the full chain."""
    s = similarity_matrix(project(audio_head, audio_emb), project(text_head, text_emb))
    return info_nce(s, temperature)[0]
