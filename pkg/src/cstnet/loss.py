"""Triplet objectives over a batch of paired audio/text embeddings.

All scores are raw inner products ``t_j . a_k`` and the margin is fixed at 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

MARGIN = 1.0


@dataclass
class BatchEmbeddings:
    audio: ad.Tensor  # [B, D]
    text: ad.Tensor  # [B, D]

    def __post_init__(self):
        self.audio = self.audio if isinstance(self.audio, ad.Tensor) else ad.Tensor(self.audio)
        self.text = self.text if isinstance(self.text, ad.Tensor) else ad.Tensor(self.text)
        if self.audio.data.ndim != 2 or self.audio.shape != self.text.shape:
            raise ValueError(f"embedding shapes disagree: audio {self.audio.shape}, text {self.text.shape}")
        if self.size < 2:
            raise ValueError("need a batch of at least 2 pairs")
        if not (np.all(np.isfinite(self.audio.data)) and np.all(np.isfinite(self.text.data))):
            raise ValueError("non-finite embeddings")

    @property
    def size(self) -> int:
        return self.audio.shape[0]


@dataclass
class LossBreakdown:
    l_s: float
    l_h: float
    total: float
    impostor_indices: tuple[np.ndarray, np.ndarray]
    empty_candidate_counts: tuple[int, int]
    tensor: ad.Tensor


def similarity_matrix(batch: BatchEmbeddings) -> ad.Tensor:
    """S[j, k] = t_j . a_k."""
    return ad.matmul(batch.text, ad.transpose(batch.audio))


def _hinge_sum(sim: ad.Tensor, rows, cols, keep=None) -> ad.Tensor:
    n = sim.shape[0]
    diag = np.arange(n)
    neg = ad.gather2d(sim, rows, cols)
    pos = ad.gather2d(sim, diag, diag)
    hinge = ad.relu(ad.add_scalar(ad.sub(neg, pos), MARGIN))
    if keep is not None:
        hinge = ad.mul(hinge, ad.Tensor(keep.astype(sim.dtype)))
    return ad.sum_all(hinge)


def sample_impostors(n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Uniform draws from {0..n-1} minus j, independently for audio and text."""
    if n < 2:
        raise ValueError("need a batch of at least 2 pairs")
    j = np.arange(n)
    audio_imp = rng.integers(0, n - 1, size=n)
    audio_imp = audio_imp + (audio_imp >= j)
    text_imp = rng.integers(0, n - 1, size=n)
    text_imp = text_imp + (text_imp >= j)
    return audio_imp, text_imp


def _sampled(sim: ad.Tensor, audio_imp: np.ndarray, text_imp: np.ndarray) -> ad.Tensor:
    j = np.arange(sim.shape[0])
    return ad.add(_hinge_sum(sim, j, audio_imp), _hinge_sum(sim, text_imp, j))


def sampled_triplet_loss(batch: BatchEmbeddings, rng: np.random.Generator):
    sim = similarity_matrix(batch)
    audio_imp, text_imp = sample_impostors(batch.size, rng)
    return _sampled(sim, audio_imp, text_imp), (audio_imp, text_imp)


def semihard_indices(s: np.ndarray):
    """Most similar impostor still scoring strictly below the positive.

    Returns (audio_idx, audio_ok, text_idx, text_ok); ties go to the lowest
    index, and ``*_ok`` is False where the candidate set is empty.
    """
    pos = np.diag(s)
    # audio side: candidates a_k with S[j, k] < S[j, j]
    cand_a = s < pos[:, None]
    masked_a = np.where(cand_a, s, -np.inf)
    audio_idx = np.argmax(masked_a, axis=1)
    audio_ok = cand_a.any(axis=1)
    # text side: candidates t_k with S[k, j] < S[j, j]
    cand_t = s < pos[None, :]
    masked_t = np.where(cand_t, s, -np.inf)
    text_idx = np.argmax(masked_t, axis=0)
    text_ok = cand_t.any(axis=0)
    return audio_idx, audio_ok, text_idx, text_ok


def _semihard(sim: ad.Tensor):
    audio_idx, audio_ok, text_idx, text_ok = semihard_indices(sim.data)
    j = np.arange(sim.shape[0])
    loss = ad.add(
        _hinge_sum(sim, j, audio_idx, audio_ok),
        _hinge_sum(sim, text_idx, j, text_ok),
    )
    return loss, (int((~audio_ok).sum()), int((~text_ok).sum()))


def semihard_triplet_loss(batch: BatchEmbeddings):
    return _semihard(similarity_matrix(batch))


def total_loss(batch: BatchEmbeddings, rng: np.random.Generator) -> LossBreakdown:
    sim = similarity_matrix(batch)
    audio_imp, text_imp = sample_impostors(batch.size, rng)
    l_s = _sampled(sim, audio_imp, text_imp)
    l_h, empty = _semihard(sim)
    total = ad.add(l_s, l_h)
    ls_val, lh_val = float(l_s.data), float(l_h.data)
    return LossBreakdown(ls_val, lh_val, ls_val + lh_val, (audio_imp, text_imp), empty, total)
