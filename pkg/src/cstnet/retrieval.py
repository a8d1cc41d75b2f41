"""Recall@K for speech->text and text->speech retrieval."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .dsp import _atomic_write

SPEECH_TO_TEXT = "speech->text"
TEXT_TO_SPEECH = "text->speech"
DEFAULT_KS = (1, 5, 10)


@dataclass
class RetrievalReport:
    direction: str
    recall_at: dict[int, float]
    n: int


def rank_of_truth(s: np.ndarray, direction: str = SPEECH_TO_TEXT) -> np.ndarray:
    """1-based rank of the paired item for every query.

    ``s[i, j]`` scores audio i against text j.  Ties are broken by ascending
    index, with the true item treated like any other candidate.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ValueError(f"similarity matrix must be square, got {s.shape}")
    if direction == TEXT_TO_SPEECH:
        s = s.T
    elif direction != SPEECH_TO_TEXT:
        raise ValueError(f"unknown direction {direction!r}")
    n = s.shape[0]
    truth = np.diag(s)[:, None]
    above = (s > truth).sum(axis=1)
    earlier_ties = ((s == truth) & (np.arange(n)[None, :] < np.arange(n)[:, None])).sum(axis=1)
    return 1 + above + earlier_ties


def recall_at_k(ranks, k: int) -> float:
    ranks = np.asarray(ranks)
    if k < 1:
        raise ValueError("k must be >= 1")
    if ranks.size == 0:
        raise ValueError("empty rank list")
    return float(np.mean(ranks <= k))


def retrieval_scores(audio_emb: np.ndarray, text_emb: np.ndarray) -> np.ndarray:
    return np.asarray(audio_emb, dtype=np.float64) @ np.asarray(text_emb, dtype=np.float64).T


def evaluate(audio_emb: np.ndarray, text_emb: np.ndarray, ks=DEFAULT_KS) -> list[RetrievalReport]:
    s = retrieval_scores(audio_emb, text_emb)
    reports = []
    for direction in (SPEECH_TO_TEXT, TEXT_TO_SPEECH):
        ranks = rank_of_truth(s, direction)
        reports.append(RetrievalReport(direction, {k: recall_at_k(ranks, k) for k in ks}, len(ranks)))
    return reports


def write_report_csv(path, reports: list[RetrievalReport]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["direction", "R@10", "R@5", "R@1"])
    for r in reports:
        w.writerow([r.direction, repr(r.recall_at[10]), repr(r.recall_at[5]), repr(r.recall_at[1])])
    _atomic_write(path, buf.getvalue().encode())
