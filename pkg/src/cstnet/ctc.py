"""CTC loss, greedy decoding, PER, and the frozen-feature linear probe."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .dsp import FeatureMatrix, _atomic_write
from .encoders import N_LAYERS, Encoder
from .trainer import adam_step

log = logging.getLogger(__name__)

BLANK = 0
NEG_INF = -np.inf


@dataclass
class PhoneVocab:
    symbols: list[str]

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("phone symbols must be unique")
        if "<blank>" in self.symbols:
            raise ValueError("'<blank>' is reserved")
        self._index = {s: i + 1 for i, s in enumerate(self.symbols)}

    @property
    def size(self) -> int:
        """Output classes including blank."""
        return len(self.symbols) + 1

    def encode(self, phones) -> list[int]:
        try:
            return [self._index[p] for p in phones]
        except KeyError as exc:
            raise ValueError(f"unknown phone {exc.args[0]!r}") from None

    def decode(self, ids) -> list[str]:
        return [self.symbols[i - 1] for i in ids]

    @classmethod
    def from_sequences(cls, seqs) -> "PhoneVocab":
        return cls(sorted({p for s in seqs for p in s}))


def min_frames(labels) -> int:
    """Fewest frames that can emit ``labels`` (repeats need a blank between)."""
    labels = list(labels)
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def _extend(labels) -> np.ndarray:
    ext = np.full(2 * len(labels) + 1, BLANK, dtype=np.int64)
    ext[1::2] = labels
    return ext


def ctc_loss_batch(log_probs: list[np.ndarray], labels: list[list[int]]):
    """Negative log-likelihoods and gradients w.r.t. each log-prob matrix.

    Forward (alpha) and backward (beta) recursions run in the log domain over
    the blank-extended label, vectorised over the batch.
    """
    bsz = len(log_probs)
    lens = np.array([lp.shape[0] for lp in log_probs])
    n_cls = log_probs[0].shape[1]
    for lp, lab in zip(log_probs, labels):
        if lp.ndim != 2 or lp.shape[1] != n_cls:
            raise ValueError("log_probs must be T x (P+1) with a common class count")
        if any(l == BLANK or not 0 < l < n_cls for l in lab):
            raise ValueError("labels must be non-blank class indices")
        if lp.shape[0] < min_frames(lab):
            raise ValueError(f"label of length {len(lab)} is not alignable in {lp.shape[0]} frames")
    t_max = int(lens.max())
    s_lens = np.array([2 * len(l) + 1 for l in labels])
    s_max = int(s_lens.max())
    ext = np.zeros((bsz, s_max), dtype=np.int64)
    for b, lab in enumerate(labels):
        ext[b, : s_lens[b]] = _extend(lab)
    lp = np.zeros((bsz, t_max, n_cls))
    for b, x in enumerate(log_probs):
        lp[b, : x.shape[0]] = x
    emit = np.take_along_axis(lp, np.broadcast_to(ext[:, None, :], (bsz, t_max, s_max)), axis=2)  # [B, T, S]
    s_idx = np.arange(s_max)
    valid_s = s_idx[None, :] < s_lens[:, None]
    # skip transition s-2 -> s allowed for labels differing from the one two back
    skip = np.zeros((bsz, s_max), dtype=bool)
    skip[:, 2:] = (ext[:, 2:] != BLANK) & (ext[:, 2:] != ext[:, :-2])

    alpha = np.full((bsz, t_max, s_max), NEG_INF)
    alpha[:, 0, 0] = emit[:, 0, 0]
    if s_max > 1:
        alpha[:, 0, 1] = np.where(s_lens > 1, emit[:, 0, 1], NEG_INF)
    for t in range(1, t_max):
        prev = alpha[:, t - 1]
        acc = prev.copy()
        acc[:, 1:] = np.logaddexp(acc[:, 1:], prev[:, :-1])
        acc[:, 2:] = np.where(skip[:, 2:], np.logaddexp(acc[:, 2:], prev[:, :-2]), acc[:, 2:])
        alpha[:, t] = np.where(valid_s, acc + emit[:, t], NEG_INF)

    b_idx = np.arange(bsz)
    last = alpha[b_idx, lens - 1]
    end1 = last[b_idx, s_lens - 1]
    end2 = np.where(s_lens > 1, last[b_idx, np.maximum(s_lens - 2, 0)], NEG_INF)
    log_like = np.logaddexp(end1, end2)

    beta = np.full((bsz, t_max, s_max), NEG_INF)
    init = np.full((bsz, s_max), NEG_INF)
    init[b_idx, s_lens - 1] = 0.0
    has2 = s_lens > 1
    init[b_idx[has2], s_lens[has2] - 2] = 0.0
    nxt = np.full((bsz, s_max), NEG_INF)
    for t in range(t_max - 1, -1, -1):
        acc = nxt.copy()
        acc[:, :-1] = np.logaddexp(acc[:, :-1], nxt[:, 1:])
        acc[:, :-2] = np.where(skip[:, 2:], np.logaddexp(acc[:, :-2], nxt[:, 2:]), acc[:, :-2])
        at_end = (t == lens - 1)[:, None]
        inside = (t < lens - 1)[:, None]
        cur = np.where(at_end, init, np.where(inside, acc, NEG_INF))
        cur = np.where(valid_s, cur + emit[:, t], NEG_INF)
        beta[:, t] = cur
        nxt = cur

    with np.errstate(invalid="ignore"):
        post = np.exp(alpha + beta - emit - log_like[:, None, None])
    post = np.nan_to_num(post, nan=0.0)
    onehot = np.zeros((bsz, s_max, n_cls))
    np.put_along_axis(onehot, ext[:, :, None], valid_s[:, :, None].astype(float), axis=2)
    grad = -(post @ onehot)
    losses = -log_like
    return losses, [grad[b, : lens[b]] for b in range(bsz)]


def ctc_loss(log_probs: np.ndarray, labels) -> tuple[float, np.ndarray]:
    losses, grads = ctc_loss_batch([np.asarray(log_probs, dtype=np.float64)], [list(labels)])
    return float(losses[0]), grads[0]


def best_path_decode(log_probs: np.ndarray) -> list[int]:
    best = np.argmax(np.asarray(log_probs), axis=1)
    out = []
    prev = None
    for k in best.tolist():
        if k != prev and k != BLANK:
            out.append(k)
        prev = k
    return out


def edit_distance(ref, hyp) -> int:
    ref, hyp = list(ref), list(hyp)
    row = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        prev_diag, row[0] = row[0], i
        for j, h in enumerate(hyp, 1):
            cur = min(row[j] + 1, row[j - 1] + 1, prev_diag + (r != h))
            prev_diag, row[j] = row[j], cur
    return row[-1]


def phone_error_rate(refs, hyps) -> float:
    """Corpus PER: summed edit distance over summed reference length."""
    refs, hyps = list(refs), list(hyps)
    if len(refs) != len(hyps):
        raise ValueError("reference and hypothesis counts differ")
    total = sum(len(r) for r in refs)
    if total == 0:
        raise ValueError("empty reference corpus")
    return sum(edit_distance(r, h) for r, h in zip(refs, hyps)) / total


@dataclass
class ProbeConfig:
    lr: float = 1e-3
    epochs: int = 40
    batch_size: int = 16
    seed: int = 0


@dataclass
class ProbeModel:
    weight: ad.Parameter  # [D, P+1]
    bias: ad.Parameter  # [P+1]
    layer: int
    mean: np.ndarray
    std: np.ndarray

    def log_probs(self, feats: np.ndarray) -> np.ndarray:
        z = ((feats - self.mean) / self.std) @ self.weight.data + self.bias.data
        z = z - z.max(axis=1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


@dataclass
class ProbeReport:
    layer: int
    per: float
    n_train: int
    n_test: int
    skipped_train: int
    skipped_test: int
    hypotheses: list[list[int]] = field(default_factory=list)
    final_loss: float = math.nan


def alignable(n_frames: int, labels) -> bool:
    """Conservative probe filter: T' >= 2L + 1."""
    return n_frames >= 2 * len(labels) + 1


def _split_alignable(feats: list[np.ndarray], labels: list[list[int]]):
    keep = [i for i, (f, l) in enumerate(zip(feats, labels)) if alignable(f.shape[0], l)]
    return [feats[i] for i in keep], [labels[i] for i in keep], len(feats) - len(keep)


def fit_probe(
    feats: list[np.ndarray], labels: list[list[int]], n_classes: int, layer: int, cfg: ProbeConfig
) -> tuple[ProbeModel, float]:
    stacked = np.concatenate(feats, axis=0)
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    std = np.where(std < 1e-8, 1.0, std)
    normed = [(f - mean) / std for f in feats]
    dim = stacked.shape[1]
    w = ad.Parameter(np.zeros((dim, n_classes)), "probe.weight", decay=False, dtype=np.float64)
    b = ad.Parameter(np.zeros(n_classes), "probe.bias", decay=False, dtype=np.float64)
    rng = np.random.default_rng(cfg.seed)
    step = 0
    epoch_loss = math.nan
    for _ in range(cfg.epochs):
        order = rng.permutation(len(normed))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            x = np.concatenate([normed[i] for i in idx], axis=0)
            bounds = np.cumsum([0] + [normed[i].shape[0] for i in idx])
            lp = ad.log_softmax(ad.add(ad.matmul(ad.Tensor(x), w), b))
            chunks = [lp.data[bounds[k] : bounds[k + 1]] for k in range(len(idx))]
            losses, grads = ctc_loss_batch(chunks, [labels[i] for i in idx])
            loss = ad.custom(lp, float(losses.sum()) / len(idx), np.concatenate(grads, axis=0) / len(idx), "ctc")
            w.zero_grad()
            b.zero_grad()
            loss.backward()
            step += 1
            adam_step([w, b], cfg.lr, step)
            total += float(losses.sum())
        epoch_loss = total / len(normed)
    return ProbeModel(w, b, layer, mean, std), epoch_loss


def _layer_arrays(enc: Encoder | None, feats: list[FeatureMatrix], layers) -> dict[int, list[np.ndarray]]:
    from .abx import layer_features

    out = {}
    if 0 in layers:
        out[0] = [f.valid().astype(np.float64) for f in feats]
    enc_layers = [l for l in layers if l != 0]
    if enc_layers:
        if enc is None:
            raise ValueError("an encoder is required for layers > 0")
        per_layer = layer_features(enc, feats)
        for l in enc_layers:
            out[l] = [m.data for m in per_layer[l - 1]]
    return out


def train_probe(
    enc: Encoder | None,
    layers,
    train: list[tuple[FeatureMatrix, list[str]]],
    test: list[tuple[FeatureMatrix, list[str]]],
    vocab: PhoneVocab,
    cfg: ProbeConfig | None = None,
) -> list[tuple[ProbeModel | None, ProbeReport]]:
    """Fit one linear CTC probe per layer on frozen features and score PER.

    Layer 0 probes the input features.  The encoder is run in eval mode only
    and its parameters are checked to be untouched.
    """
    cfg = cfg or ProbeConfig()
    layers = list(layers)
    for l in layers:
        if not 0 <= l <= N_LAYERS:
            raise ValueError(f"layer index {l} out of range 0..{N_LAYERS}")
    before = enc.fingerprint() if enc is not None else None
    train_lab = [vocab.encode(p) for _, p in train]
    test_lab = [vocab.encode(p) for _, p in test]
    train_x = _layer_arrays(enc, [f for f, _ in train], layers)
    test_x = _layer_arrays(enc, [f for f, _ in test], layers)
    results = []
    for l in layers:
        tr_f, tr_l, tr_skip = _split_alignable(train_x[l], train_lab)
        te_f, te_l, te_skip = _split_alignable(test_x[l], test_lab)
        if tr_skip or te_skip:
            log.warning("layer %d: skipped %d train / %d test unalignable utterances", l, tr_skip, te_skip)
        if not tr_f or not te_f:
            results.append((None, ProbeReport(l, math.nan, len(tr_f), len(te_f), tr_skip, te_skip)))
            continue
        model, final_loss = fit_probe(tr_f, tr_l, vocab.size, l, cfg)
        hyps = [best_path_decode(model.log_probs(f)) for f in te_f]
        per = phone_error_rate(te_l, hyps)
        results.append((model, ProbeReport(l, per, len(tr_f), len(te_f), tr_skip, te_skip, hyps, final_loss)))
    if enc is not None and enc.fingerprint() != before:
        raise RuntimeError("encoder parameters changed during probing")
    return results


def write_per_csv(path, reports: list[ProbeReport]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "PER", "n_test", "skipped_train", "skipped_test"])
    for r in reports:
        w.writerow([f"L{r.layer}" if r.layer else "input", repr(r.per), r.n_test, r.skipped_train, r.skipped_test])
    _atomic_write(path, buf.getvalue().encode())


def read_phone_tsv(path) -> dict[str, list[str]]:
    """utt_id<TAB>space-separated phones (extra middle columns ignored)."""
    out: dict[str, list[str]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) < 2:
                raise ValueError(f"{path}:{lineno}: expected at least 2 columns")
            if cols[0] in out:
                raise ValueError(f"{path}:{lineno}: duplicate utt_id {cols[0]!r}")
            out[cols[0]] = cols[-1].split()
    return out


def evaluate_probe(
    model: ProbeModel, enc: Encoder | None, data: list[tuple[FeatureMatrix, list[str]]], vocab: PhoneVocab
) -> ProbeReport:
    labels = [vocab.encode(p) for _, p in data]
    feats = _layer_arrays(enc, [f for f, _ in data], [model.layer])[model.layer]
    feats, labels, skipped = _split_alignable(feats, labels)
    if not feats:
        raise ValueError("no alignable utterances to score")
    hyps = [best_path_decode(model.log_probs(f)) for f in feats]
    return ProbeReport(model.layer, phone_error_rate(labels, hyps), 0, len(feats), 0, skipped, hyps)


def save_probe(path, model: ProbeModel, vocab: PhoneVocab) -> None:
    buf = io.BytesIO()
    np.savez(
        buf,
        weight=model.weight.data,
        bias=model.bias.data,
        mean=model.mean,
        std=model.std,
        layer=np.array(model.layer),
        symbols=np.array(vocab.symbols),
    )
    _atomic_write(path, buf.getvalue())


def load_probe(path) -> tuple[ProbeModel, PhoneVocab]:
    with np.load(path, allow_pickle=False) as z:
        vocab = PhoneVocab([str(s) for s in z["symbols"]])
        w = ad.Parameter(z["weight"], "probe.weight", decay=False, dtype=np.float64)
        b = ad.Parameter(z["bias"], "probe.bias", decay=False, dtype=np.float64)
        model = ProbeModel(w, b, int(z["layer"]), z["mean"], z["std"])
    if w.shape != (model.mean.shape[0], vocab.size):
        raise ValueError(f"{path}: probe weight shape {w.shape} does not match its vocabulary")
    return model, vocab
