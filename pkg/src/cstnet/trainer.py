"""Joint training of the audio and text encoders.

Checkpoint layout (little-endian)::

    b"CSTN" | u32 version=1 | u32 tensor count
    per tensor: u16 name length | UTF-8 name | u8 rank | u32 dims... | f32 payload
    trailer:    u32 epoch | u64 adam step | u32 json length | UTF-8 JSON
                (config snapshot and PRNG state)
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .dsp import FeatureMatrix, _atomic_write
from .encoders import MIN_FRAMES, Encoder, EncoderConfig, pad_batch
from .loss import BatchEmbeddings, total_loss

log = logging.getLogger(__name__)

CKPT_MAGIC = b"CSTN"
CKPT_VERSION = 1
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr0: float = 0.001
    decay_factor: float = 0.95
    decay_every_epochs: int = 3
    weight_decay: float = 5e-7
    epochs: int = 100
    batch_size: int = 16
    seed: int = 0
    max_audio_frames: int = 2000
    max_text_tokens: int = 200

    def validate(self) -> None:
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name in ("weight_decay", "seed"):
                if value < 0:
                    raise ValueError(f"{f.name} must be >= 0")
            elif value <= 0:
                raise ValueError(f"{f.name} must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")


def lr_at_epoch(epoch: int, cfg: TrainConfig | None = None) -> float:
    cfg = cfg or TrainConfig()
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr0 * cfg.decay_factor ** (epoch // cfg.decay_every_epochs)


def adam_step(params: list[ad.Parameter], lr: float, t: int, weight_decay: float = 0.0) -> None:
    """One Adam update in place using each parameter's ``grad``.

    Coupled L2: the effective gradient is g + weight_decay * w for parameters
    flagged ``decay``; biases and batchnorm affine terms are exempt.
    """
    if t < 1:
        raise ValueError("Adam step count starts at 1")
    for p in params:
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter {p.name}")
        if weight_decay and p.decay:
            g = g + weight_decay * p.data
        p.adam_m[...] = ADAM_BETA1 * p.adam_m + (1 - ADAM_BETA1) * g
        p.adam_v[...] = ADAM_BETA2 * p.adam_v + (1 - ADAM_BETA2) * g * g
        m_hat = p.adam_m / (1 - ADAM_BETA1**t)
        v_hat = p.adam_v / (1 - ADAM_BETA2**t)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)).astype(p.data.dtype)


@dataclass
class PairedUtterance:
    utt_id: str
    audio: FeatureMatrix
    text: FeatureMatrix


@dataclass
class EpochReport:
    epoch: int
    lr: float
    mean_l_s: float
    mean_l_h: float
    mean_total: float
    n_batches: int
    n_skipped: int = 0

    def csv_row(self) -> list[str]:
        return [str(self.epoch), repr(self.lr), repr(self.mean_l_s), repr(self.mean_l_h), repr(self.mean_total)]


CSV_HEADER = ["epoch", "lr", "mean_l_s", "mean_l_h", "mean_total"]


@dataclass
class Trainer:
    audio: Encoder
    text: Encoder
    cfg: TrainConfig
    rng: np.random.Generator = None
    epoch: int = 0
    step: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.cfg.validate()
        if self.rng is None:
            self.rng = np.random.default_rng(self.cfg.seed)

    @classmethod
    def create(cls, audio_cfg: EncoderConfig, text_cfg: EncoderConfig, cfg: TrainConfig, meta: dict | None = None):
        return cls(Encoder(audio_cfg, "audio."), Encoder(text_cfg, "text."), cfg, meta=dict(meta or {}))

    def parameters(self) -> list[ad.Parameter]:
        return self.audio.parameters() + self.text.parameters()

    def _usable(self, data: list[PairedUtterance]) -> list[PairedUtterance]:
        keep = [
            u
            for u in data
            if min(int(u.audio.mask.sum()), self.cfg.max_audio_frames) >= MIN_FRAMES
            and min(int(u.text.mask.sum()), self.cfg.max_text_tokens) >= MIN_FRAMES
        ]
        if not keep:
            raise ValueError(f"all utterances are shorter than the encoder minimum of {MIN_FRAMES} frames")
        return keep

    def train_step(self, batch: list[PairedUtterance]):
        xa, ma = pad_batch([u.audio for u in batch], self.audio.cfg.input_dim, self.cfg.max_audio_frames)
        xt, mt = pad_batch([u.text for u in batch], self.text.cfg.input_dim, self.cfg.max_text_tokens)
        dtype = self.audio.dtype
        emb_a, _ = self.audio.forward_padded(ad.Tensor(xa.astype(dtype)), ma, training=True)
        emb_t, _ = self.text.forward_padded(ad.Tensor(xt.astype(dtype)), mt, training=True)
        breakdown = total_loss(BatchEmbeddings(emb_a, emb_t), self.rng)
        for p in self.parameters():
            p.zero_grad()
        breakdown.tensor.backward()
        self.step += 1
        adam_step(self.parameters(), lr_at_epoch(self.epoch, self.cfg), self.step, self.cfg.weight_decay)
        return breakdown

    def train_epoch(self, data: list[PairedUtterance]) -> EpochReport:
        usable = self._usable(data)
        order = self.rng.permutation(len(usable))
        bs = self.cfg.batch_size
        lr = lr_at_epoch(self.epoch, self.cfg)
        sums = np.zeros(3)
        n_batches = 0
        for start in range(0, len(order), bs):
            idx = order[start : start + bs]
            if len(idx) < 2:
                continue
            b = self.train_step([usable[i] for i in idx])
            sums += (b.l_s, b.l_h, b.total)
            n_batches += 1
        if n_batches == 0:
            raise ValueError("no batch of at least 2 usable pairs")
        means = sums / n_batches
        report = EpochReport(self.epoch, lr, float(means[0]), float(means[1]), float(means[2]), n_batches, len(data) - len(usable))
        log.info("epoch %d lr %.3g l_s %.4f l_h %.4f total %.4f", report.epoch, lr, *means)
        self.epoch += 1
        return report

    def fit(self, data: list[PairedUtterance], epochs: int | None = None, csv_path=None) -> list[EpochReport]:
        epochs = self.cfg.epochs if epochs is None else epochs
        reports = []
        for _ in range(epochs):
            reports.append(self.train_epoch(data))
            if csv_path is not None:
                write_epoch_csv(csv_path, reports)
        return reports

    def config_snapshot(self) -> dict:
        return {
            "train": asdict(self.cfg),
            "audio_encoder": asdict(self.audio.cfg),
            "text_encoder": asdict(self.text.cfg),
            "meta": self.meta,
        }


def write_epoch_csv(path, reports: list[EpochReport]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in reports:
        w.writerow(r.csv_row())
    _atomic_write(path, buf.getvalue().encode())


def _checkpoint_tensors(tr: Trainer) -> list[tuple[str, np.ndarray]]:
    out = []
    for enc, prefix in ((tr.audio, "audio."), (tr.text, "text.")):
        for name, p in enc.params.items():
            out.append((prefix + name, p.data))
            out.append((prefix + name + ".adam_m", p.adam_m))
            out.append((prefix + name + ".adam_v", p.adam_v))
        for name, arr in enc.buffers().items():
            out.append((prefix + name, arr))
    return out


def encode_checkpoint(tr: Trainer) -> bytes:
    tensors = _checkpoint_tensors(tr)
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(tensors))]
    for name, arr in tensors:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    trailer = json.dumps({"config": tr.config_snapshot(), "rng": tr.rng.bit_generator.state}, sort_keys=True).encode()
    parts.append(struct.pack("<IQI", tr.epoch, tr.step, len(trailer)) + trailer)
    return b"".join(parts)


def save_checkpoint(path, tr: Trainer) -> None:
    _atomic_write(path, encode_checkpoint(tr))


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    epoch: int
    step: int
    config: dict
    rng_state: dict

    def build_trainer(self) -> Trainer:
        tr = Trainer.create(
            EncoderConfig(**self.config["audio_encoder"]),
            EncoderConfig(**self.config["text_encoder"]),
            TrainConfig(**self.config["train"]),
            self.config.get("meta"),
        )
        self.load_into(tr)
        return tr

    def load_into(self, tr: Trainer) -> None:
        expected = dict(_checkpoint_tensors(tr))
        unknown = sorted(set(self.tensors) - set(expected))
        if unknown:
            raise CheckpointError(f"unknown parameter name {unknown[0]!r} for this model")
        missing = sorted(set(expected) - set(self.tensors))
        if missing:
            raise CheckpointError(f"checkpoint lacks tensor {missing[0]!r}")
        for name, target in expected.items():
            src = self.tensors[name]
            if src.shape != target.shape:
                raise CheckpointError(f"shape mismatch for {name}: {src.shape} vs {target.shape}")
            target[...] = src
        tr.epoch = self.epoch
        tr.step = self.step
        tr.rng = np.random.default_rng()
        tr.rng.bit_generator.state = self.rng_state

    def encoder(self, which: str = "audio") -> Encoder:
        tr = self.build_trainer()
        return tr.audio if which == "audio" else tr.text


def decode_checkpoint(blob: bytes) -> Checkpoint:
    def need(pos: int, n: int) -> None:
        if pos + n > len(blob):
            raise CheckpointError("corrupted tensor length")

    if len(blob) < 12 or blob[:4] != CKPT_MAGIC:
        raise CheckpointError("not a CSTN checkpoint")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"checkpoint version mismatch: {version} (expected {CKPT_VERSION})")
    pos = 12
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        need(pos, 2)
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        need(pos, nlen + 1)
        name = blob[pos : pos + nlen].decode("utf-8")
        pos += nlen
        rank = blob[pos]
        pos += 1
        need(pos, 4 * rank)
        dims = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        n = math.prod(dims)
        need(pos, 4 * n)
        tensors[name] = np.frombuffer(blob, dtype="<f4", count=n, offset=pos).reshape(dims).astype(np.float32)
        pos += 4 * n
    need(pos, 16)
    epoch, step, jlen = struct.unpack_from("<IQI", blob, pos)
    pos += 16
    if pos + jlen != len(blob):
        raise CheckpointError("corrupted tensor length")
    meta = json.loads(blob[pos:].decode("utf-8"))
    return Checkpoint(tensors, epoch, step, meta["config"], meta["rng"])


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
