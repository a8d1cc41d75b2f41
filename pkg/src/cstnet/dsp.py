"""Log-mel filterbank frontend and the binary feature-dump format."""

from __future__ import annotations

import functools
import math
import os
import struct
import tempfile
import wave
from dataclasses import dataclass, field

import numpy as np

SAMPLE_RATE = 16000
FEAT_MAGIC = b"FEAT"
FEAT_VERSION = 1


class AudioFormatError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("waveform must be a non-empty 1-D signal")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")


@dataclass
class FbankConfig:
    n_mels: int = 40
    win_ms: float = 25.0
    hop_ms: float = 10.0
    n_fft: int = 512
    f_min: float = 0.0
    f_max: float = 8000.0
    log_floor: float = 1e-10
    cmvn: bool = True

    def validate(self, sample_rate: int = SAMPLE_RATE) -> None:
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if self.win_ms < self.hop_ms or self.hop_ms <= 0:
            raise ValueError("need win_ms >= hop_ms > 0")
        if not (0 <= self.f_min < self.f_max <= sample_rate / 2):
            raise ValueError("need 0 <= f_min < f_max <= sample_rate/2")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")
        win = self.win_samples(sample_rate)
        if self.n_fft & (self.n_fft - 1) or self.n_fft < win:
            raise ValueError(f"n_fft must be a power of two >= window length ({win})")

    def win_samples(self, sample_rate: int = SAMPLE_RATE) -> int:
        return int(round(self.win_ms * sample_rate / 1000))

    def hop_samples(self, sample_rate: int = SAMPLE_RATE) -> int:
        return int(round(self.hop_ms * sample_rate / 1000))


@dataclass
class FeatureMatrix:
    """T x F features with a per-frame validity mask.

    Used both for log-mel input and for encoder layer activations.
    """

    data: np.ndarray
    frame_hop_ms: int = 10
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2:
            raise ValueError("feature data must be T x F")
        if self.mask is None:
            self.mask = np.ones(self.data.shape[0], dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != (self.data.shape[0],):
            raise ValueError("mask length must equal frame count")
        if not self.mask.any():
            raise ValueError("feature matrix has no valid frames")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("feature matrix contains non-finite values")

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def valid(self) -> np.ndarray:
        return self.data[self.mask]


def load_wav(path) -> Waveform:
    try:
        with wave.open(os.fspath(path), "rb") as fh:
            channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except (wave.Error, EOFError) as exc:
        raise AudioFormatError(f"{path}: malformed or unsupported WAV: {exc}") from exc
    if channels != 1:
        raise AudioFormatError(f"{path}: unsupported channel count {channels}")
    if width != 2:
        raise AudioFormatError(f"{path}: unsupported encoding (sample width {width} bytes, need PCM-16)")
    if rate != SAMPLE_RATE:
        raise AudioFormatError(f"{path}: unsupported sample rate {rate} (need {SAMPLE_RATE})")
    pcm = np.frombuffer(raw, dtype="<i2")
    if pcm.size == 0:
        raise AudioFormatError(f"{path}: empty audio")
    return Waveform(pcm.astype(np.float64) / 32768.0, rate)


def write_wav(path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(os.fspath(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        fh.writeframes(pcm.tobytes())


def hamming(length: int) -> np.ndarray:
    if length == 1:
        return np.ones(1)
    n = np.arange(length)
    w = 0.54 - 0.46 * np.cos(2 * np.pi * n / (length - 1))
    # mirror so the window is bit-exactly symmetric
    half = (length + 1) // 2
    w[length - half :] = w[:half][::-1]
    return w


@functools.lru_cache(maxsize=16)
def _bit_reversal(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    if bits == 0:
        return np.zeros(1, dtype=np.int64)
    return np.array([int(format(i, f"0{bits}b")[::-1], 2) for i in range(n)], dtype=np.int64)


def fft(x: np.ndarray) -> np.ndarray:
    """Iterative radix-2 Cooley-Tukey FFT along the last axis."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    if n & (n - 1):
        raise ValueError("FFT length must be a power of two")
    out = x[..., _bit_reversal(n)].copy()
    size = 2
    while size <= n:
        half = size // 2
        tw = np.exp(-2j * np.pi * np.arange(half) / size)
        blocks = out.reshape(out.shape[:-1] + (n // size, size))
        even = blocks[..., :half].copy()
        odd = blocks[..., half:] * tw
        blocks[..., :half] = even + odd
        blocks[..., half:] = even - odd
        out = blocks.reshape(out.shape)
        size *= 2
    return out


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(cfg: FbankConfig) -> np.ndarray:
    points = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max), cfg.n_mels + 2))
    return points[1:-1]


def mel_filterbank(cfg: FbankConfig, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Triangular filters, shape (n_mels, n_fft//2 + 1), peak weight 1."""
    points = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max), cfg.n_mels + 2))
    freqs = np.arange(cfg.n_fft // 2 + 1) * sample_rate / cfg.n_fft
    lo, mid, hi = points[:-2, None], points[1:-1, None], points[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def frame_count(n_samples: int, cfg: FbankConfig, sample_rate: int = SAMPLE_RATE) -> int:
    win, hop = cfg.win_samples(sample_rate), cfg.hop_samples(sample_rate)
    if n_samples < win:
        raise ValueError(f"waveform shorter than one window ({n_samples} < {win} samples)")
    return 1 + (n_samples - win) // hop


def mel_energies(w: Waveform, cfg: FbankConfig) -> np.ndarray:
    """Pre-log mel energies, shape (T, n_mels)."""
    cfg.validate(w.sample_rate)
    win, hop = cfg.win_samples(w.sample_rate), cfg.hop_samples(w.sample_rate)
    n_frames = frame_count(w.samples.size, cfg, w.sample_rate)
    idx = np.arange(n_frames)[:, None] * hop + np.arange(win)
    frames = w.samples[idx] * hamming(win)
    padded = np.zeros((n_frames, cfg.n_fft))
    padded[:, :win] = frames
    spec = fft(padded)[:, : cfg.n_fft // 2 + 1]
    power = spec.real**2 + spec.imag**2
    return power @ mel_filterbank(cfg, w.sample_rate).T


def extract_fbank(w: Waveform, cfg: FbankConfig | None = None) -> FeatureMatrix:
    cfg = cfg or FbankConfig()
    logmel = np.log(mel_energies(w, cfg) + cfg.log_floor)
    hop_ms = int(round(cfg.hop_ms))
    feats = FeatureMatrix(logmel, hop_ms)
    if cfg.cmvn and feats.n_frames >= 2:
        feats = apply_cmvn(feats)
    return feats


def apply_cmvn(f: FeatureMatrix) -> FeatureMatrix:
    """Per-dimension mean/variance normalization over valid frames."""
    valid = f.data[f.mask].astype(np.float64)
    if valid.shape[0] < 2:
        raise ValueError("CMVN needs at least two valid frames")
    mean = valid.mean(axis=0)
    var = valid.var(axis=0)
    scale = np.where(var < 1e-12, 1.0, np.sqrt(np.maximum(var, 1e-300)))
    out = (f.data - mean) / scale
    out[~f.mask] = 0.0
    return FeatureMatrix(out.astype(f.data.dtype, copy=False), f.frame_hop_ms, f.mask.copy())


def _atomic_write(path, payload: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_features(f: FeatureMatrix) -> bytes:
    data = np.ascontiguousarray(f.data[f.mask], dtype="<f4")
    header = FEAT_MAGIC + struct.pack("<IIII", FEAT_VERSION, data.shape[0], data.shape[1], int(f.frame_hop_ms))
    return header + data.tobytes()


def save_features(path, f: FeatureMatrix) -> None:
    """Write valid frames in the FEAT dump format (padded frames are dropped)."""
    _atomic_write(path, encode_features(f))


def load_features(path) -> FeatureMatrix:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 20 or blob[:4] != FEAT_MAGIC:
        raise ValueError(f"{path}: not a FEAT file")
    version, n_frames, dim, hop_ms = struct.unpack_from("<IIII", blob, 4)
    if version != FEAT_VERSION:
        raise ValueError(f"{path}: unsupported FEAT version {version}")
    expected = 20 + 4 * n_frames * dim
    if len(blob) != expected:
        raise ValueError(f"{path}: corrupted tensor length ({len(blob)} bytes, expected {expected})")
    data = np.frombuffer(blob, dtype="<f4", offset=20).reshape(n_frames, dim).astype(np.float32)
    return FeatureMatrix(data, hop_ms)


def sine(freq_hz: float, seconds: float, sample_rate: int = SAMPLE_RATE, amplitude: float = 0.5) -> Waveform:
    t = np.arange(int(round(seconds * sample_rate))) / sample_rate
    return Waveform(amplitude * np.sin(2 * math.pi * freq_hz * t), sample_rate)
