"""Single JSON run configuration with one section per component.

Recognised sections: ``fbank``, ``encoder``, ``train``, ``synthetic``,
``probe`` and ``text``.  Keys inside each section mirror the corresponding
dataclass fields; anything else is rejected.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .corpus import SyntheticCorpusSpec
from .ctc import ProbeConfig
from .dsp import FbankConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class EncoderSection:
    """Shared by both encoders; input widths come from fbank and text."""

    channels: int = 64
    kernel: int = 3
    zero_init_residual: bool = False


@dataclass
class TextSection:
    dim: int = 100
    vectors: str | None = None  # word2vec/fastText text file; hash fallback otherwise


@dataclass
class RunConfig:
    fbank: FbankConfig = field(default_factory=FbankConfig)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    synthetic: SyntheticCorpusSpec = field(default_factory=SyntheticCorpusSpec)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    text: TextSection = field(default_factory=TextSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        self.fbank.validate()
        self.train.validate()
        self.synthetic.validate()
        if self.encoder.channels < 1 or self.encoder.kernel < 1 or self.encoder.kernel % 2 == 0:
            raise ConfigError("encoder.channels must be >= 1 and encoder.kernel odd")
        if self.text.dim < 1:
            raise ConfigError("text.dim must be >= 1")
        if self.probe.lr <= 0 or self.probe.epochs < 1 or self.probe.batch_size < 1:
            raise ConfigError("probe lr, epochs and batch_size must be positive")


SECTIONS = {f.name: f.default_factory for f in fields(RunConfig)}


def _coerce(cls, name: str, values) -> object:
    if not isinstance(values, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    for key in values:
        if key not in known:
            raise ConfigError(f"unknown config key {name}.{key}")
    kwargs = dict(values)
    for key, val in kwargs.items():
        # JSON has no tuples; range-valued fields arrive as lists
        if isinstance(val, list):
            kwargs[key] = tuple(val)
    return cls(**kwargs)


def from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    for key in data:
        if key not in SECTIONS:
            raise ConfigError(f"unknown config section {key!r}")
    parts = {name: _coerce(type(factory()), name, data.get(name, {})) for name, factory in SECTIONS.items()}
    cfg = RunConfig(**parts)
    try:
        cfg.validate()
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return from_dict({})
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    return from_dict(data)


def desk_scale() -> dict:
    """Settings for the CPU-sized synthetic learnability run."""
    return {
        "synthetic": {"successors": 5, "words_per_sentence": [4, 4]},
        "encoder": {"channels": 32, "zero_init_residual": True},
        "train": {"epochs": 50, "batch_size": 16, "lr0": 0.005},
    }
