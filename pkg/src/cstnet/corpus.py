"""Manifests, word vectors, text featurisation and the synthetic paired corpus."""

from __future__ import annotations

import hashlib
import io
import os
import string
from dataclasses import dataclass, field

import numpy as np

from .abx import ABXTriple, write_items
from .dsp import (
    FbankConfig,
    FeatureMatrix,
    Waveform,
    _atomic_write,
    extract_fbank,
    load_features,
    load_wav,
    save_features,
    write_wav,
    SAMPLE_RATE,
)
from .trainer import PairedUtterance


@dataclass
class ManifestEntry:
    utt_id: str
    wav_path: str
    translation: str


def load_manifest(path) -> list[ManifestEntry]:
    """Read a 3-column UTF-8 TSV (utt_id, audio path, translation)."""
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 columns, got {len(cols)}")
            utt, wav, text = cols
            if utt in seen:
                raise ValueError(f"{path}:{lineno}: duplicate utt_id {utt!r}")
            if not tokenize(text):
                raise ValueError(f"{path}:{lineno}: empty translation for {utt!r}")
            seen.add(utt)
            entries.append(ManifestEntry(utt, wav, text))
    return entries


def write_manifest(path, entries: list[ManifestEntry]) -> None:
    buf = io.StringIO()
    for e in entries:
        buf.write(f"{e.utt_id}\t{e.wav_path}\t{e.translation}\n")
    _atomic_write(path, buf.getvalue().encode("utf-8"))


_STRIP = string.punctuation + "¿¡«»“”‘’"


def tokenize(sentence: str) -> list[str]:
    """Lowercase, split on whitespace, strip leading/trailing punctuation."""
    out = []
    for tok in sentence.lower().split():
        tok = tok.strip(_STRIP)
        if tok:
            out.append(tok)
    return out


def hash_embedding(token: str, dim: int) -> np.ndarray:
    seed = int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")
    v = np.random.default_rng(seed).standard_normal(dim)
    return (v / np.linalg.norm(v)).astype(np.float32)


@dataclass
class WordVectorTable:
    dim: int = 100
    vectors: dict[str, np.ndarray] = field(default_factory=dict)

    def lookup(self, token: str) -> np.ndarray:
        v = self.vectors.get(token)
        return v if v is not None else hash_embedding(token, self.dim)

    def __len__(self) -> int:
        return len(self.vectors)


def load_word_vectors(path, expected_dim: int = 100) -> WordVectorTable:
    """Parse the word2vec/fastText text format (optional "count dim" header)."""
    table = WordVectorTable(expected_dim)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").rstrip().split(" ")
            if not parts or parts == [""]:
                continue
            if lineno == 1 and len(parts) == 2 and all(p.isdigit() for p in parts):
                if int(parts[1]) != expected_dim:
                    raise ValueError(f"{path}:1: header dimension {parts[1]} != expected {expected_dim}")
                continue
            token, values = parts[0], parts[1:]
            if len(values) != expected_dim:
                raise ValueError(f"{path}:{lineno}: expected {expected_dim} values, got {len(values)}")
            try:
                table.vectors[token] = np.array([float(v) for v in values], dtype=np.float32)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: unparseable float") from None
    return table


def save_word_vectors(path, table: WordVectorTable) -> None:
    buf = io.StringIO()
    buf.write(f"{len(table.vectors)} {table.dim}\n")
    for tok, v in table.vectors.items():
        buf.write(tok + " " + " ".join(repr(float(x)) for x in v) + "\n")
    _atomic_write(path, buf.getvalue().encode("utf-8"))


def embed_text(table: WordVectorTable, sentence: str) -> FeatureMatrix:
    tokens = tokenize(sentence)
    if not tokens:
        raise ValueError(f"sentence is empty after tokenization: {sentence!r}")
    return FeatureMatrix(np.stack([table.lookup(t) for t in tokens]), frame_hop_ms=0)


def resolve(base_dir: str, path: str) -> str:
    return path if os.path.isabs(path) else os.path.join(base_dir, path)


def load_audio_features(path: str, fbank: FbankConfig) -> FeatureMatrix:
    """FEAT dumps are used as-is; WAV files go through the fbank frontend."""
    if path.endswith(".feat"):
        return load_features(path)
    return extract_fbank(load_wav(path), fbank)


def load_paired(manifest_path, fbank: FbankConfig, table: WordVectorTable) -> list[PairedUtterance]:
    base = os.path.dirname(os.path.abspath(manifest_path))
    out = []
    for e in load_manifest(manifest_path):
        full = resolve(base, e.wav_path)
        if not os.path.exists(full):
            raise FileNotFoundError(f"{e.utt_id}: missing audio file {full}")
        out.append(PairedUtterance(e.utt_id, load_audio_features(full, fbank), embed_text(table, e.translation)))
    return out


def load_labeled(path, fbank: FbankConfig) -> list[tuple[str, FeatureMatrix, list[str]]]:
    """Labeled-corpus TSV: utt_id, audio path, space-separated phones."""
    base = os.path.dirname(os.path.abspath(path))
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 columns, got {len(cols)}")
            out.append((cols[0], load_audio_features(resolve(base, cols[1]), fbank), cols[2].split()))
    return out


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass
class SyntheticCorpusSpec:
    n_pairs: int = 500
    n_test: int = 100
    n_phones: int = 20
    n_words: int = 30
    phones_per_word: tuple[int, int] = (2, 3)
    words_per_sentence: tuple[int, int] = (4, 6)
    frames_per_phone: tuple[int, int] = (4, 8)
    feature_dim: int = 40
    sigma: float = 0.5
    mean_scale: float = 1.0
    n_speakers: int = 20
    speaker_dim: int = 4
    speaker_scale: float = 3.0
    n_abx_triples: int = 500
    successors: int = 0  # words allowed after each word; 0 = unrestricted
    max_shared_words: int = 0  # cap on word overlap between any two sentences; 0 = no cap
    mapping_seed: int = 1234
    max_retries: int = 10000

    def validate(self) -> None:
        if self.n_pairs < 2 or not 0 <= self.n_test < self.n_pairs:
            raise ValueError("need n_pairs >= 2 and 0 <= n_test < n_pairs")
        if self.n_phones < 2 or self.n_words < 1:
            raise ValueError("need at least 2 phones and 1 word")
        if self.sigma < 0 or self.speaker_scale < 0:
            raise ValueError("sigma and speaker_scale must be >= 0")
        if not 0 <= self.speaker_dim <= self.feature_dim:
            raise ValueError("speaker_dim must lie in [0, feature_dim]")
        for lo, hi in (self.phones_per_word, self.words_per_sentence, self.frames_per_phone):
            if not 1 <= lo <= hi:
                raise ValueError("ranges must satisfy 1 <= lo <= hi")


@dataclass
class SyntheticUtterance:
    utt_id: str
    features: FeatureMatrix
    phones: list[str]
    words: list[str]
    translation: str
    alignment: list[str]
    speaker: int


@dataclass
class SyntheticCorpus:
    spec: SyntheticCorpusSpec
    seed: int
    phone_symbols: list[str]
    lexicon: dict[str, list[str]]
    translations: dict[str, str]
    phone_means: np.ndarray
    train: list[SyntheticUtterance]
    test: list[SyntheticUtterance]
    abx_triples: list[ABXTriple]


_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


def _draw_means(spec: SyntheticCorpusSpec, rng: np.random.Generator) -> np.ndarray:
    min_sep = 4.0 * spec.sigma
    means = np.zeros((spec.n_phones, spec.feature_dim))
    retries = 0
    for p in range(len(means)):
        while True:
            cand = rng.normal(0.0, spec.mean_scale, spec.feature_dim)
            if p == 0 or np.min(np.linalg.norm(means[:p] - cand, axis=1)) >= min_sep:
                means[p] = cand
                break
            retries += 1
            if retries > spec.max_retries:
                raise ValueError("synthetic spec infeasible: phone-mean separation rejection exceeded retry cap")
    return means


def _pseudo_word(rng: np.random.Generator, used: set[str]) -> str:
    while True:
        n = int(rng.integers(2, 4))
        w = "".join(_CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))] for _ in range(n))
        if w not in used:
            used.add(w)
            return w


def _bag_direction(phones: list[str], index: dict[str, int]) -> np.ndarray:
    v = np.zeros(len(index))
    for p in phones:
        v[index[p]] += 1
    return v / np.linalg.norm(v)


def bag_of_phones(phones: list[str], symbols: list[str]) -> np.ndarray:
    return _bag_direction(phones, {s: i for i, s in enumerate(symbols)})


def gen_synthetic_corpus(spec: SyntheticCorpusSpec | None = None, seed: int = 0) -> SyntheticCorpus:
    """Learnable-by-construction paired corpus.

    Each phone has a Gaussian mean (pairwise separation >= 4 sigma); each
    source word is a fixed phone string and each has a fixed target-language
    token.  Audio frames are phone mean + speaker offset + N(0, sigma^2);
    speaker offsets live in a random ``speaker_dim`` subspace and are the
    nuisance a good encoder learns to discard.
    """
    spec = spec or SyntheticCorpusSpec()
    spec.validate()
    map_rng = np.random.default_rng(spec.mapping_seed)
    rng = np.random.default_rng(seed)
    symbols = [f"p{i:02d}" for i in range(spec.n_phones)]
    phone_index = {s: i for i, s in enumerate(symbols)}
    means = _draw_means(spec, map_rng)

    lexicon: dict[str, list[str]] = {}
    seen_pron: set[tuple[str, ...]] = set()
    used: set[str] = set()
    translations: dict[str, str] = {}
    for w in range(spec.n_words):
        for _ in range(spec.max_retries):
            n = int(map_rng.integers(spec.phones_per_word[0], spec.phones_per_word[1] + 1))
            pron = tuple(symbols[i] for i in map_rng.integers(0, spec.n_phones, size=n))
            if pron not in seen_pron:
                break
        else:
            raise ValueError("synthetic spec infeasible: cannot draw distinct pronunciations")
        seen_pron.add(pron)
        word = f"w{w:02d}"
        lexicon[word] = list(pron)
        translations[word] = _pseudo_word(map_rng, used)

    if spec.speaker_dim:
        basis, _ = np.linalg.qr(map_rng.standard_normal((spec.feature_dim, spec.speaker_dim)))
    else:
        basis = np.zeros((spec.feature_dim, 0))
    spk_offsets = (basis @ map_rng.normal(0.0, spec.speaker_scale, (spec.speaker_dim, spec.n_speakers))).T

    def render(phones: list[str], speaker: int) -> tuple[np.ndarray, list[str]]:
        frames, align = [], []
        for p in phones:
            dur = int(rng.integers(spec.frames_per_phone[0], spec.frames_per_phone[1] + 1))
            frames.append(np.repeat(means[phone_index[p]][None, :], dur, axis=0))
            align.extend([p] * dur)
        x = np.concatenate(frames, axis=0) + spk_offsets[speaker]
        if spec.sigma > 0:
            x = x + rng.normal(0.0, spec.sigma, x.shape)
        return x.astype(np.float32), align

    words_list = list(lexicon)
    n_succ = spec.successors or len(words_list)
    follow = [map_rng.choice(len(words_list), size=min(n_succ, len(words_list)), replace=False) for _ in words_list]
    utterances: list[SyntheticUtterance] = []
    directions: list[np.ndarray] = []
    word_counts: list[np.ndarray] = []
    attempts = 0
    while len(utterances) < spec.n_pairs:
        attempts += 1
        if attempts > spec.max_retries + spec.n_pairs:
            raise ValueError("synthetic spec infeasible: cannot draw enough distinct sentences")
        n = int(rng.integers(spec.words_per_sentence[0], spec.words_per_sentence[1] + 1))
        seq = [int(rng.integers(len(words_list)))]
        while len(seq) < n:
            seq.append(int(follow[seq[-1]][rng.integers(len(follow[seq[-1]]))]))
        words = [words_list[i] for i in seq]
        phones = [p for w in words for p in lexicon[w]]
        d = _bag_direction(phones, phone_index)
        if any(np.max(np.abs(d - o)) < 1e-9 for o in directions):
            continue
        counts = np.bincount(seq, minlength=len(words_list))
        if spec.max_shared_words and word_counts and np.minimum(np.array(word_counts), counts).sum(axis=1).max() > spec.max_shared_words:
            continue
        directions.append(d)
        word_counts.append(counts)
        speaker = int(rng.integers(spec.n_speakers))
        feats, align = render(phones, speaker)
        target = [translations[w] for w in words]
        sentence = " ".join(target).capitalize() + "."
        uid = f"utt{len(utterances):05d}"
        utterances.append(SyntheticUtterance(uid, FeatureMatrix(feats, 10), phones, words, sentence, align, speaker))

    triples = []
    for k in range(spec.n_abx_triples):
        left, centre_a, centre_b, right = (symbols[i] for i in rng.integers(0, spec.n_phones, size=4))
        while centre_b == centre_a:
            centre_b = symbols[int(rng.integers(spec.n_phones))]
        items = []
        for centre in (centre_a, centre_b, centre_a):
            x, _ = render([left, centre, right], int(rng.integers(spec.n_speakers)))
            items.append(FeatureMatrix(x, 10))
        triples.append(ABXTriple(items[0], items[1], items[2], centre_a, centre_b, f"t{k:05d}"))

    n_train = spec.n_pairs - spec.n_test
    return SyntheticCorpus(
        spec, seed, symbols, lexicon, translations, means, utterances[:n_train], utterances[n_train:], triples
    )


def paired_from_synthetic(utts: list[SyntheticUtterance], table: WordVectorTable) -> list[PairedUtterance]:
    return [PairedUtterance(u.utt_id, u.features, embed_text(table, u.translation)) for u in utts]


def synth_waveform(phones: list[str], symbols: list[str], rng: np.random.Generator, frames_per_phone=(4, 8)) -> Waveform:
    """Sinusoid mixture per phone; each phone owns two fixed partials."""
    index = {s: i for i, s in enumerate(symbols)}
    n = len(symbols)
    pieces = []
    for p in phones:
        i = index[p]
        dur = int(rng.integers(frames_per_phone[0], frames_per_phone[1] + 1)) * 160
        t = np.arange(dur) / SAMPLE_RATE
        f1 = 200.0 + 3000.0 * i / n
        f2 = 4000.0 + 3500.0 * ((i * 7) % n) / n
        pieces.append(0.3 * np.sin(2 * np.pi * f1 * t) + 0.2 * np.sin(2 * np.pi * f2 * t))
    sig = np.concatenate(pieces)
    sig = np.concatenate([np.zeros(240), sig, np.zeros(240)])
    sig = sig + rng.normal(0.0, 0.01, sig.shape)
    return Waveform(np.clip(sig, -1, 1), SAMPLE_RATE)


def write_synthetic_corpus(corpus: SyntheticCorpus, out_dir, with_wav: bool = False) -> dict[str, str]:
    """Materialise the corpus as FEAT dumps (or WAVs) plus TSV manifests."""
    os.makedirs(os.path.join(out_dir, "features"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "abx"), exist_ok=True)
    if with_wav:
        os.makedirs(os.path.join(out_dir, "wavs"), exist_ok=True)
    wav_rng = np.random.default_rng(corpus.seed + 1)
    paths = {}
    for split, utts in (("train", corpus.train), ("test", corpus.test)):
        manifest, labels, aligns = io.StringIO(), io.StringIO(), io.StringIO()
        for u in utts:
            if with_wav:
                rel = f"wavs/{u.utt_id}.wav"
                write_wav(os.path.join(out_dir, rel), synth_waveform(u.phones, corpus.phone_symbols, wav_rng, corpus.spec.frames_per_phone))
            else:
                rel = f"features/{u.utt_id}.feat"
                save_features(os.path.join(out_dir, rel), u.features)
            manifest.write(f"{u.utt_id}\t{rel}\t{u.translation}\n")
            labels.write(f"{u.utt_id}\t{rel}\t{' '.join(u.phones)}\n")
            aligns.write(f"{u.utt_id}\t{' '.join(u.alignment)}\n")
        for name, buf in ((f"manifest_{split}.tsv", manifest), (f"phones_{split}.tsv", labels), (f"alignments_{split}.tsv", aligns)):
            _atomic_write(os.path.join(out_dir, name), buf.getvalue().encode("utf-8"))
            paths[name] = os.path.join(out_dir, name)
    rows = []
    for t in corpus.abx_triples:
        rel = []
        for role, f in (("a", t.a), ("b", t.b), ("x", t.x)):
            r = f"{t.triple_id}_{role}.feat"
            save_features(os.path.join(out_dir, "abx", r), f)
            rel.append(r)
        rows.append((t.triple_id, rel[0], rel[1], rel[2], t.category_a, t.category_b))
    write_items(os.path.join(out_dir, "abx", "items.tsv"), rows)
    paths["abx_items"] = os.path.join(out_dir, "abx", "items.tsv")
    lex = "".join(f"{w}\t{corpus.translations[w]}\t{' '.join(p)}\n" for w, p in corpus.lexicon.items())
    _atomic_write(os.path.join(out_dir, "lexicon.tsv"), lex.encode("utf-8"))
    return paths
