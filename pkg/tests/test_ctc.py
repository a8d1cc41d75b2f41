import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cstnet.ctc import (
    PhoneVocab,
    ProbeConfig,
    alignable,
    best_path_decode,
    ctc_loss,
    ctc_loss_batch,
    edit_distance,
    evaluate_probe,
    load_probe,
    min_frames,
    phone_error_rate,
    read_phone_tsv,
    save_probe,
    train_probe,
    write_per_csv,
)
from cstnet.dsp import FeatureMatrix
from cstnet.encoders import Encoder, EncoderConfig


def collapse(path):
    out, prev = [], None
    for k in path:
        if k != prev and k != 0:
            out.append(k)
        prev = k
    return out


def brute_force_ctc(lp, label):
    t, c = lp.shape
    total = 0.0
    for path in itertools.product(range(c), repeat=t):
        if collapse(path) == list(label):
            total += np.exp(sum(lp[i, k] for i, k in enumerate(path)))
    return -np.log(total)


def brute_edit(a, b):
    if not a:
        return len(b)
    if not b:
        return len(a)
    return min(brute_edit(a[1:], b) + 1, brute_edit(a, b[1:]) + 1, brute_edit(a[1:], b[1:]) + (a[0] != b[0]))


def random_log_probs(rng, t, c):
    z = rng.normal(size=(t, c)) * 2
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def random_instance(rng):
    p = int(rng.integers(1, 4))
    t = int(rng.integers(1, 7))
    while True:
        label = rng.integers(1, p + 1, int(rng.integers(0, 4))).tolist()
        if min_frames(label) <= t:
            return random_log_probs(rng, t, p + 1), label


class TestCTCLoss:
    def test_single_frame(self):
        lp = np.log(np.array([[0.1, 0.6, 0.3]]))
        assert ctc_loss(lp, [2])[0] == pytest.approx(-np.log(0.3))

    def test_uniform(self):
        assert ctc_loss(np.log(np.full((1, 5), 0.2)), [3])[0] == pytest.approx(np.log(5))

    def test_empty_label(self):
        lp = random_log_probs(np.random.default_rng(0), 4, 3)
        assert ctc_loss(lp, [])[0] == pytest.approx(-lp[:, 0].sum())

    def test_matches_enumeration(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            lp, label = random_instance(rng)
            loss, _ = ctc_loss(lp, label)
            ref = brute_force_ctc(lp, label)
            assert abs(loss - ref) <= 1e-6 * max(1.0, abs(ref))

    def test_gradient_finite_differences(self):
        rng = np.random.default_rng(2)
        eps = 1e-5
        for _ in range(30):
            lp, label = random_instance(rng)
            _, g = ctc_loss(lp, label)
            num = np.zeros_like(lp)
            for idx in np.ndindex(lp.shape):
                up, dn = lp.copy(), lp.copy()
                up[idx] += eps
                dn[idx] -= eps
                num[idx] = (ctc_loss(up, label)[0] - ctc_loss(dn, label)[0]) / (2 * eps)
            err = np.abs(g - num).max() / max(1.0, np.abs(num).max())
            assert err <= 1e-4

    def test_batch_matches_single(self):
        rng = np.random.default_rng(3)
        insts = [random_instance(rng) for _ in range(8)]
        insts = [(random_log_probs(rng, lp.shape[0], 4), l) for lp, l in insts if max(l, default=0) < 4]
        losses, grads = ctc_loss_batch([lp for lp, _ in insts], [l for _, l in insts])
        for (lp, l), loss, g in zip(insts, losses, grads):
            single, gs = ctc_loss(lp, l)
            assert loss == pytest.approx(single, abs=1e-12)
            np.testing.assert_allclose(g, gs, atol=1e-12)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=40, deadline=None)
    def test_nonnegative(self, seed):
        lp, label = random_instance(np.random.default_rng(seed))
        assert ctc_loss(lp, label)[0] >= -1e-12

    def test_appended_certain_blank(self):
        rng = np.random.default_rng(4)
        lp = random_log_probs(rng, 5, 3)
        tail = np.log(np.array([[1.0, 1e-300, 1e-300]]))
        a = ctc_loss(lp, [1, 2])[0]
        b = ctc_loss(np.vstack([lp, tail]), [1, 2])[0]
        assert b == pytest.approx(a, abs=1e-9)

    def test_errors(self):
        lp = random_log_probs(np.random.default_rng(5), 2, 3)
        with pytest.raises(ValueError, match="not alignable"):
            ctc_loss(lp, [1, 1])
        with pytest.raises(ValueError, match="non-blank"):
            ctc_loss(lp, [0])
        assert min_frames([1, 1, 2]) == 4 and alignable(5, [1, 2]) and not alignable(4, [1, 2])


class TestDecode:
    def onehot(self, ids, c=4):
        return np.log(np.eye(c)[ids] + 1e-9)

    def test_collapse(self):
        assert best_path_decode(self.onehot([0, 1, 1, 0, 2])) == [1, 2]
        assert best_path_decode(self.onehot([1, 0, 1])) == [1, 1]
        assert best_path_decode(self.onehot([0, 0, 0])) == []

    @given(st.lists(st.integers(0, 3), min_size=1, max_size=20))
    def test_no_blank_and_matches_collapse(self, ids):
        out = best_path_decode(self.onehot(ids))
        assert 0 not in out and out == collapse(ids)


class TestPER:
    def test_examples(self):
        assert phone_error_rate([["a", "b"]], [["a", "b"]]) == 0.0
        assert phone_error_rate([["a", "b", "c"]], [["a", "c"]]) == pytest.approx(1 / 3)

    @given(st.lists(st.integers(0, 3), max_size=8), st.lists(st.integers(0, 3), max_size=8))
    @settings(max_examples=80, deadline=None)
    def test_edit_distance_oracle(self, a, b):
        assert edit_distance(a, b) == brute_edit(a, b)

    @given(st.lists(st.integers(0, 4), min_size=1, max_size=8), st.lists(st.integers(0, 4), max_size=8))
    def test_relabel_invariant(self, ref, hyp):
        perm = [3, 0, 4, 1, 2]
        assert phone_error_rate([ref], [hyp]) == phone_error_rate([[perm[x] for x in ref]], [[perm[x] for x in hyp]])

    def test_errors(self):
        with pytest.raises(ValueError):
            phone_error_rate([[]], [["a"]])
        with pytest.raises(ValueError):
            phone_error_rate([["a"]], [])


class TestVocab:
    def test_encode_decode(self):
        v = PhoneVocab.from_sequences([["b", "a"], ["c"]])
        assert v.symbols == ["a", "b", "c"] and v.size == 4
        assert v.encode(["c", "a"]) == [3, 1] and v.decode([3, 1]) == ["c", "a"]
        with pytest.raises(ValueError, match="unknown phone"):
            v.encode(["z"])

    def test_invalid(self):
        with pytest.raises(ValueError):
            PhoneVocab(["a", "a"])
        with pytest.raises(ValueError):
            PhoneVocab(["<blank>"])

    def test_read_tsv(self, tmp_path):
        (tmp_path / "p.tsv").write_text("u1\tx.wav\ta b\nu2\tc\n")
        assert read_phone_tsv(tmp_path / "p.tsv") == {"u1": ["a", "b"], "u2": ["c"]}
        (tmp_path / "d.tsv").write_text("u1\ta\nu1\tb\n")
        with pytest.raises(ValueError, match="duplicate"):
            read_phone_tsv(tmp_path / "d.tsv")


def frame_phone_data(rng, n, dim=6, n_phones=3, sigma=0.3):
    """Each phone a fixed mean held for 4-6 frames, then a 2-frame gap at the origin."""
    means = 3 * np.eye(dim)[:n_phones]
    gap = sigma * rng.normal(size=(2, dim))
    symbols = [f"p{i}" for i in range(n_phones)]
    out = []
    for _ in range(n):
        seq = [int(rng.integers(n_phones))]
        while len(seq) < rng.integers(2, 5):
            seq.append(int((seq[-1] + rng.integers(1, n_phones)) % n_phones))
        frames = [np.vstack([means[p] + sigma * rng.normal(size=(int(rng.integers(4, 7)), dim)), gap]) for p in seq]
        out.append((FeatureMatrix(np.vstack(frames).astype(np.float32)), [symbols[p] for p in seq]))
    return out, PhoneVocab(symbols)


class TestProbe:
    def test_input_layer_decodable_and_frozen(self, tmp_path):
        rng = np.random.default_rng(0)
        data, vocab = frame_phone_data(rng, 60)
        enc = Encoder(EncoderConfig(6, 8))
        before = enc.fingerprint()
        results = train_probe(enc, [0, 5], data[:40], data[40:], vocab, ProbeConfig(lr=0.05, epochs=30))
        assert enc.fingerprint() == before
        (m0, r0), (_, r5) = results
        assert r0.per < 0.15 and r0.n_test == 20
        assert 0 <= r5.per
        write_per_csv(tmp_path / "per.csv", [r0, r5])
        lines = (tmp_path / "per.csv").read_text().splitlines()
        assert lines[0] == "layer,PER,n_test,skipped_train,skipped_test" and lines[2].startswith("L5,")
        save_probe(tmp_path / "p.npz", m0, vocab)
        m1, v1 = load_probe(tmp_path / "p.npz")
        assert v1.symbols == vocab.symbols
        assert evaluate_probe(m1, None, data[40:], vocab).per == r0.per

    def test_deep_layer_skips_unalignable(self):
        rng = np.random.default_rng(1)
        data, vocab = frame_phone_data(rng, 12)
        long_labels = [(f, p * 3) for f, p in data]
        res = train_probe(Encoder(EncoderConfig(6, 8)), [11], long_labels[:8], long_labels[8:], vocab, ProbeConfig(epochs=1))
        model, rep = res[0]
        assert rep.skipped_train > 0 or rep.skipped_test > 0
        assert model is None or rep.n_train > 0

    def test_bad_layer(self):
        data, vocab = frame_phone_data(np.random.default_rng(2), 4)
        with pytest.raises(ValueError, match="out of range"):
            train_probe(None, [14], data, data, vocab)
        with pytest.raises(ValueError, match="encoder is required"):
            train_probe(None, [3], data, data, vocab)
