import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cstnet.retrieval import (
    SPEECH_TO_TEXT,
    TEXT_TO_SPEECH,
    evaluate,
    rank_of_truth,
    recall_at_k,
    write_report_csv,
)


def sort_oracle(s):
    """Rank by stable sort on (-score, index)."""
    ranks = []
    for i, row in enumerate(s):
        order = sorted(range(len(row)), key=lambda j: (-row[j], j))
        ranks.append(order.index(i) + 1)
    return np.array(ranks)


class TestRank:
    def test_identity(self):
        assert rank_of_truth(np.eye(5)).tolist() == [1] * 5

    def test_worst_case(self):
        s = np.ones((4, 4))
        s[2, 2] = -1
        assert rank_of_truth(s)[2] == 4

    def test_ties_by_index(self):
        s = np.zeros((3, 3))
        assert rank_of_truth(s).tolist() == [1, 2, 3]

    @given(st.integers(0, 2**31 - 1), st.booleans())
    @settings(max_examples=50)
    def test_brute_force_sort(self, seed, discrete):
        rng = np.random.default_rng(seed)
        s = rng.integers(0, 3, (6, 6)).astype(float) if discrete else rng.normal(size=(6, 6))
        assert rank_of_truth(s, SPEECH_TO_TEXT).tolist() == sort_oracle(s).tolist()
        assert rank_of_truth(s, TEXT_TO_SPEECH).tolist() == sort_oracle(s.T).tolist()

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=30)
    def test_joint_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        s = rng.normal(size=(7, 7))
        p = rng.permutation(7)
        for d in (SPEECH_TO_TEXT, TEXT_TO_SPEECH):
            a = rank_of_truth(s, d)
            b = rank_of_truth(s[np.ix_(p, p)], d)
            assert np.array_equal(a[p], b)

    @given(st.integers(0, 2**31 - 1), st.floats(-10, 10))
    @settings(max_examples=30)
    def test_row_shift(self, seed, c):
        rng = np.random.default_rng(seed)
        s = rng.integers(-5, 5, (5, 5)).astype(float)
        shifted = s.copy()
        shifted[2] += c
        assert rank_of_truth(s)[2] == rank_of_truth(shifted)[2]

    def test_errors(self):
        with pytest.raises(ValueError):
            rank_of_truth(np.zeros((2, 3)))
        with pytest.raises(ValueError):
            rank_of_truth(np.zeros((2, 2)), "sideways")


class TestRecall:
    def test_counting(self):
        assert recall_at_k([1, 2, 3, 4], 2) == 0.5
        assert recall_at_k([1, 1, 1], 7) == 1.0

    def test_errors(self):
        with pytest.raises(ValueError):
            recall_at_k([], 1)
        with pytest.raises(ValueError):
            recall_at_k([1], 0)

    @given(st.integers(2, 20), st.integers(0, 2**31 - 1))
    @settings(max_examples=30)
    def test_monotone_and_full(self, n, seed):
        ranks = rank_of_truth(np.random.default_rng(seed).normal(size=(n, n)))
        vals = [recall_at_k(ranks, k) for k in range(1, n + 1)]
        assert vals == sorted(vals) and vals[-1] == 1.0

    def test_chance_baseline(self):
        rng = np.random.default_rng(0)
        n, trials = 100, 20
        obs = [recall_at_k(rank_of_truth(rng.normal(size=(n, n))), 10) for _ in range(trials)]
        sigma = np.sqrt(0.1 * 0.9 / (n * trials))
        assert abs(np.mean(obs) - 0.1) <= 3 * sigma


class TestEvaluate:
    def test_report_and_csv(self, tmp_path):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(12, 4))
        reports = evaluate(a, a + 0.01 * rng.normal(size=a.shape))
        assert [r.direction for r in reports] == [SPEECH_TO_TEXT, TEXT_TO_SPEECH]
        for r in reports:
            assert r.n == 12
            assert r.recall_at[1] <= r.recall_at[5] <= r.recall_at[10] <= 1
        write_report_csv(tmp_path / "r.csv", reports)
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0] == "direction,R@10,R@5,R@1"
        assert lines[1].startswith("speech->text,") and lines[2].startswith("text->speech,")

    def test_dot_product_scoring(self):
        a = np.array([[1.0, 0.0], [10.0, 0.0]])
        t = np.array([[1.0, 0.0], [0.0, 1.0]])
        # raw dot: audio 1 scores text 0 at 10, text 1 at 0
        s2t, t2s = evaluate(a, t, ks=(1,))
        assert s2t.recall_at[1] == 0.5 and t2s.recall_at[1] == 0.0
