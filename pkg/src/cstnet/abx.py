"""Minimal-pair ABX discriminability with DTW over cosine frame distances."""

from __future__ import annotations

import csv
import io
import os
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .dsp import FeatureMatrix, _atomic_write, load_features
from .encoders import N_LAYERS, Encoder


@dataclass
class ABXTriple:
    a: FeatureMatrix
    b: FeatureMatrix
    x: FeatureMatrix
    category_a: str
    category_b: str
    triple_id: str = ""

    def __post_init__(self):
        if self.category_a == self.category_b:
            raise ValueError(f"triple {self.triple_id!r}: a and b must belong to different categories")


@dataclass
class ABXReport:
    error_rate: float
    n_triples: int
    per_category: dict[str, tuple[int, float]] = field(default_factory=dict)

    @property
    def discriminability(self) -> float:
        return 1.0 - self.error_rate


def cosine_distances(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """1 - cos for every frame pair; zero frames are at distance 1 from
    non-zero frames and 0 from each other."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    nx = np.linalg.norm(x, axis=1)
    ny = np.linalg.norm(y, axis=1)
    zx, zy = nx == 0, ny == 0
    dots = x @ y.T
    denom = np.where(zx, 1.0, nx)[:, None] * np.where(zy, 1.0, ny)[None, :]
    d = 1.0 - dots / denom
    d[zx, :] = 1.0
    d[:, zy] = 1.0
    d[np.ix_(zx, zy)] = 0.0
    return np.clip(d, 0.0, 2.0)


def dtw_from_costs(cost: np.ndarray) -> float:
    """Path-length-normalised DTW over a precomputed cost grid.

    Steps (i-1, j), (i, j-1), (i-1, j-1).  The DP keeps (sum, length) per cell
    and minimises lexicographically, so the result is the minimum-sum path's
    mean cost (shorter path on exact sum ties).
    """
    n1, n2 = cost.shape
    c = cost.tolist()
    inf = (float("inf"), 0)
    prev = [inf] * n2
    for i in range(n1):
        row = c[i]
        cur = [inf] * n2
        for j in range(n2):
            if i == 0 and j == 0:
                cur[0] = (row[0], 1)
                continue
            best = inf
            if i > 0:
                best = min(best, prev[j])
                if j > 0:
                    best = min(best, prev[j - 1])
            if j > 0:
                best = min(best, cur[j - 1])
            cur[j] = (best[0] + row[j], best[1] + 1)
        prev = cur
    total, length = prev[-1]
    return total / length


def _as_array(f) -> np.ndarray:
    return f.valid() if isinstance(f, FeatureMatrix) else np.asarray(f)


def dtw_divergence(x, y) -> float:
    x, y = _as_array(x), _as_array(y)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] == 0 or y.shape[0] == 0:
        raise ValueError("DTW needs two non-empty T x F sequences")
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"feature dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    return dtw_from_costs(cosine_distances(x, y))


def triple_score(d_ax: float, d_bx: float) -> float:
    if d_ax < d_bx:
        return 1.0
    if d_ax == d_bx:
        return 0.5
    return 0.0


def abx_error(triples: list[ABXTriple]) -> ABXReport:
    """Unweighted mean error over the supplied triples."""
    if not triples:
        raise ValueError("no ABX triples")
    scores = []
    by_cat: dict[str, list[float]] = defaultdict(list)
    for t in triples:
        s = triple_score(dtw_divergence(t.a, t.x), dtw_divergence(t.b, t.x))
        scores.append(s)
        by_cat[f"{t.category_a}|{t.category_b}"].append(s)
    per_cat = {k: (len(v), 1.0 - float(np.mean(v))) for k, v in sorted(by_cat.items())}
    return ABXReport(1.0 - float(np.mean(scores)), len(triples), per_cat)


def load_items(path) -> list[ABXTriple]:
    """Read the item TSV: triple_id, path_a, path_b, path_x, category_a, category_b.

    Relative feature paths resolve against the item file's directory.
    """
    base = os.path.dirname(os.path.abspath(path))
    cache: dict[str, FeatureMatrix] = {}

    def feat(p: str) -> FeatureMatrix:
        full = p if os.path.isabs(p) else os.path.join(base, p)
        if full not in cache:
            cache[full] = load_features(full)
        return cache[full]

    triples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("triple_id\t"):
                continue
            cols = line.split("\t")
            if len(cols) != 6:
                raise ValueError(f"{path}:{lineno}: expected 6 columns, got {len(cols)}")
            tid, pa, pb, px, ca, cb = cols
            triples.append(ABXTriple(feat(pa), feat(pb), feat(px), ca, cb, tid))
    if not triples:
        raise ValueError(f"{path}: no triples")
    return triples


def write_items(path, rows: list[tuple[str, str, str, str, str, str]]) -> None:
    buf = io.StringIO()
    buf.write("triple_id\tpath_a\tpath_b\tpath_x\tcategory_a\tcategory_b\n")
    for r in rows:
        buf.write("\t".join(r) + "\n")
    _atomic_write(path, buf.getvalue().encode("utf-8"))


def write_report_csv(path, report: ABXReport) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["category", "n_triples", "abx_error"])
    w.writerow(["overall", report.n_triples, repr(report.error_rate)])
    for cat, (n, err) in report.per_category.items():
        w.writerow([cat, n, repr(err)])
    _atomic_write(path, buf.getvalue().encode())


def layer_features(enc: Encoder, feats: list[FeatureMatrix], batch_size: int = 64) -> list[list[FeatureMatrix]]:
    """Eval-mode activations: out[layer-1][item] for layers 1..13."""
    out: list[list[FeatureMatrix]] = [[] for _ in range(N_LAYERS)]
    for start in range(0, len(feats), batch_size):
        chunk = feats[start : start + batch_size]
        _, acts = enc.forward(chunk, training=False)
        for layer in range(1, N_LAYERS + 1):
            out[layer - 1].extend(acts.feature_matrix(layer, r) for r in range(len(chunk)))
    return out


def _unique_items(triples: list[ABXTriple]) -> tuple[list[FeatureMatrix], dict[int, int]]:
    items: list[FeatureMatrix] = []
    index: dict[int, int] = {}
    for t in triples:
        for f in (t.a, t.b, t.x):
            if id(f) not in index:
                index[id(f)] = len(items)
                items.append(f)
    return items, index


def _remap(triples: list[ABXTriple], feats: list[FeatureMatrix], index: dict[int, int]) -> list[ABXTriple]:
    return [
        ABXTriple(feats[index[id(t.a)]], feats[index[id(t.b)]], feats[index[id(t.x)]], t.category_a, t.category_b, t.triple_id)
        for t in triples
    ]


def encode_triples(enc: Encoder, triples: list[ABXTriple], layer: int) -> list[ABXTriple]:
    """Replace every item by its layer activations (each file encoded once)."""
    items, index = _unique_items(triples)
    return _remap(triples, layer_features(enc, items)[layer - 1], index)


def layer_sweep(enc: Encoder | None, triples: list[ABXTriple], layers=None) -> list[tuple[int, float]]:
    """ABX error per layer; layer 0 denotes the input features themselves."""
    results = [(0, abx_error(triples).error_rate)]
    if enc is None:
        return results
    items, index = _unique_items(triples)
    per_layer = layer_features(enc, items)
    for layer in layers or range(1, N_LAYERS + 1):
        results.append((layer, abx_error(_remap(triples, per_layer[layer - 1], index)).error_rate))
    return results


def write_sweep_csv(path, rows: list[tuple[int, float]]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "abx_error"])
    for layer, err in rows:
        w.writerow([layer, repr(err)])
    _atomic_write(path, buf.getvalue().encode())
