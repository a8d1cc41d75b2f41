"""Finite-difference checks for every differentiable op and the full model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .ctc import ctc_loss
from .encoders import Encoder, EncoderConfig
from .loss import BatchEmbeddings, total_loss

OP_TOLERANCE = 1e-4
DEEP_TOLERANCE = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def _leaf(rng, *shape, name=None, offset=0.0):
    return ad.Parameter(rng.normal(size=shape) + offset, name or "x", dtype=np.float64)


def _cases(rng: np.random.Generator):
    a, b = _leaf(rng, 3, 4, name="a"), _leaf(rng, 3, 4, name="b")
    yield "add", lambda: ad.sum_all(ad.mul(ad.add(a, b), a)), [a, b]
    yield "sub", lambda: ad.sum_all(ad.mul(ad.sub(a, b), b)), [a, b]
    yield "mul", lambda: ad.sum_all(ad.mul(a, b)), [a, b]
    row = _leaf(rng, 4, name="row")
    yield "add_broadcast", lambda: ad.sum_all(ad.mul(ad.add(a, row), a)), [a, row]
    yield "relu", lambda: ad.sum_all(ad.mul(ad.relu(a), b)), [a, b]
    yield "add_scalar", lambda: ad.sum_all(ad.mul(ad.add_scalar(a, 0.3), a)), [a]
    yield "transpose", lambda: ad.sum_all(ad.mul(ad.transpose(a), ad.transpose(b))), [a, b]
    m = _leaf(rng, 4, 5, name="m")
    yield "matmul", lambda: ad.sum_all(ad.relu(ad.matmul(a, m))), [a, m]
    sq = _leaf(rng, 4, 4, name="sq")
    rows, cols = np.array([0, 1, 3, 3]), np.array([2, 2, 0, 1])
    yield "gather2d", lambda: ad.sum_all(ad.mul(ad.gather2d(sq, rows, cols), ad.gather2d(sq, cols, rows))), [sq]
    w_ls = rng.normal(size=(3, 4))
    yield "log_softmax", lambda: ad.sum_all(ad.mul(ad.log_softmax(a), ad.Tensor(w_ls))), [a]

    x = _leaf(rng, 2, 3, 9, name="x")
    for stride in (1, 2):
        for padding in ("same", "valid"):
            w = _leaf(rng, 4, 3, 3, name="w")
            bias = _leaf(rng, 4, name="bias")
            probe = rng.normal(size=(2, 4, 9))

            def f(w=w, bias=bias, stride=stride, padding=padding, probe=probe):
                y = ad.conv1d(x, w, bias, stride=stride, padding=padding)
                return ad.sum_all(ad.mul(y, ad.Tensor(probe[:, :, : y.shape[2]])))

            yield f"conv1d_s{stride}_{padding}", f, [x, w, bias]

    mask = np.ones((2, 9), bool)
    mask[1, 6:] = False
    gamma, beta = _leaf(rng, 3, name="gamma", offset=1.0), _leaf(rng, 3, name="beta")
    probe_bn = rng.normal(size=(2, 3, 9))
    yield (
        "batchnorm1d",
        lambda: ad.sum_all(ad.mul(ad.batchnorm1d(x, gamma, beta, ad.BatchNormState(3), mask, True), ad.Tensor(probe_bn))),
        [x, gamma, beta],
    )
    probe_pool = rng.normal(size=(2, 3))
    yield "masked_mean_pool", lambda: ad.sum_all(ad.mul(ad.masked_mean_pool(x, mask), ad.Tensor(probe_pool))), [x]
    yield "apply_mask", lambda: ad.sum_all(ad.mul(ad.apply_mask(x, mask), x)), [x]

    logits = _leaf(rng, 6, 4, name="logits")

    def ctc():
        lp = ad.log_softmax(logits)
        value, grad = ctc_loss(lp.data, [1, 2, 2])
        return ad.custom(lp, value, grad, "ctc")

    yield "ctc_loss", ctc, [logits]


def run_op_checks(seed: int = 0, eps: float = 1e-5) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    for name, f, inputs in _cases(rng):
        report = ad.gradcheck(f, inputs, eps=eps)
        out.append(CheckResult(name, max(report.values()), OP_TOLERANCE))
    return out


def run_model_check(seed: int = 0, eps: float = 1e-5, max_coords: int = 6) -> CheckResult:
    """Both encoders plus the combined loss on a tiny padded batch."""
    rng = np.random.default_rng(seed)
    ea = Encoder(EncoderConfig(5, 4, 3, seed), "audio.").astype(np.float64)
    et = Encoder(EncoderConfig(6, 4, 3, seed + 1), "text.").astype(np.float64)
    for p in ea.parameters() + et.parameters():
        p.data += rng.normal(0.0, 0.1, p.shape)
    xa = rng.normal(size=(3, 5, 9))
    ma = np.ones((3, 9), bool)
    ma[1, 7:] = False
    xt = rng.normal(size=(3, 6, 7))
    mt = np.ones((3, 7), bool)
    mt[2, 5:] = False

    def f():
        emb_a, _ = ea.forward_padded(ad.Tensor(xa), ma, True)
        emb_t, _ = et.forward_padded(ad.Tensor(xt), mt, True)
        return total_loss(BatchEmbeddings(emb_a, emb_t), np.random.default_rng(seed + 5)).tensor

    report = ad.gradcheck(f, ea.parameters() + et.parameters(), eps=eps, max_coords=max_coords, rng=rng)
    return CheckResult("encoder+loss", max(report.values()), DEEP_TOLERANCE)
