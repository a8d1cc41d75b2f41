"""A small reverse-mode autodiff engine over numpy arrays.

Only the operations the encoders, the triplet loss and the CTC probe need are
provided. Every op builds a node holding its inputs and a closure that
propagates the output gradient back to them; ``Tensor.backward`` walks the
graph in reverse topological order.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np


class Tensor:
    def __init__(self, data, requires_grad: bool = False, dtype=None, _parents=(), _op: str = ""):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = _op
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar, got shape {self.shape}")
        if self._consumed:
            raise RuntimeError("backward() already called on this graph; re-run the forward pass")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            node._backward = None if node._parents else node._backward
            node._parents = ()
        self._consumed = True

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A trainable leaf tensor with Adam moment buffers."""

    def __init__(self, data, name: str, decay: bool = True, dtype=np.float32):
        super().__init__(np.array(data, dtype=dtype), requires_grad=True)
        self.name = name
        self.decay = decay
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)

    def astype(self, dtype) -> None:
        self.data = self.data.astype(dtype)
        self.adam_m = self.adam_m.astype(dtype)
        self.adam_v = self.adam_v.astype(dtype)
        if self.grad is not None:
            self.grad = self.grad.astype(dtype)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=tuple(parents) if needs else (), _op=op)
    if needs:
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _result(a.data + a.data.dtype.type(c), (a,), lambda g: (g,), "add_scalar")


def relu(x: Tensor) -> Tensor:
    # subgradient at 0 is 0
    pos = x.data > 0
    return _result(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,), "relu")


def sum_all(x: Tensor) -> Tensor:
    return _result(
        np.asarray(x.data.sum(), dtype=x.dtype),
        (x,),
        lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),),
        "sum",
    )


def transpose(x: Tensor) -> Tensor:
    return _result(x.data.T, (x,), lambda g: (g.T,), "transpose")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def gather2d(x: Tensor, rows, cols) -> Tensor:
    """Pick x[rows[i], cols[i]] into a vector."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, cols), g)
        return (gx,)

    return _result(x.data[rows, cols], (x,), backward, "gather2d")


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log-softmax of a 2-D tensor."""
    z = x.data - x.data.max(axis=1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    soft = np.exp(out)
    return _result(out, (x,), lambda g: (g - soft * g.sum(axis=1, keepdims=True),), "log_softmax")


def custom(x: Tensor, value: float, grad: np.ndarray, op: str = "custom") -> Tensor:
    """Scalar node whose gradient w.r.t. ``x`` was computed externally."""
    grad = np.asarray(grad, dtype=x.dtype)
    return _result(np.asarray(value, dtype=x.dtype), (x,), lambda g: (g * grad,), op)


def _same_padding(length: int, kernel: int, stride: int) -> tuple[int, int, int]:
    out_len = -(-length // stride)
    left = (kernel - 1) // 2
    right = (out_len - 1) * stride + kernel - length - left
    return out_len, left, right


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: str = "same") -> Tensor:
    """Cross-correlation over time.

    x: [B, Cin, T], w: [Cout, Cin, K], b: [Cout].  With ``same`` padding the
    output has ceil(T/stride) frames and output frame i is centred on input
    frame i*stride (left pad fixed at (K-1)//2), so appending zero frames on
    the right never shifts earlier outputs.
    """
    if stride < 1:
        raise ValueError("stride must be positive")
    bsz, cin, length = x.shape
    cout, wcin, k = w.shape
    if wcin != cin:
        raise ValueError(f"conv1d channel mismatch: input {cin}, weight {wcin}")
    if padding == "same":
        out_len, left, right = _same_padding(length, k, stride)
    elif padding == "valid":
        if k > length:
            raise ValueError(f"kernel {k} longer than input {length}")
        out_len, left, right = (length - k) // stride + 1, 0, 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    right_pad = max(right, 0)
    xp = np.pad(x.data, ((0, 0), (0, 0), (left, right_pad))) if left or right_pad else x.data
    span = (out_len - 1) * stride + 1
    # cols[b, t, c, k] = xp[b, c, t*stride + k]
    cols = np.stack([xp[:, :, j : j + span : stride] for j in range(k)], axis=-1)
    cols = cols.transpose(0, 2, 1, 3).reshape(bsz, out_len, cin * k)
    wmat = w.data.reshape(cout, cin * k)
    out = cols @ wmat.T
    if b is not None:
        out = out + b.data
    out = np.ascontiguousarray(out.transpose(0, 2, 1))

    def backward(g):
        gt = g.transpose(0, 2, 1)  # [B, T', Cout]
        gw = (gt.reshape(-1, cout).T @ cols.reshape(-1, cin * k)).reshape(w.shape)
        gx = None
        if x.requires_grad:
            dcols = (gt @ wmat).reshape(bsz, out_len, cin, k).transpose(0, 2, 1, 3)
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, :, j : j + span : stride] += dcols[..., j]
            gx = gxp[:, :, left : left + length]
        gb = g.sum(axis=(0, 2)) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _result(out, parents, backward, "conv1d")


class BatchNormState:
    def __init__(self, channels: int, dtype=np.float32, momentum: float = 0.1, eps: float = 1e-5):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps


def batchnorm1d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    mask: np.ndarray | None = None,
    training: bool = True,
) -> Tensor:
    """Per-channel normalization over valid (b, t) positions.

    Output at padded positions is exactly zero and contributes nothing to the
    batch statistics.
    """
    bsz, ch, length = x.shape
    m = np.ones((bsz, 1, length), dtype=x.dtype) if mask is None else np.asarray(mask, dtype=x.dtype)[:, None, :]
    count = float(m.sum())
    g_ = gamma.data[None, :, None]
    b_ = beta.data[None, :, None]
    eps = state.eps
    if training:
        if count < 2:
            raise ValueError("batchnorm needs at least 2 valid positions in training mode")
        mean = (x.data * m).sum(axis=(0, 2)) / count
        centred = (x.data - mean[None, :, None]) * m
        var = (centred**2).sum(axis=(0, 2)) / count
        mom = state.momentum
        state.running_mean[...] = (1 - mom) * state.running_mean + mom * mean
        state.running_var[...] = (1 - mom) * state.running_var + mom * var * count / (count - 1)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = centred * inv[None, :, None]
        out = (g_ * xhat + b_) * m

        def backward(g):
            gm = g * m
            ggamma = (gm * xhat).sum(axis=(0, 2))
            gbeta = gm.sum(axis=(0, 2))
            gxhat = gm * g_
            gx = (
                inv[None, :, None]
                / count
                * (count * gxhat - gxhat.sum(axis=(0, 2))[None, :, None] - xhat * (gxhat * xhat).sum(axis=(0, 2))[None, :, None])
            ) * m
            return gx, ggamma, gbeta

    else:
        inv = 1.0 / np.sqrt(state.running_var.astype(x.dtype) + eps)
        xhat = (x.data - state.running_mean.astype(x.dtype)[None, :, None]) * inv[None, :, None]
        out = (g_ * xhat + b_) * m

        def backward(g):
            gm = g * m
            return gm * g_ * inv[None, :, None], (gm * xhat).sum(axis=(0, 2)), gm.sum(axis=(0, 2))

    return _result(out.astype(x.dtype, copy=False), (x, gamma, beta), backward, "batchnorm1d")


def apply_mask(x: Tensor, mask: np.ndarray) -> Tensor:
    """Zero padded time steps of a [B, C, T] tensor."""
    m = np.asarray(mask, dtype=x.dtype)[:, None, :]
    return _result(x.data * m, (x,), lambda g: (g * m,), "mask")


def masked_mean_pool(x: Tensor, mask: np.ndarray) -> Tensor:
    """Average [B, C, T] over valid frames -> [B, C]."""
    m = np.asarray(mask, dtype=x.dtype)
    counts = m.sum(axis=1)
    if np.any(counts == 0):
        raise ValueError("masked_mean_pool: a batch row has no valid frames")
    weights = (m / counts[:, None])[:, None, :]
    return _result(
        (x.data * weights).sum(axis=2),
        (x,),
        lambda g: (g[:, :, None] * weights,),
        "masked_mean_pool",
    )


def numeric_grad(f: Callable[[], Tensor], arr: np.ndarray, index, eps: float = 1e-5) -> float:
    old = arr[index]
    arr[index] = old + eps
    up = float(f().data)
    arr[index] = old - eps
    down = float(f().data)
    arr[index] = old
    if not (math.isfinite(up) and math.isfinite(down)):
        raise FloatingPointError("non-finite output during finite differencing")
    return (up - down) / (2 * eps)


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def gradcheck(
    f: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> dict[str, float]:
    """Compare backprop against central differences.

    ``f`` is a zero-argument closure recomputing the scalar output from the
    current contents of ``inputs`` (which must be float64 leaves). Returns the
    maximum relative error per input, keyed by parameter name or position.
    If ``max_coords`` is set, that many random coordinates per input are probed.
    """
    for t in inputs:
        if t.data.dtype != np.float64:
            raise TypeError("gradcheck requires float64 inputs")
        t.zero_grad()
    out = f()
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite output")
    out.backward()
    rng = rng or np.random.default_rng(0)
    report = {}
    for pos, t in enumerate(inputs):
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = np.arange(t.data.size)
        if max_coords is not None and t.data.size > max_coords:
            flat = rng.choice(t.data.size, size=max_coords, replace=False)
        worst = 0.0
        for i in flat:
            idx = np.unravel_index(int(i), t.data.shape)
            worst = max(worst, relative_error(float(analytic[idx]), numeric_grad(f, t.data, idx, eps)))
        report[getattr(t, "name", None) or f"input{pos}"] = worst
    return report
