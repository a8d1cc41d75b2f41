"""Audio/text convolutional embedding networks.

Both modalities share one 13-layer topology:

    L1        kernel-1 projection input_dim -> C
    L2..L5    residual block (skip around L2-L3 and around L4-L5)
    L6        stride-2 conv
    L7..L10   residual block
    L11       stride-2 conv
    L12, L13  kernel-1 (per-frame fully-connected) layers

followed by a masked mean pool over time.  L1..L12 are conv -> batchnorm ->
ReLU; L13 is a plain affine map so embeddings are not sign-constrained.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .dsp import FeatureMatrix

N_LAYERS = 13
MIN_FRAMES = 4
INPUT_HOP_MS = 10
INPUT_WIN_MS = 25
STRIDED_LAYERS = (6, 11)
# (second conv of the pair, skip source) inside each residual block
RESIDUAL_SKIPS = {3: 1, 5: 3, 8: 6, 10: 8}


@dataclass
class EncoderConfig:
    input_dim: int = 40
    channels: int = 64
    kernel: int = 3
    seed: int = 0
    # start each residual branch's last batchnorm at gamma=0 (identity blocks)
    zero_init_residual: bool = False

    @property
    def embed_dim(self) -> int:
        return self.channels

    def validate(self) -> None:
        if self.input_dim < 1 or self.channels < 1:
            raise ValueError("input_dim and channels must be >= 1")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("kernel must be a positive odd integer")


def layer_kernel(layer: int, cfg: EncoderConfig) -> int:
    return 1 if layer in (1, 12, 13) else cfg.kernel


def layer_stride(layer: int) -> int:
    return 2 if layer in STRIDED_LAYERS else 1


def layer_hop_ms(layer: int) -> int:
    return INPUT_HOP_MS * 2 ** sum(1 for s in STRIDED_LAYERS if layer >= s)


def compute_receptive_field(layer_index: int, cfg: EncoderConfig | None = None) -> int:
    """Receptive field of one activation at ``layer_index`` in milliseconds."""
    cfg = cfg or EncoderConfig()
    if not 1 <= layer_index <= N_LAYERS:
        raise ValueError(f"layer index must be in 1..{N_LAYERS}")
    frames, jump = 1, 1
    for layer in range(1, layer_index + 1):
        frames += (layer_kernel(layer, cfg) - 1) * jump
        jump *= layer_stride(layer)
    return (frames - 1) * INPUT_HOP_MS + INPUT_WIN_MS


def downsample_mask(mask: np.ndarray, stride: int) -> np.ndarray:
    return mask[:, ::stride] if stride > 1 else mask


@dataclass
class LayerActivations:
    """Pre-pooling activations of L1..L13 as [B, C, T_l] arrays with masks."""

    data: list[np.ndarray]
    masks: list[np.ndarray]

    def feature_matrix(self, layer: int, row: int) -> FeatureMatrix:
        arr = self.data[layer - 1][row].T
        m = self.masks[layer - 1][row]
        return FeatureMatrix(arr[m].astype(np.float64), layer_hop_ms(layer))

    def hop_ms(self, layer: int) -> int:
        return layer_hop_ms(layer)


class Encoder:
    def __init__(self, cfg: EncoderConfig, prefix: str = ""):
        cfg.validate()
        self.cfg = cfg
        self.prefix = prefix
        self.params: dict[str, ad.Parameter] = {}
        self.bn: dict[int, ad.BatchNormState] = {}
        rng = np.random.default_rng(cfg.seed)
        c = cfg.channels
        for layer in range(1, N_LAYERS + 1):
            cin = cfg.input_dim if layer == 1 else c
            k = layer_kernel(layer, cfg)
            bound = np.sqrt(6.0 / (cin * k))  # Kaiming-uniform, fan-in, ReLU gain
            self._add(f"L{layer}.conv.weight", rng.uniform(-bound, bound, size=(c, cin, k)), decay=True)
            if layer == N_LAYERS:
                self._add(f"L{layer}.conv.bias", np.zeros(c), decay=False)
            else:
                g0 = 0.0 if cfg.zero_init_residual and layer in RESIDUAL_SKIPS else 1.0
                self._add(f"L{layer}.bn.gamma", np.full(c, g0), decay=False)
                self._add(f"L{layer}.bn.beta", np.zeros(c), decay=False)
                self.bn[layer] = ad.BatchNormState(c)

    def _add(self, name: str, value: np.ndarray, decay: bool) -> None:
        full = self.prefix + name
        self.params[name] = ad.Parameter(value, full, decay=decay)

    def parameters(self) -> list[ad.Parameter]:
        return list(self.params.values())

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for layer, st in self.bn.items():
            out[f"L{layer}.bn.running_mean"] = st.running_mean
            out[f"L{layer}.bn.running_var"] = st.running_var
        return out

    def astype(self, dtype) -> "Encoder":
        for p in self.params.values():
            p.astype(dtype)
        for st in self.bn.values():
            st.running_mean = st.running_mean.astype(dtype)
            st.running_var = st.running_var.astype(dtype)
        return self

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        for name, arr in sorted(self.buffers().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def __call__(self, x, mask, training: bool = False):
        return self.forward_padded(x, mask, training)

    def forward_padded(self, x, mask: np.ndarray, training: bool = False):
        """Run a padded batch. ``x`` is [B, input_dim, T], ``mask`` is [B, T]."""
        x = x if isinstance(x, ad.Tensor) else ad.Tensor(x)
        mask = np.asarray(mask, dtype=bool)
        if x.shape[1] != self.cfg.input_dim:
            raise ValueError(f"feature dim {x.shape[1]} != encoder input_dim {self.cfg.input_dim}")
        if mask.shape != (x.shape[0], x.shape[2]):
            raise ValueError("mask shape must be [B, T]")
        if np.any(mask.sum(axis=1) < MIN_FRAMES):
            raise ValueError(f"every row needs at least {MIN_FRAMES} valid frames")
        p = self.params
        x = ad.apply_mask(x, mask)
        outs: dict[int, ad.Tensor] = {}
        acts, masks = [], []
        h = x
        for layer in range(1, N_LAYERS + 1):
            stride = layer_stride(layer)
            h = ad.conv1d(h, p[f"L{layer}.conv.weight"], p.get(f"L{layer}.conv.bias"), stride=stride)
            mask = downsample_mask(mask, stride)
            if layer < N_LAYERS:
                h = ad.batchnorm1d(h, p[f"L{layer}.bn.gamma"], p[f"L{layer}.bn.beta"], self.bn[layer], mask, training)
                if layer in RESIDUAL_SKIPS:
                    h = ad.add(h, outs[RESIDUAL_SKIPS[layer]])
                h = ad.relu(h)
            h = ad.apply_mask(h, mask)
            outs[layer] = h
            acts.append(h.data)
            masks.append(mask)
        emb = ad.masked_mean_pool(h, mask)
        return emb, LayerActivations(acts, masks)

    def forward(self, feats: list[FeatureMatrix], training: bool = False):
        x, mask = pad_batch(feats, self.cfg.input_dim)
        return self.forward_padded(ad.Tensor(x.astype(self.dtype)), mask, training)

    @property
    def dtype(self):
        return next(iter(self.params.values())).data.dtype

    def config_dict(self) -> dict:
        return asdict(self.cfg)


def build_encoder(cfg: EncoderConfig, prefix: str = "") -> Encoder:
    return Encoder(cfg, prefix)


def forward(enc: Encoder, feats: list[FeatureMatrix], mode: str = "eval"):
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    return enc.forward(feats, training=mode == "train")


def pad_batch(feats: list[FeatureMatrix], dim: int | None = None, max_frames: int | None = None):
    """Stack feature matrices into [B, F, T_max] with a [B, T_max] mask.

    Only valid frames of each matrix are used; ``max_frames`` truncates.
    """
    if not feats:
        raise ValueError("empty batch")
    rows = [f.data[f.mask] for f in feats]
    if max_frames is not None:
        rows = [r[:max_frames] for r in rows]
    d = rows[0].shape[1]
    if dim is not None and d != dim:
        raise ValueError(f"feature dim {d} != expected {dim}")
    if any(r.shape[1] != d for r in rows):
        raise ValueError("inconsistent feature dims in batch")
    t_max = max(r.shape[0] for r in rows)
    x = np.zeros((len(rows), d, t_max), dtype=np.float64)
    mask = np.zeros((len(rows), t_max), dtype=bool)
    for i, r in enumerate(rows):
        x[i, :, : r.shape[0]] = r.T
        mask[i, : r.shape[0]] = True
    return x, mask


def embed(enc: Encoder, feats: list[FeatureMatrix], batch_size: int = 64) -> np.ndarray:
    """Eval-mode embeddings for a list of utterances, shape [N, D]."""
    out = []
    for i in range(0, len(feats), batch_size):
        emb, _ = enc.forward(feats[i : i + batch_size], training=False)
        out.append(emb.data)
    return np.concatenate(out, axis=0)
