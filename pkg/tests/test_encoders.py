import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cstnet import autodiff as ad
from cstnet.dsp import FeatureMatrix
from cstnet.encoders import (
    N_LAYERS,
    Encoder,
    EncoderConfig,
    build_encoder,
    compute_receptive_field,
    embed,
    forward,
    layer_hop_ms,
    pad_batch,
)


def feats(rng, lengths, dim=6):
    return [FeatureMatrix(rng.normal(size=(t, dim)).astype(np.float32)) for t in lengths]


def small(dim=6, channels=8, seed=0, **kw):
    return Encoder(EncoderConfig(dim, channels, 3, seed, **kw))


def warm_up(enc, rng, dim=6):
    """A few train-mode passes so running stats are non-trivial."""
    for _ in range(3):
        enc.forward(feats(rng, [9, 13, 20], dim), training=True)


class TestBuild:
    def test_full_width_embedding_dim(self):
        assert EncoderConfig(40, 1024).embed_dim == 1024

    def test_deterministic(self):
        a, b = small(seed=4), small(seed=4)
        assert a.fingerprint() == b.fingerprint()
        assert small(seed=5).fingerprint() != a.fingerprint()

    @pytest.mark.parametrize("dim,c,k", [(40, 64, 3), (100, 32, 3), (7, 5, 5)])
    def test_parameter_count(self, dim, c, k):
        enc = Encoder(EncoderConfig(dim, c, k))
        expected = dim * c + 10 * c * c * k + c * c + (c * c + c) + 12 * 2 * c
        assert enc.num_parameters() == expected

    def test_init_ranges(self):
        enc = small(channels=16)
        w = enc.params["L2.conv.weight"].data
        assert np.abs(w).max() <= np.sqrt(6 / (16 * 3))
        assert np.all(enc.params["L13.conv.bias"].data == 0)
        assert np.all(enc.params["L4.bn.gamma"].data == 1) and np.all(enc.params["L4.bn.beta"].data == 0)

    def test_zero_init_residual_option(self):
        enc = small(zero_init_residual=True)
        for layer in (3, 5, 8, 10):
            assert np.all(enc.params[f"L{layer}.bn.gamma"].data == 0)
        assert np.all(enc.params["L2.bn.gamma"].data == 1)

    @pytest.mark.parametrize("kw", [dict(kernel=2), dict(kernel=0), dict(channels=0), dict(input_dim=0)])
    def test_invalid_config(self, kw):
        with pytest.raises(ValueError):
            build_encoder(EncoderConfig(**{**dict(input_dim=4, channels=4), **kw}))

    def test_same_topology_for_audio_and_text(self):
        a, t = Encoder(EncoderConfig(40, 8)), Encoder(EncoderConfig(100, 8))
        assert list(a.params) == list(t.params)
        assert [p.shape for p in a.parameters()][1:] == [p.shape for p in t.parameters()][1:]


class TestForward:
    def test_layer_lengths(self):
        rng = np.random.default_rng(0)
        emb, acts = small().forward(feats(rng, [100]), training=False)
        lengths = [a.shape[2] for a in acts.data]
        assert lengths[4] == 100 and lengths[5] == 50 and lengths[10] == 25
        assert emb.shape == (1, 8)
        assert [layer_hop_ms(i) for i in range(1, 14)] == [10] * 5 + [20] * 5 + [40] * 3

    def test_padding_invariance_eval(self):
        rng = np.random.default_rng(1)
        enc = small()
        warm_up(enc, rng)
        batch = feats(rng, [5, 17, 33, 12])
        together = embed(enc, batch)
        for i, f in enumerate(batch):
            alone = embed(enc, [f])
            np.testing.assert_allclose(alone[0], together[i], atol=1e-5)

    @given(st.integers(4, 40), st.integers(1, 25))
    @settings(max_examples=20, deadline=None)
    def test_padding_invariance_property(self, t, extra):
        rng = np.random.default_rng(t * 100 + extra)
        enc = small(seed=2)
        f = feats(rng, [t])[0]
        x, m = pad_batch([f, FeatureMatrix(np.zeros((t + extra, 6), np.float32))])
        emb, acts = enc.forward_padded(ad.Tensor(x.astype(np.float32)), m, training=False)
        alone, acts1 = enc.forward([f], training=False)
        np.testing.assert_allclose(emb.data[0], alone.data[0], atol=1e-5)
        for layer in range(1, N_LAYERS + 1):
            a = acts.feature_matrix(layer, 0)
            b = acts1.feature_matrix(layer, 0)
            np.testing.assert_allclose(a.valid(), b.valid(), atol=1e-5)

    def test_train_mode_rows_depend_only_on_own_frames_via_stats(self):
        # in train mode the batch statistics couple rows, but padding must still not leak
        rng = np.random.default_rng(3)
        enc = small()
        f = feats(rng, [6, 10])
        x, m = pad_batch(f)
        x2 = x.copy()
        x2[0, :, 6:] = 50.0
        e1, _ = enc.forward_padded(ad.Tensor(x.astype(np.float32)), m, training=True)
        e2, _ = enc.forward_padded(ad.Tensor(x2.astype(np.float32)), m, training=True)
        np.testing.assert_allclose(e1.data, e2.data, atol=1e-5)

    def test_eval_deterministic(self):
        rng = np.random.default_rng(4)
        enc = small()
        batch = feats(rng, [11, 7])
        assert embed(enc, batch).tobytes() == embed(enc, batch).tobytes()

    def test_module_forward_modes(self):
        rng = np.random.default_rng(5)
        enc = small()
        before = enc.bn[2].running_mean.copy()
        forward(enc, feats(rng, [8, 9]), "eval")
        assert np.array_equal(before, enc.bn[2].running_mean)
        forward(enc, feats(rng, [8, 9]), "train")
        assert not np.array_equal(before, enc.bn[2].running_mean)
        with pytest.raises(ValueError):
            forward(enc, feats(rng, [8]), "bogus")

    def test_errors(self):
        rng = np.random.default_rng(6)
        enc = small()
        with pytest.raises(ValueError, match="at least 4"):
            enc.forward(feats(rng, [3]))
        with pytest.raises(ValueError):
            enc.forward(feats(rng, [8], dim=5))

    def test_residual_blocks_identity_when_zeroed(self):
        rng = np.random.default_rng(7)
        enc = small()
        for layer in (2, 3, 4, 5, 7, 8, 9, 10):
            enc.params[f"L{layer}.conv.weight"].data[:] = 0
        _, acts = enc.forward(feats(rng, [16, 12]), training=True)
        d = acts.data
        np.testing.assert_allclose(d[4], d[0], atol=1e-6)  # L5 == L1
        np.testing.assert_allclose(d[9], d[5], atol=1e-6)  # L10 == L6

    def test_every_parameter_gets_gradient(self):
        rng = np.random.default_rng(8)
        enc = small()
        emb, _ = enc.forward(feats(rng, [12, 9, 15]), training=True)
        w = ad.Tensor(rng.normal(size=emb.shape).astype(np.float32))
        ad.sum_all(ad.mul(emb, w)).backward()
        for name, p in enc.params.items():
            assert p.grad is not None and np.any(p.grad != 0), name

    def test_activations_masks(self):
        rng = np.random.default_rng(9)
        _, acts = small().forward(feats(rng, [9, 16]), training=False)
        assert acts.feature_matrix(1, 0).n_frames == 9 and acts.data[0].shape[2] == 16
        assert int(acts.masks[5][0].sum()) == 5 and int(acts.masks[10][0].sum()) == 3
        assert acts.feature_matrix(11, 0).frame_hop_ms == 40


class TestReceptiveField:
    def test_values(self):
        assert compute_receptive_field(1) == 25
        assert compute_receptive_field(5) == 105
        assert compute_receptive_field(6) == 125
        assert compute_receptive_field(13) == 325

    def test_monotone(self):
        rf = [compute_receptive_field(i) for i in range(1, 14)]
        assert rf == sorted(rf)

    def test_matches_impulse_response(self):
        # empirical oracle: frames that influence the centre output of a linearised net
        cfg = EncoderConfig(1, 1, 3)
        for layer in (1, 3, 5, 6, 9, 11, 13):
            t = 80
            width = _influence_width(cfg, layer, t)
            assert (width - 1) * 10 + 25 == compute_receptive_field(layer, cfg)

    def test_bad_index(self):
        with pytest.raises(ValueError):
            compute_receptive_field(0)
        with pytest.raises(ValueError):
            compute_receptive_field(14)


def _influence_width(cfg, layer, t):
    """Input span reaching one output of conv layers 1..layer (all-ones kernels)."""
    from cstnet.encoders import layer_kernel, layer_stride

    x = ad.Parameter(np.zeros((1, 1, t)), "x", dtype=np.float64)
    h = x
    for n in range(1, layer + 1):
        k = layer_kernel(n, cfg)
        h = ad.conv1d(h, ad.Tensor(np.ones((1, 1, k))), stride=layer_stride(n))
    sel = np.zeros(h.shape)
    sel[0, 0, h.shape[2] // 2] = 1
    ad.sum_all(ad.mul(h, ad.Tensor(sel))).backward()
    nz = np.flatnonzero(x.grad[0, 0])
    return int(nz[-1] - nz[0] + 1)
