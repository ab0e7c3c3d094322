"""Encoder: subsampling arithmetic, block structure, CTC head, gradients."""

import numpy as np
import pytest

from cifasr import tensor as tn
from cifasr.encoder import (
    AcousticStates,
    EncoderConfig,
    EncoderError,
    conformer_block,
    ctc_head,
    encode,
    init_encoder_params,
    subsampled_length,
)
from cifasr.frontend import FeatureSequence
from cifasr.tensor import ParamStore, Tensor, backward, grad_check_params, precision


TINY = EncoderConfig(feat_dim=6, conv_channels=3, num_blocks=2, d_model=8,
                     d_ffn=12, heads=2, depthwise_kernel=3,
                     pool_after_blocks=(1,), dropout=0.0)


def build(cfg=TINY, vocab_size=5, seed=0):
    store = ParamStore()
    init_encoder_params(store, cfg, np.random.default_rng(seed), vocab_size)
    return store


def feat(t, f=TINY.feat_dim, seed=0):
    rng = np.random.default_rng(seed)
    return FeatureSequence(frames=rng.standard_normal((t, f)).astype(np.float32))


class TestSubsampling:
    def test_stride2_plus_one_pool_gives_quarter(self):
        assert subsampled_length(16, TINY) == 4

    def test_formula_matches_encode_output(self):
        with precision("float64"):
            store = build()
            for t in (8, 9, 15, 16, 17, 30):
                states = encode(feat(t), TINY, store)
                assert states.num_states == subsampled_length(t, TINY)

    def test_too_short_raises(self):
        with precision("float64"):
            store = build()
            with pytest.raises(EncoderError, match="zero states"):
                encode(feat(2), TINY, store)

    def test_frame_spans_partition_input(self):
        with precision("float64"):
            store = build()
            for t in (13, 16, 21):
                spans = encode(feat(t), TINY, store).frame_spans()
                assert spans[0][0] == 0
                assert spans[-1][1] == t
                for (s0, e0), (s1, e1) in zip(spans, spans[1:]):
                    assert e0 == s1 and s0 < e0

    def test_pool_index_validation(self):
        with pytest.raises(EncoderError, match="pool index"):
            EncoderConfig(num_blocks=2, pool_after_blocks=(2,))

    def test_head_divisibility_validation(self):
        with pytest.raises(EncoderError, match="divisible"):
            EncoderConfig(d_model=10, heads=4)


class TestConformerBlock:
    def test_zero_output_weights_give_identity_up_to_final_norm(self):
        with precision("float64"):
            cfg = TINY
            store = build(cfg)
            prefix = "encoder.block1"
            for name in (f"{prefix}.ffn1.out.w", f"{prefix}.ffn1.out.b",
                         f"{prefix}.ffn2.out.w", f"{prefix}.ffn2.out.b",
                         f"{prefix}.mhsa.o.w", f"{prefix}.mhsa.o.b",
                         f"{prefix}.conv.pw2.w", f"{prefix}.conv.pw2.b"):
                store[name].data = np.zeros_like(store[name].data)
            rng = np.random.default_rng(3)
            x = Tensor(rng.standard_normal((5, cfg.d_model)))
            out = conformer_block(x, store, prefix, cfg)
            expect = tn.layer_norm(x, store[f"{prefix}.final_norm.g"],
                                   store[f"{prefix}.final_norm.b"])
            np.testing.assert_allclose(out.data, expect.data, atol=1e-12)

    def test_shape_preserved(self):
        with precision("float64"):
            store = build()
            for u in (1, 4, 9):
                x = Tensor(np.random.default_rng(u).standard_normal((u, TINY.d_model)))
                assert conformer_block(x, store, "encoder.block1", TINY).shape == \
                    (u, TINY.d_model)

    def test_block_gradients_match_finite_differences(self):
        with precision("float64"):
            store = build()
            rng = np.random.default_rng(5)
            x = rng.standard_normal((4, TINY.d_model))
            mixer = rng.standard_normal((4, TINY.d_model))

            def loss():
                out = conformer_block(Tensor(x), store, "encoder.block1", TINY)
                return tn.sum_(out * Tensor(mixer))

            block_params = ParamStore()
            for name, t in store.items():
                if name.startswith("encoder.block1."):
                    block_params._params[name] = t
            reports = grad_check_params(loss, block_params, tol=1e-4,
                                        max_coords_per_param=24)
            bad = {n: r for n, r in reports.items() if not r.passed}
            assert not bad, bad


class TestEncode:
    def test_deterministic_without_dropout(self):
        with precision("float64"):
            store = build()
            a = encode(feat(16), TINY, store).states.data
            b = encode(feat(16), TINY, store).states.data
            np.testing.assert_array_equal(a, b)

    def test_gradients_through_full_encoder(self):
        with precision("float64"):
            store = build()
            f = feat(8, seed=2)

            def loss():
                return tn.sum_(encode(f, TINY, store).states)

            reports = grad_check_params(loss, store, tol=1e-4,
                                        max_coords_per_param=6, seed=1)
            bad = {n: r.max_rel_err for n, r in reports.items() if not r.passed}
            assert not bad, bad


class TestCtcHead:
    def test_rows_exp_sum_to_one(self):
        with precision("float64"):
            store = build()
            logp = ctc_head(encode(feat(16), TINY, store), store)
            assert logp.shape == (4, 6)
            np.testing.assert_allclose(np.exp(logp.data).sum(axis=1), 1.0, atol=1e-6)

    def test_zero_weights_give_uniform(self):
        with precision("float64"):
            store = build()
            store["encoder.ctc.w"].data = np.zeros_like(store["encoder.ctc.w"].data)
            store["encoder.ctc.b"].data = np.zeros_like(store["encoder.ctc.b"].data)
            logp = ctc_head(encode(feat(16), TINY, store), store)
            np.testing.assert_allclose(logp.data, np.log(1.0 / 6), atol=1e-12)

    def test_gradcheck_through_head(self):
        with precision("float64"):
            store = build()
            f = feat(8, seed=4)
            rng = np.random.default_rng(9)
            mixer = None

            def loss():
                nonlocal mixer
                logp = ctc_head(encode(f, TINY, store), store)
                if mixer is None:
                    mixer = rng.standard_normal(logp.shape)
                return tn.sum_(logp * Tensor(mixer))

            head = ParamStore()
            head._params = {n: t for n, t in store.items() if n.startswith("encoder.ctc")}
            reports = grad_check_params(loss, head, tol=1e-4, max_coords_per_param=20)
            assert all(r.passed for r in reports.values()), reports
