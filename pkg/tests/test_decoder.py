"""Fusion decoder: normalization, causality, fusion plumbing, gradients."""

import numpy as np
import pytest

from cifasr import tensor as tn
from cifasr.cif import FiredSequence
from cifasr.decoder import (
    DecoderConfig,
    DecoderState,
    FusionPlan,
    PlanError,
    ProjectedCues,
    decode_prefix,
    decode_step,
    decode_teacher_forced,
    init_decoder_params,
    swap_fusion_order,
)
from cifasr.tensor import ParamStore, Tensor, grad_check_params, precision

BOS = 2
CFG = DecoderConfig(vocab_size=9, d_model=8, d_ffn=12, heads=2, dropout=0.0)
PLAN = FusionPlan(num_blocks=3, visual_blocks=(2,), linguistic_blocks=(3,))


@pytest.fixture
def f64():
    with precision("float64"):
        yield


def build(plan=PLAN, cfg=CFG, seed=0):
    store = ParamStore()
    init_decoder_params(store, cfg, plan.num_blocks, np.random.default_rng(seed))
    return store


def cues(seed=1, m=4, n=5, d=CFG.d_model):
    rng = np.random.default_rng(seed)
    return ProjectedCues(visual=Tensor(rng.standard_normal((m, d))),
                         linguistic=Tensor(rng.standard_normal((n, d))))


def fired(i, d=CFG.d_model, seed=2):
    rng = np.random.default_rng(seed)
    return FiredSequence(integrated=Tensor(rng.standard_normal((i, d))),
                         boundaries=[(k, k + 1) for k in range(i)],
                         attributions=[[(k, 1.0)] for k in range(i)])


class TestFusionPlan:
    def test_default_matches_reference_layout(self):
        plan = FusionPlan()
        assert plan.assignment == {1: "initial", 2: "initial", 3: "visual",
                                   4: "visual", 5: "linguistic", 6: "linguistic"}

    def test_swap_exchanges_modalities(self):
        swapped = swap_fusion_order(FusionPlan())
        assert swapped.visual_blocks == (5, 6)
        assert swapped.linguistic_blocks == (3, 4)

    def test_double_swap_is_identity(self):
        plan = FusionPlan(num_blocks=4, visual_blocks=(3,), linguistic_blocks=(4,))
        assert swap_fusion_order(swap_fusion_order(plan)) == plan

    def test_swap_of_visual_only_plan_is_unchanged(self):
        plan = FusionPlan(num_blocks=6, visual_blocks=(3, 4), linguistic_blocks=())
        assert swap_fusion_order(plan) == plan

    def test_fusion_cannot_start_the_stack(self):
        with pytest.raises(PlanError, match="precede"):
            FusionPlan(num_blocks=4, visual_blocks=(1, 2), linguistic_blocks=())

    def test_block_cannot_take_both_roles(self):
        with pytest.raises(PlanError, match="both"):
            FusionPlan(num_blocks=4, visual_blocks=(3,), linguistic_blocks=(3,))

    def test_all_fusion_layouts_construct(self):
        # the eight explored layouts over a six-block stack
        layouts = [((3, 4), (5, 6)), ((5, 6), (3, 4)), ((3, 4), ()), ((5, 6), ()),
                   ((3, 4, 5, 6), ()), ((), (3, 4)), ((), (5, 6)), ((), (3, 4, 5, 6))]
        for vis, lin in layouts:
            FusionPlan(num_blocks=6, visual_blocks=vis, linguistic_blocks=lin)


class TestDecodeTeacherForced:
    def test_logprobs_exp_sum_to_one(self, f64):
        store = build()
        logp, _ = decode_teacher_forced(fired(4), [4, 5, 6, 4], cues(), PLAN, CFG,
                                        store, bos_id=BOS)
        assert logp.shape == (4, CFG.vocab_size)
        np.testing.assert_allclose(np.exp(logp.data).sum(axis=1), 1.0, atol=1e-6)

    def test_single_step_uses_begin_embedding_only(self, f64):
        store = build()
        logp, _ = decode_teacher_forced(fired(1), [5], cues(), PLAN, CFG, store,
                                        bos_id=BOS)
        assert logp.shape == (1, CFG.vocab_size)

    def test_length_mismatch_rejected(self, f64):
        store = build()
        with pytest.raises(PlanError, match="target"):
            decode_teacher_forced(fired(3), [4, 5], cues(), PLAN, CFG, store,
                                  bos_id=BOS)

    def test_causality_flipping_a_target_leaves_earlier_rows_bit_identical(self, f64):
        store = build()
        f = fired(5)
        base, _ = decode_teacher_forced(f, [4, 5, 6, 7, 8], cues(), PLAN, CFG,
                                        store, bos_id=BOS)
        flipped, _ = decode_teacher_forced(f, [4, 3, 6, 7, 8], cues(), PLAN, CFG,
                                           store, bos_id=BOS)
        # targets enter at the next step: rows 1..2 (index 0..1) see only target_1
        assert np.array_equal(base.data[:2], flipped.data[:2])
        assert not np.array_equal(base.data[2], flipped.data[2])

    def test_rows_invariant_to_later_targets(self, f64):
        store = build()
        f = fired(4)
        rng = np.random.default_rng(3)
        base, _ = decode_teacher_forced(f, [4, 5, 6, 7], cues(), PLAN, CFG, store,
                                        bos_id=BOS)
        for j in range(4):
            tgt = [4, 5, 6, 7]
            tgt[j] = 8
            out, _ = decode_teacher_forced(f, tgt, cues(), PLAN, CFG, store,
                                           bos_id=BOS)
            assert np.array_equal(base.data[:j + 1], out.data[:j + 1])


class TestFusionBehavior:
    def test_zeroed_cross_value_paths_match_no_fusion_decoder(self, f64):
        store = build()
        for i in (2, 3):
            for nm in (f"decoder.block{i}.cross.v.w", f"decoder.block{i}.cross.v.b",
                       f"decoder.block{i}.cross.o.w", f"decoder.block{i}.cross.o.b"):
                store[nm].data = np.zeros_like(store[nm].data)
        plain = FusionPlan(num_blocks=3, visual_blocks=(), linguistic_blocks=())
        f = fired(4)
        with_fusion, _ = decode_teacher_forced(f, [4, 5, 6, 7], cues(), PLAN, CFG,
                                               store, bos_id=BOS)
        without, _ = decode_teacher_forced(f, [4, 5, 6, 7], cues(), plain, CFG,
                                           store, bos_id=BOS)
        np.testing.assert_allclose(with_fusion.data, without.data, atol=1e-12)

    def test_equal_placeholder_rows_give_identical_outputs(self, f64):
        store = build()
        d = CFG.d_model
        bias = np.random.default_rng(5).standard_normal(d)
        cue_a = ProjectedCues(visual=Tensor(bias[None, :].copy()),
                              linguistic=Tensor(bias[None, :].copy()))
        cue_b = ProjectedCues(visual=Tensor(bias[None, :].copy()),
                              linguistic=Tensor(bias[None, :].copy()))
        f = fired(3)
        a, _ = decode_teacher_forced(f, [4, 5, 6], cue_a, PLAN, CFG, store, bos_id=BOS)
        b, _ = decode_teacher_forced(f, [4, 5, 6], cue_b, PLAN, CFG, store, bos_id=BOS)
        np.testing.assert_array_equal(a.data, b.data)

    def test_attention_rows_sum_to_one(self, f64):
        store = build()
        _, maps = decode_teacher_forced(fired(4), [4, 5, 6, 7], cues(), PLAN, CFG,
                                        store, bos_id=BOS, capture_attention=True)
        for mod in ("visual", "linguistic"):
            np.testing.assert_allclose(maps[mod].sum(axis=1), 1.0, atol=1e-6)

    def test_per_head_capture_shape(self, f64):
        store = build()
        _, maps = decode_prefix(fired(4).integrated, [BOS, 4, 5, 6], cues(), PLAN,
                                CFG, store, capture_attention=True, keep_heads=True)
        assert maps["visual"].shape == (1, CFG.heads, 4, 4)
        assert maps["linguistic"].shape == (1, CFG.heads, 4, 5)

    def test_plan_longer_than_params_rejected(self, f64):
        store = build()
        long_plan = FusionPlan(num_blocks=5, visual_blocks=(4,), linguistic_blocks=(5,))
        with pytest.raises(PlanError, match="parameters"):
            decode_teacher_forced(fired(2), [4, 5], cues(), long_plan, CFG, store,
                                  bos_id=BOS)


class TestDecodeStep:
    def test_incremental_matches_teacher_forced_rows(self, f64):
        store = build()
        f = fired(4)
        targets = [4, 5, 6, 7]
        full, _ = decode_teacher_forced(f, targets, cues(), PLAN, CFG, store,
                                        bos_id=BOS)
        state = DecoderState(bos_id=BOS)
        for i in range(4):
            c_i = f.integrated[i]
            step_logp, _ = decode_step(state, c_i, cues(), PLAN, CFG, store)
            np.testing.assert_allclose(step_logp.data, full.data[i], atol=1e-9)
            state = state.advance(targets[i], tn.reshape(c_i, (1, -1)))
        assert state.step == 5 and state.prev_token == 7


class TestGradients:
    def test_full_step_gradcheck_all_decoder_params(self, f64):
        small = DecoderConfig(vocab_size=5, d_model=4, d_ffn=6, heads=2, dropout=0.0)
        plan = FusionPlan(num_blocks=2, visual_blocks=(2,), linguistic_blocks=())
        store = ParamStore()
        init_decoder_params(store, small, plan.num_blocks, np.random.default_rng(7))
        rng = np.random.default_rng(8)
        f = FiredSequence(integrated=Tensor(rng.standard_normal((3, 4))),
                          boundaries=[(0, 1), (1, 2), (2, 3)],
                          attributions=[[(0, 1.0)], [(1, 1.0)], [(2, 1.0)]])
        cue = ProjectedCues(visual=Tensor(rng.standard_normal((3, 4))),
                            linguistic=Tensor(np.zeros((1, 4))))
        targets = [3, 4, 3]

        def loss():
            logp, _ = decode_teacher_forced(f, targets, cue, plan, small, store,
                                            bos_id=BOS)
            picked = [logp[i][t] for i, t in enumerate(targets)]
            return tn.neg(tn.mean(tn.concat([tn.reshape(p, (1,)) for p in picked])))

        reports = grad_check_params(loss, store, tol=1e-4, max_coords_per_param=8,
                                    seed=3)
        bad = {n: r.max_rel_err for n, r in reports.items() if not r.passed}
        assert not bad, bad
