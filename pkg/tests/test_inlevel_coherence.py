"""Masked-modeling corruption statistics, MLM heads/losses, and the coherence
corruption + checker machinery."""

import numpy as np
import pytest
from scipy import stats

from agentnest.config import LevelConfig, RunConfig
from agentnest.corpus import MASK_ID, RESERVED
from agentnest.hier_encoder import HierEncoder
from agentnest.inlevel_coherence import (
    ACTION_KEEP, ACTION_MASK, ACTION_RANDOM, CoherenceCheckers, MlmHeads,
    apply_coherence_replacement, apply_mlm_corruption, coherence_loss,
    corrupt_token_ids, mlm_loss, plan_coherence, plan_token_mlm,
    plan_vector_mlm,
)
from agentnest.numerics import ParameterStore, Tensor


def tiny_config():
    return RunConfig(seed=0, levels=[
        LevelConfig("token", 8, 6, n_layers=1, n_heads=2),
        LevelConfig("sentence", 12, 4, n_layers=1, n_heads=2),
        LevelConfig("paragraph", 16, 4, n_layers=1, n_heads=2),
        LevelConfig("document", 20),
    ])


class TestMlmCorruptionPlans:
    def test_action_frequencies_80_10_10(self):
        rng = np.random.default_rng(0)
        ids = np.zeros((200, 100), dtype=int)
        content = np.ones_like(ids, bool)
        plan = plan_token_mlm(ids, content, rate=0.9, vocab_size=50, rng=rng)
        acts = plan.action[plan.selected]
        assert len(acts) >= 10_000
        freq = np.array([(acts == ACTION_MASK).mean(),
                         (acts == ACTION_RANDOM).mean(),
                         (acts == ACTION_KEEP).mean()])
        np.testing.assert_allclose(freq, [0.8, 0.1, 0.1], atol=0.02)

    def test_rate_near_zero_is_identity(self):
        rng = np.random.default_rng(1)
        ids = np.arange(40).reshape(4, 10) % 8 + 4
        plan = plan_token_mlm(ids, np.ones_like(ids, bool), rate=1e-12,
                              vocab_size=20, rng=rng)
        assert plan.n_selected == 0
        np.testing.assert_array_equal(corrupt_token_ids(ids, plan), ids)

    def test_content_mask_respected(self):
        rng = np.random.default_rng(2)
        ids = np.zeros((50, 8), dtype=int)
        content = np.zeros_like(ids, bool)
        content[:, 2] = True  # only slot 2 is maskable
        plan = plan_token_mlm(ids, content, rate=0.99, vocab_size=30, rng=rng)
        assert plan.selected[:, 2].any()
        assert not plan.selected[:, [0, 1, 3, 4, 5, 6, 7]].any()

    def test_mask_action_writes_mask_id(self):
        rng = np.random.default_rng(3)
        ids = np.full((20, 10), 7)
        plan = plan_token_mlm(ids, np.ones_like(ids, bool), rate=0.5,
                              vocab_size=30, rng=rng)
        out = corrupt_token_ids(ids, plan)
        sel_mask = plan.selected & (plan.action == ACTION_MASK)
        assert (out[sel_mask] == MASK_ID).all()
        keep = ~plan.selected | (plan.action == ACTION_KEEP)
        assert (out[keep] == 7).all()

    def test_random_pool_excludes_reserved(self):
        rng = np.random.default_rng(4)
        ids = np.zeros((50, 20), dtype=int)
        plan = plan_token_mlm(ids, np.ones_like(ids, bool), rate=0.9,
                              vocab_size=10, rng=rng)
        out = corrupt_token_ids(ids, plan)
        rand = plan.selected & (plan.action == ACTION_RANDOM)
        assert (out[rand] >= len(RESERVED)).all() and (out[rand] < 10).all()

    def test_empty_vocab_pool_is_error(self):
        rng = np.random.default_rng(5)
        ids = np.zeros((30, 30), dtype=int)
        with pytest.raises(ValueError, match="non-reserved"):
            plan_token_mlm(ids, np.ones_like(ids, bool), rate=0.9,
                           vocab_size=4, rng=rng)

    def test_keep_action_bit_identical_vectors(self):
        rng = np.random.default_rng(6)
        vecs = Tensor(rng.normal(size=(10, 4)))
        plan = plan_vector_mlm(10, rate=0.5, pool_size=10, rng=rng)
        out = apply_mlm_corruption(vecs, plan, Tensor(rng.normal(size=4)), vecs)
        keep = ~plan.selected | (plan.action == ACTION_KEEP)
        assert out.data[keep].tobytes() == vecs.data[keep].tobytes()

    def test_vector_masked_slots_get_mask_vector(self):
        rng = np.random.default_rng(7)
        vecs = Tensor(rng.normal(size=(12, 4)))
        mask_vec = Tensor(rng.normal(size=4))
        plan = plan_vector_mlm(12, rate=0.7, pool_size=12, rng=rng)
        out = apply_mlm_corruption(vecs, plan, mask_vec, vecs)
        m = plan.selected & (plan.action == ACTION_MASK)
        np.testing.assert_allclose(out.data[m],
                                   np.tile(mask_vec.data, (m.sum(), 1)))


class TestMlmHeadsAndLoss:
    @pytest.fixture
    def heads(self):
        cfg = tiny_config()
        store = ParameterStore()
        rng = np.random.default_rng(0)
        enc = HierEncoder(store, cfg, vocab_size=12, rng=rng)
        return cfg, store, enc, MlmHeads(store, cfg, enc, rng)

    def test_orthonormal_candidate_argmax(self, heads):
        cfg, store, enc, h = heads
        cand = np.eye(12)[:5]
        # make the head the identity map so its output equals its input
        store["mlm/sentence/w"].data[...] = np.eye(12) * 10  # large => gelu ~ identity for positives
        x = Tensor(cand[3][None, :] * 10)
        logits = h.level_logits("sentence", x, Tensor(cand)).data
        assert logits.argmax() == 3

    def test_duplicate_candidates_equal_logits(self, heads):
        _, _, _, h = heads
        rng = np.random.default_rng(1)
        cand = np.tile(rng.normal(size=12), (4, 1))
        logits = h.level_logits("sentence", Tensor(rng.normal(size=(2, 12))),
                                Tensor(cand)).data
        assert np.allclose(logits - logits[:, :1], 0.0)

    def test_hand_dot_products(self, heads):
        _, _, _, h = heads
        rng = np.random.default_rng(2)
        x = Tensor(rng.normal(size=(3, 12)))
        cand = rng.normal(size=(3, 12))
        hidden = h.head("sentence", x).data
        np.testing.assert_allclose(
            h.level_logits("sentence", x, Tensor(cand)).data,
            hidden @ cand.T, atol=1e-12)

    def test_empty_candidates_error(self, heads):
        _, _, _, h = heads
        with pytest.raises(ValueError, match="empty candidate"):
            h.level_logits("sentence", Tensor(np.zeros((1, 12))),
                           Tensor(np.zeros((0, 12))))

    def test_loss_single_candidate_zero(self):
        loss, used = mlm_loss(Tensor(np.random.default_rng(3).normal(size=(4, 1))),
                              np.zeros(4, int))
        assert used and abs(loss.item()) < 1e-12

    def test_loss_uniform_ln_k(self):
        loss, _ = mlm_loss(Tensor(np.zeros((3, 9))), np.array([0, 5, 8]))
        assert abs(loss.item() - np.log(9)) < 1e-12

    def test_loss_two_slot_hand_case(self):
        logits = np.array([[2.0, 0.0], [0.0, 1.0]])
        expect = 0.5 * (np.log(1 + np.exp(-2.0)) + np.log(1 + np.exp(-1.0)))
        loss, _ = mlm_loss(Tensor(logits), np.array([0, 1]))
        assert abs(loss.item() - expect) < 1e-12

    def test_empty_plan_flagged(self):
        loss, used = mlm_loss(Tensor(np.zeros((0, 5))), np.zeros(0, int))
        assert not used and loss.item() == 0.0


class TestCoherencePlans:
    def test_p_zero_branch_identity(self):
        rng = np.random.default_rng(0)
        # force the P=0 branch by drawing until one appears
        for _ in range(50):
            plan = plan_coherence(np.array([3]), cap=4, pool_size=9, rng=rng)
            if plan.p_value[0] == 0.0:
                break
        assert plan.p_value[0] == 0.0
        assert plan.segments.sum() == 0
        assert plan.replaced.sum() == 0
        assert plan.true_ratio[0] == 0.0

    def test_p_distribution_half_zero_rest_uniform(self):
        rng = np.random.default_rng(1)
        ps = []
        for _ in range(200):
            plan = plan_coherence(np.full(60, 3), cap=4, pool_size=9, rng=rng)
            ps.extend(plan.p_value)
        ps = np.array(ps)
        assert len(ps) >= 10_000
        zero_frac = (ps == 0.0).mean()
        assert abs(zero_frac - 0.5) <= 0.02
        nonzero = ps[ps > 0]
        assert stats.kstest(nonzero, "uniform").pvalue > 0.01

    def test_b_replacement_rate_half(self):
        rng = np.random.default_rng(2)
        in_b = 0
        replaced = 0
        for _ in range(400):
            plan = plan_coherence(np.full(40, 3), cap=4, pool_size=9, rng=rng)
            in_b += plan.segments.sum()
            replaced += plan.replaced.sum()
        assert in_b >= 10_000
        assert abs(replaced / in_b - 0.5) <= 0.02

    def test_eos_and_pad_never_touched(self):
        rng = np.random.default_rng(3)
        counts = np.array([1, 2, 3])
        for _ in range(200):
            plan = plan_coherence(counts, cap=4, pool_size=9, rng=rng)
            slot = np.arange(4)[None, :]
            beyond = slot >= counts[:, None]
            assert not plan.segments[beyond].any()
            assert not plan.replaced[beyond].any()

    def test_forced_replacement_ratio_binomial(self):
        # oracle: with P forced to 1 every child joins B, so the replacement
        # count per parent is Binomial(n, 1/2) with mean n/2
        rng = np.random.default_rng(4)
        n = 4
        plan = plan_coherence(np.full(20_000, n), cap=8, pool_size=5, rng=rng,
                              p_override=1.0)
        assert plan.segments.sum() == 20_000 * n  # all children in B
        mean_replaced = plan.replaced.sum(axis=1).mean()
        # 4 sigma of Binomial(4, .5)/sqrt(trials)
        assert abs(mean_replaced - 0.5 * n) < 4 * np.sqrt(n * 0.25) / np.sqrt(20_000)

    def test_replacement_changes_only_replaced_slots(self):
        rng = np.random.default_rng(6)
        mat = Tensor(rng.normal(size=(3, 4, 5)))
        pool = Tensor(rng.normal(size=(9, 5)))
        plan = plan_coherence(np.array([3, 3, 3]), cap=4, pool_size=9, rng=rng)
        out = apply_coherence_replacement(mat, plan, pool).data
        same = ~plan.replaced
        assert (out[same] == mat.data[same]).all()
        if plan.replaced.any():
            got = out[plan.replaced]
            want = pool.data[plan.random_pick[plan.replaced]]
            np.testing.assert_array_equal(got, want)


class TestCoherenceChecker:
    @pytest.fixture
    def cc(self):
        cfg = tiny_config()
        store = ParameterStore()
        return cfg, store, CoherenceCheckers(store, cfg, np.random.default_rng(0))

    def test_output_in_unit_interval(self, cc):
        _, _, checker = cc
        v = Tensor(np.random.default_rng(1).normal(size=(10, 16)) * 3)
        out = checker.predict("paragraph", v).data
        assert (out > 0).all() and (out < 1).all()

    def test_zero_final_weights_give_sigmoid_bias(self, cc):
        _, store, checker = cc
        store["cc/paragraph/out_w"].data[...] = 0.0
        store["cc/paragraph/out_b"].data[...] = 0.7
        out = checker.predict("paragraph", Tensor(np.random.default_rng(2).normal(size=(5, 16)))).data
        np.testing.assert_allclose(out, 1 / (1 + np.exp(-0.7)), atol=1e-12)

    def test_loss_values(self):
        assert coherence_loss(Tensor(np.array([0.3])), np.array([0.3])).item() == 0.0
        assert abs(coherence_loss(Tensor(np.array([0.5])), np.array([0.0])).item() - 0.25) < 1e-15

    def test_loss_batch_mean(self):
        pred = np.array([0.2, 0.9, 0.5])
        true = np.array([0.0, 1.0, 0.5])
        expect = np.mean((pred - true) ** 2)
        assert abs(coherence_loss(Tensor(pred), true).item() - expect) < 1e-15
