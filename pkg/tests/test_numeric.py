"""Numeric core: oracle attention and the blockwise-softmax accumulator."""

import math

import numpy as np
import pytest

from spsim.numeric import (
    AttentionSpec,
    blockwise_attention_step,
    finalize_attention,
    init_attention_state,
    merge_attention_partials,
    reference_attention,
)


# ---------------------------------------------------------------------------
# Independent brute-force oracle: three nested loops over heads, queries and
# keys, per-element softmax via math.exp.  Written before the package
# implementation; intentionally shares no code with it.
# ---------------------------------------------------------------------------

def _naive_gqa_attention(q, k, v, q_pos, kv_pos):
    num_q_heads, n_q, head_dim = q.shape
    num_kv_heads = k.shape[0]
    group = num_q_heads // num_kv_heads
    scale = 1.0 / math.sqrt(head_dim)
    out = np.zeros((num_q_heads, n_q, head_dim))
    for h in range(num_q_heads):
        kv_h = h // group
        for i in range(n_q):
            scores = []
            visible = []
            for j in range(k.shape[1]):
                if kv_pos[j] <= q_pos[i]:
                    s = 0.0
                    for d in range(head_dim):
                        s += q[h, i, d] * k[kv_h, j, d]
                    scores.append(s * scale)
                    visible.append(j)
            m = max(scores)
            weights = [math.exp(s - m) for s in scores]
            denom = sum(weights)
            for w, j in zip(weights, visible):
                for d in range(head_dim):
                    out[h, i, d] += (w / denom) * v[kv_h, j, d]
    return out


def _random_qkv(rng, spec, length):
    q = rng.standard_normal((spec.num_q_heads, length, spec.head_dim))
    k = rng.standard_normal((spec.num_kv_heads, length, spec.head_dim))
    v = rng.standard_normal((spec.num_kv_heads, length, spec.head_dim))
    return q, k, v


class TestAttentionSpec:
    def test_hidden_size_and_grouping(self):
        spec = AttentionSpec(num_q_heads=8, num_kv_heads=2, head_dim=16)
        assert spec.hidden_size == 128
        assert spec.group_size == 4
        assert spec.kv_head_of(0) == 0
        assert spec.kv_head_of(7) == 1

    def test_rejects_non_dividing_kv_heads(self):
        with pytest.raises(ValueError, match="divide"):
            AttentionSpec(num_q_heads=6, num_kv_heads=4, head_dim=8)

    def test_rejects_non_positive_counts(self):
        with pytest.raises(ValueError):
            AttentionSpec(num_q_heads=0, num_kv_heads=1, head_dim=8)


class TestReferenceAttention:
    def test_single_key_output_equals_v(self):
        spec = AttentionSpec(num_q_heads=3, num_kv_heads=3, head_dim=5)
        rng = np.random.default_rng(0)
        q, k, v = _random_qkv(rng, spec, 1)
        out = reference_attention(q, k, v, spec)
        np.testing.assert_array_equal(out, v)

    def test_deterministic_across_runs(self):
        spec = AttentionSpec(num_q_heads=4, num_kv_heads=2, head_dim=8)
        rng = np.random.default_rng(1)
        q, k, v = _random_qkv(rng, spec, 17)
        a = reference_attention(q, k, v, spec)
        b = reference_attention(q, k, v, spec)
        np.testing.assert_array_equal(a, b)

    def test_matches_naive_triple_loop_oracle(self):
        spec = AttentionSpec(num_q_heads=4, num_kv_heads=2, head_dim=8)
        rng = np.random.default_rng(2)
        q, k, v = _random_qkv(rng, spec, 64)
        pos = np.arange(64)
        got = reference_attention(q, k, v, spec, pos, pos)
        want = _naive_gqa_attention(q, k, v, pos, pos)
        assert np.max(np.abs(got - want)) < 1e-12

    def test_causal_suffix_invariance(self):
        # Appending tokens never changes outputs at earlier positions.
        spec = AttentionSpec(num_q_heads=2, num_kv_heads=1, head_dim=4)
        rng = np.random.default_rng(3)
        q, k, v = _random_qkv(rng, spec, 40)
        full = reference_attention(q, k, v, spec)
        short = reference_attention(q[:, :25], k[:, :25], v[:, :25], spec,
                                    np.arange(25), np.arange(25))
        np.testing.assert_array_equal(full[:, :25], short)

    def test_rejects_non_finite_input(self):
        spec = AttentionSpec(num_q_heads=1, num_kv_heads=1, head_dim=2)
        q = np.array([[[np.nan, 0.0]]])
        k = v = np.ones((1, 1, 2))
        with pytest.raises(ValueError, match="non-finite"):
            reference_attention(q, k, v, spec)

    def test_rejects_dimension_mismatch(self):
        spec = AttentionSpec(num_q_heads=2, num_kv_heads=2, head_dim=4)
        rng = np.random.default_rng(4)
        q, k, v = _random_qkv(rng, spec, 6)
        with pytest.raises(ValueError, match="shape"):
            reference_attention(q, k[:1], v[:1], spec)

    def test_rejects_non_increasing_positions(self):
        spec = AttentionSpec(num_q_heads=1, num_kv_heads=1, head_dim=2)
        rng = np.random.default_rng(5)
        q, k, v = _random_qkv(rng, spec, 4)
        with pytest.raises(ValueError, match="strictly increasing"):
            reference_attention(q, k, v, spec, np.array([0, 2, 1, 3]), np.arange(4))


class TestBlockwiseAccumulation:
    def test_single_block_equals_reference(self):
        spec = AttentionSpec(num_q_heads=4, num_kv_heads=4, head_dim=8)
        rng = np.random.default_rng(10)
        q, k, v = _random_qkv(rng, spec, 32)
        pos = np.arange(32)
        state = init_attention_state(4, 32, 8)
        state = blockwise_attention_step(state, q, k, v, pos, pos)
        got = finalize_attention(state)
        want = reference_attention(q, k, v, spec)
        assert np.max(np.abs(got - want)) < 1e-12

    def test_four_contiguous_blocks_match_reference(self):
        spec = AttentionSpec(num_q_heads=4, num_kv_heads=2, head_dim=8)
        rng = np.random.default_rng(11)
        q, k, v = _random_qkv(rng, spec, 64)
        pos = np.arange(64)
        state = init_attention_state(4, 64, 8)
        for start in range(0, 64, 16):
            block = slice(start, start + 16)
            state = blockwise_attention_step(
                state, q, k[:, block], v[:, block], pos, pos[block]
            )
        got = finalize_attention(state)
        want = reference_attention(q, k, v, spec)
        assert np.max(np.abs(got - want)) < 1e-10

    def test_fully_masked_block_leaves_state_unchanged(self):
        spec = AttentionSpec(num_q_heads=2, num_kv_heads=2, head_dim=4)
        rng = np.random.default_rng(12)
        q, k, v = _random_qkv(rng, spec, 8)
        pos = np.arange(8)
        state = blockwise_attention_step(
            init_attention_state(2, 8, 4), q, k, v, pos, pos
        )
        # every key position beyond every query position
        future_k = rng.standard_normal((2, 5, 4))
        future_v = rng.standard_normal((2, 5, 4))
        after = blockwise_attention_step(
            state, q, future_k, future_v, pos, np.arange(100, 105)
        )
        np.testing.assert_array_equal(after.partial_output, state.partial_output)
        np.testing.assert_array_equal(after.running_max, state.running_max)
        np.testing.assert_array_equal(after.running_denominator, state.running_denominator)

    @pytest.mark.parametrize("seed", range(8))
    def test_any_partition_any_order_matches_reference(self, seed):
        # Oracle equivalence across random partitions of the key set.
        rng = np.random.default_rng(100 + seed)
        q_heads = int(rng.choice([2, 4, 8]))
        kv_heads = int(rng.choice([h for h in (1, 2, 4, 8) if q_heads % h == 0]))
        head_dim = int(rng.choice([4, 8, 16, 32]))
        length = int(rng.integers(8, 257))
        spec = AttentionSpec(num_q_heads=q_heads, num_kv_heads=kv_heads, head_dim=head_dim)
        q, k, v = _random_qkv(rng, spec, length)
        pos = np.arange(length)

        cuts = np.sort(rng.choice(np.arange(1, length), size=min(3, length - 1), replace=False))
        blocks = np.split(np.arange(length), cuts)
        order = rng.permutation(len(blocks))

        state = init_attention_state(q_heads, length, head_dim)
        for bi in order:
            rows = blocks[bi]
            state = blockwise_attention_step(
                state, q, k[:, rows], v[:, rows], pos, pos[rows]
            )
        got = finalize_attention(state)
        want = reference_attention(q, k, v, spec)
        assert np.max(np.abs(got - want)) < 1e-10

    def test_rejects_state_shape_mismatch(self):
        spec = AttentionSpec(num_q_heads=2, num_kv_heads=2, head_dim=4)
        rng = np.random.default_rng(13)
        q, k, v = _random_qkv(rng, spec, 8)
        with pytest.raises(ValueError, match="state shape"):
            blockwise_attention_step(
                init_attention_state(2, 5, 4), q, k, v, np.arange(8), np.arange(8)
            )


class TestMergePartials:
    def test_merge_with_empty_state_is_identity(self):
        spec = AttentionSpec(num_q_heads=2, num_kv_heads=1, head_dim=4)
        rng = np.random.default_rng(20)
        q, k, v = _random_qkv(rng, spec, 12)
        pos = np.arange(12)
        state = blockwise_attention_step(
            init_attention_state(2, 12, 4), q, k, v, pos, pos
        )
        merged = merge_attention_partials(state, init_attention_state(2, 12, 4))
        np.testing.assert_array_equal(merged.partial_output, state.partial_output)
        np.testing.assert_array_equal(merged.running_denominator, state.running_denominator)

    def test_merge_commutes(self):
        spec = AttentionSpec(num_q_heads=4, num_kv_heads=2, head_dim=8)
        rng = np.random.default_rng(21)
        q, k, v = _random_qkv(rng, spec, 30)
        pos = np.arange(30)
        a = blockwise_attention_step(
            init_attention_state(4, 30, 8), q, k[:, :14], v[:, :14], pos, pos[:14]
        )
        b = blockwise_attention_step(
            init_attention_state(4, 30, 8), q, k[:, 14:], v[:, 14:], pos, pos[14:]
        )
        ab = finalize_attention(merge_attention_partials(a, b))
        ba = finalize_attention(merge_attention_partials(b, a))
        assert np.max(np.abs(ab - ba)) < 1e-12

    @pytest.mark.parametrize("seed", range(4))
    def test_random_split_merge_matches_reference(self, seed):
        rng = np.random.default_rng(200 + seed)
        spec = AttentionSpec(num_q_heads=4, num_kv_heads=4, head_dim=8)
        length = 48
        q, k, v = _random_qkv(rng, spec, length)
        pos = np.arange(length)
        mask = rng.random(length) < 0.5
        halves = []
        for rows in (np.flatnonzero(mask), np.flatnonzero(~mask)):
            state = init_attention_state(4, length, 8)
            if rows.size:
                state = blockwise_attention_step(
                    state, q, k[:, rows], v[:, rows], pos, pos[rows]
                )
            halves.append(state)
        got = finalize_attention(merge_attention_partials(*halves))
        want = reference_attention(q, k, v, spec)
        assert np.max(np.abs(got - want)) < 1e-10

    def test_rejects_query_dimension_mismatch(self):
        with pytest.raises(ValueError, match="query dimensions"):
            merge_attention_partials(
                init_attention_state(2, 4, 8), init_attention_state(2, 5, 8)
            )

    def test_finalize_requires_visited_rows(self):
        with pytest.raises(ValueError, match="never saw a key"):
            finalize_attention(init_attention_state(1, 3, 2))
