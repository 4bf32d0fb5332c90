import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from textsmith.attention import (
    AttentionMap,
    LatentMask,
    TokenLayout,
    attention_probabilities,
    enforce_identity_self_attention,
    extract_token_field,
    invert_self_attention,
    reassign_cross_attention,
)

import oracles
from conftest import as_map, random_attention_probs


def latent_mask(values):
    return LatentMask(values=torch.tensor(values, dtype=torch.float64))


class TestTokenLayout:
    def test_two_char_text(self):
        layout = TokenLayout.for_text("AB", n_tokens=8)
        assert layout.char_indices == (3, 4)
        assert layout.idx_text_end == 5
        assert (layout.idx_seq_start, layout.idx_seq_end, layout.idx_text_start) == (0, 1, 2)

    def test_blank_text(self):
        layout = TokenLayout.for_text("", n_tokens=8)
        assert layout.char_indices == ()
        assert layout.idx_text_end == 3

    def test_table_too_small(self):
        with pytest.raises(ValueError):
            TokenLayout.for_text("TOOLONG", n_tokens=8)

    def test_non_contiguous_chars_rejected(self):
        with pytest.raises(ValueError):
            TokenLayout(n_tokens=8, char_indices=(3, 5))


class TestAttentionProbabilities:
    def test_frozen_logit_pair(self):
        # scores [0, ln 2] must soften to exactly [1/3, 2/3]
        q = torch.tensor([[1.0]], dtype=torch.float64)
        k = torch.tensor([[0.0], [math.log(2.0)]], dtype=torch.float64)
        amap = attention_probabilities(q, k, kind="cross", spatial=(1, 1))
        assert torch.allclose(amap.probs,
                              torch.tensor([[1 / 3, 2 / 3]], dtype=torch.float64),
                              atol=1e-12)

    def test_rows_stochastic(self, rng):
        q = torch.from_numpy(rng.normal(size=(12, 6)))
        k = torch.from_numpy(rng.normal(size=(9, 6)))
        amap = attention_probabilities(q, k, kind="cross", spatial=(3, 4))
        assert torch.allclose(amap.probs.sum(dim=-1), torch.ones(12, dtype=torch.float64))
        assert float(amap.probs.min()) >= 0

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            attention_probabilities(torch.zeros(4, 3), torch.zeros(5, 2),
                                    kind="cross", spatial=(2, 2))


class TestMapValidation:
    def test_rejects_non_stochastic(self):
        with pytest.raises(ValueError):
            AttentionMap(probs=torch.full((2, 2), 0.9), kind="cross", spatial=(1, 2))

    def test_rejects_negative(self):
        probs = torch.tensor([[1.5, -0.5], [0.5, 0.5]])
        with pytest.raises(ValueError):
            AttentionMap(probs=probs, kind="cross", spatial=(1, 2))

    def test_self_must_be_square(self):
        probs = torch.full((4, 3), 1 / 3)
        with pytest.raises(ValueError):
            AttentionMap(probs=probs, kind="self", spatial=(2, 2))

    def test_validate_escape_hatch(self):
        probs = torch.full((2, 2), 0.9)
        amap = AttentionMap(probs=probs, kind="cross", spatial=(1, 2), validate=False)
        assert amap.n_keys == 2


class TestInversion:
    def test_frozen_row(self):
        probs = torch.tensor([
            [0.7, 0.2, 0.1],
            [0.3, 0.3, 0.4],
            [0.25, 0.5, 0.25],
        ], dtype=torch.float64)
        amap = AttentionMap(probs=probs, kind="self", spatial=(1, 3))
        mask = latent_mask([[1.0, 0.0, 0.0]])
        out = invert_self_attention(amap, mask)
        # flip of [.7,.2,.1] is [.1,.6,.7]; frozen softmax of that:
        expected = torch.tensor(
            [0.2236716107261818, 0.36877214225601485, 0.40755624701780335],
            dtype=torch.float64)
        assert torch.allclose(out.probs[0], expected, atol=1e-12)
        # untouched rows come back bit-identical
        assert torch.equal(out.probs[1:], probs[1:])

    def test_raw_flip_without_renormalize(self):
        probs = torch.tensor([[0.7, 0.2, 0.1],
                              [1 / 3, 1 / 3, 1 / 3],
                              [1 / 3, 1 / 3, 1 / 3]], dtype=torch.float64)
        amap = AttentionMap(probs=probs, kind="self", spatial=(1, 3))
        mask = latent_mask([[1.0, 0.0, 0.0]])
        out = invert_self_attention(amap, mask, renormalize=False)
        assert torch.allclose(out.probs[0],
                              torch.tensor([0.1, 0.6, 0.7], dtype=torch.float64),
                              atol=1e-12)

    def test_uniform_rows_are_fixed_point(self):
        probs = torch.full((4, 4), 0.25, dtype=torch.float64)
        amap = AttentionMap(probs=probs, kind="self", spatial=(2, 2))
        mask = latent_mask([[1.0, 1.0], [1.0, 1.0]])
        out = invert_self_attention(amap, mask)
        assert torch.allclose(out.probs, probs, atol=1e-15)

    def test_argmax_argmin_swap(self, rng):
        for _ in range(25):
            probs = random_attention_probs(rng, 16, 16)
            amap = as_map(probs, "self", (4, 4))
            mask_vals = rng.integers(0, 2, size=(4, 4)).astype(np.float64)
            mask = LatentMask(values=torch.from_numpy(mask_vals))
            out = invert_self_attention(amap, mask)
            for i in range(16):
                if mask_vals.reshape(-1)[i] < 0.5:
                    continue
                row = probs[i]
                new = out.probs[i].numpy()
                assert np.argmax(new) in np.flatnonzero(row == row.min())
                assert np.argmin(new) in np.flatnonzero(row == row.max())

    def test_matches_scalar_oracle(self, rng):
        for _ in range(10):
            probs = random_attention_probs(rng, 16, 16)
            mask_vals = rng.integers(0, 2, size=(4, 4)).astype(np.float64)
            amap = as_map(probs, "self", (4, 4))
            mask = LatentMask(values=torch.from_numpy(mask_vals))
            out = invert_self_attention(amap, mask)
            expected = oracles.invert_self_attention_rows(
                probs.tolist(), mask_vals.reshape(-1).tolist())
            assert np.allclose(out.probs.numpy(), expected, atol=1e-12)

    def test_input_not_mutated(self, rng):
        probs = random_attention_probs(rng, 4, 4)
        amap = as_map(probs, "self", (2, 2))
        mask = latent_mask([[1.0, 1.0], [1.0, 1.0]])
        invert_self_attention(amap, mask)
        assert np.array_equal(amap.probs.numpy(), probs)

    def test_requires_self_kind(self, rng):
        amap = as_map(random_attention_probs(rng, 4, 6), "cross", (2, 2))
        with pytest.raises(ValueError):
            invert_self_attention(amap, latent_mask([[1.0, 0.0], [0.0, 0.0]]))

    def test_mask_alignment_checked(self, rng):
        amap = as_map(random_attention_probs(rng, 4, 4), "self", (2, 2))
        with pytest.raises(ValueError):
            invert_self_attention(amap, latent_mask([[1.0, 0.0, 0.0]]))


class TestReassignment:
    def layout(self, n_tokens=6, n_chars=2):
        return TokenLayout(n_tokens=n_tokens, char_indices=tuple(range(3, 3 + n_chars)))

    def test_frozen_two_by_two(self, rng):
        probs = random_attention_probs(rng, 4, 6)
        amap = as_map(probs, "cross", (2, 2))
        mask = latent_mask([[1.0, 0.0], [0.0, 1.0]])
        out = reassign_cross_attention(amap, mask, self.layout())
        expected = np.zeros((4, 6))
        expected[0, 1] = expected[3, 1] = 1.0   # masked rows -> sequence end
        expected[1, 0] = expected[2, 0] = 1.0   # background rows -> sequence start
        assert np.array_equal(out.probs.numpy(), expected)

    def test_rows_exactly_one_hot(self, rng):
        probs = random_attention_probs(rng, 16, 8)
        amap = as_map(probs, "cross", (4, 4))
        mask_vals = rng.integers(0, 2, size=(4, 4)).astype(np.float64)
        out = reassign_cross_attention(amap, LatentMask(values=torch.from_numpy(mask_vals)),
                                       self.layout(n_tokens=8))
        arr = out.probs.numpy()
        assert set(np.unique(arr)) <= {0.0, 1.0}
        assert np.array_equal(arr.sum(axis=1), np.ones(16))
        # character and padding columns carry nothing
        assert not arr[:, 2:].any()

    def test_idempotent(self, rng):
        probs = random_attention_probs(rng, 16, 8)
        amap = as_map(probs, "cross", (4, 4))
        mask_vals = rng.integers(0, 2, size=(4, 4)).astype(np.float64)
        mask = LatentMask(values=torch.from_numpy(mask_vals))
        once = reassign_cross_attention(amap, mask, self.layout(n_tokens=8))
        twice = reassign_cross_attention(once, mask, self.layout(n_tokens=8))
        assert torch.equal(once.probs, twice.probs)

    def test_token_field_reads_back_mask(self, rng):
        probs = random_attention_probs(rng, 16, 8)
        amap = as_map(probs, "cross", (4, 4))
        mask_vals = rng.integers(0, 2, size=(4, 4)).astype(np.float64)
        mask = LatentMask(values=torch.from_numpy(mask_vals))
        layout = self.layout(n_tokens=8)
        out = reassign_cross_attention(amap, mask, layout)
        end_field = extract_token_field(out, layout, layout.idx_seq_end)
        start_field = extract_token_field(out, layout, layout.idx_seq_start)
        assert np.array_equal(end_field.numpy(), mask_vals)
        assert np.array_equal(start_field.numpy(), 1.0 - mask_vals)

    def test_requires_cross_kind(self, rng):
        amap = as_map(random_attention_probs(rng, 4, 4), "self", (2, 2))
        with pytest.raises(ValueError):
            reassign_cross_attention(amap, latent_mask([[1.0, 0.0], [0.0, 0.0]]),
                                     self.layout(n_tokens=4, n_chars=0))

    def test_token_count_mismatch(self, rng):
        amap = as_map(random_attention_probs(rng, 4, 6), "cross", (2, 2))
        with pytest.raises(ValueError):
            reassign_cross_attention(amap, latent_mask([[1.0, 0.0], [0.0, 0.0]]),
                                     self.layout(n_tokens=8))


class TestIdentityEnforcement:
    def test_single_cell_region_is_noop(self, rng):
        probs = random_attention_probs(rng, 4, 4)
        amap = as_map(probs, "self", (2, 2))
        region = latent_mask([[1.0, 0.0], [0.0, 0.0]])
        out = enforce_identity_self_attention(amap, [region])
        assert np.allclose(out.probs.numpy(), probs, atol=1e-12)

    def test_three_cell_block(self, rng):
        probs = random_attention_probs(rng, 4, 4)
        amap = as_map(probs, "self", (2, 2))
        region = latent_mask([[1.0, 1.0], [1.0, 0.0]])
        out = enforce_identity_self_attention(amap, [region])
        arr = out.probs.numpy()
        reg = [0, 1, 2]
        for i in reg:
            for j in reg:
                if i == j:
                    assert abs(arr[i, j] - probs[i, reg].sum()) < 1e-12
                else:
                    assert arr[i, j] == 0.0
            assert abs(arr[i].sum() - 1.0) < 1e-12
        # the row outside the region is untouched
        assert np.array_equal(arr[3], probs[3])

    def test_matches_scalar_oracle(self, rng):
        for _ in range(10):
            probs = random_attention_probs(rng, 16, 16)
            amap = as_map(probs, "self", (4, 4))
            m1 = np.zeros((4, 4)); m1[:, 0:2] = 1.0
            m2 = np.zeros((4, 4)); m2[:, 2:3] = 1.0
            masks = [LatentMask(values=torch.from_numpy(m)) for m in (m1, m2)]
            out = enforce_identity_self_attention(amap, masks)
            regions = [np.flatnonzero(m.reshape(-1)).tolist() for m in (m1, m2)]
            expected = oracles.enforce_identity_rows(probs.tolist(), regions)
            assert np.allclose(out.probs.numpy(), expected, atol=1e-12)

    def test_idempotent(self, rng):
        probs = random_attention_probs(rng, 16, 16)
        amap = as_map(probs, "self", (4, 4))
        m1 = np.zeros((4, 4)); m1[1:3, 0:2] = 1.0
        m2 = np.zeros((4, 4)); m2[:, 3:4] = 1.0
        masks = [LatentMask(values=torch.from_numpy(m)) for m in (m1, m2)]
        once = enforce_identity_self_attention(amap, masks)
        twice = enforce_identity_self_attention(once, masks)
        assert np.allclose(once.probs.numpy(), twice.probs.numpy(), atol=1e-12)

    def test_overlapping_regions_rejected(self, rng):
        amap = as_map(random_attention_probs(rng, 4, 4), "self", (2, 2))
        m = latent_mask([[1.0, 1.0], [0.0, 0.0]])
        with pytest.raises(ValueError):
            enforce_identity_self_attention(amap, [m, m])

    def test_gradients_pass_through(self, rng):
        probs = torch.from_numpy(random_attention_probs(rng, 9, 9)).requires_grad_(True)
        amap = AttentionMap(probs=probs, kind="self", spatial=(3, 3))
        region = latent_mask([[1.0, 1.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
        out = enforce_identity_self_attention(amap, [region])
        out.probs.pow(2).sum().backward()
        assert probs.grad is not None
        assert bool(torch.isfinite(probs.grad).all())


class TestTokenField:
    def test_row_major_reshape(self, rng):
        probs = random_attention_probs(rng, 6, 5)
        amap = as_map(probs, "cross", (2, 3))
        layout = TokenLayout(n_tokens=5, char_indices=(3,))
        field = extract_token_field(amap, layout, 3)
        for y in range(2):
            for x in range(3):
                assert field[y, x] == amap.probs[y * 3 + x, 3]

    def test_index_out_of_range(self, rng):
        amap = as_map(random_attention_probs(rng, 4, 5), "cross", (2, 2))
        layout = TokenLayout(n_tokens=5, char_indices=(3,))
        with pytest.raises(ValueError):
            extract_token_field(amap, layout, 5)

    def test_requires_cross(self, rng):
        amap = as_map(random_attention_probs(rng, 4, 4), "self", (2, 2))
        layout = TokenLayout(n_tokens=4, char_indices=())
        with pytest.raises(ValueError):
            extract_token_field(amap, layout, 0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10 ** 6))
def test_ops_preserve_row_stochasticity(seed):
    rng = np.random.default_rng(seed)
    probs = random_attention_probs(rng, 16, 16)
    amap = as_map(probs, "self", (4, 4))
    mask_vals = rng.integers(0, 2, size=(4, 4)).astype(np.float64)
    mask = LatentMask(values=torch.from_numpy(mask_vals))

    inverted = invert_self_attention(amap, mask)
    assert np.allclose(inverted.probs.sum(dim=-1).numpy(), 1.0, atol=1e-9)

    strips = np.zeros((2, 4, 4))
    strips[0, :, 0:2] = 1.0
    strips[1, :, 2:4] = 1.0
    char_masks = [LatentMask(values=torch.from_numpy(s)) for s in strips]
    enforced = enforce_identity_self_attention(amap, char_masks)
    assert np.allclose(enforced.probs.sum(dim=-1).numpy(), 1.0, atol=1e-9)

    cross = as_map(random_attention_probs(rng, 16, 8), "cross", (4, 4))
    layout = TokenLayout(n_tokens=8, char_indices=(3, 4))
    reassigned = reassign_cross_attention(cross, mask, layout)
    assert np.array_equal(reassigned.probs.sum(dim=-1).numpy(), np.ones(16))
