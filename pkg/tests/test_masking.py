import numpy as np
import pytest
import torch

from genojepa.masking import (
    DimensionMismatchError,
    EmptySequenceError,
    MaskConfig,
    MaskPlan,
    apply_token_mask,
    plans_to_bool,
    remask_hidden,
    sample_spans,
)


class TestSampleSpans:
    def test_ratio_and_span_count_bounds(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            plan = sample_spans(101, 1, rng, first_maskable=1)
            ratio = len(plan.masked) / 100
            assert 0.20 <= ratio <= 0.40
            assert 1 <= len(plan.spans) <= 3

    def test_single_position(self):
        plan = sample_spans(2, 1, np.random.default_rng(1), first_maskable=1)
        assert plan.spans == ((1, 2),)
        assert plan.masked == (1,)

    def test_empty_sequence(self):
        with pytest.raises(EmptySequenceError):
            sample_spans(1, 1, np.random.default_rng(0))

    def test_spans_disjoint_and_union_is_masked(self):
        rng = np.random.default_rng(2)
        for _ in range(300):
            n = int(rng.integers(2, 80))
            plan = sample_spans(n, 1, rng, first_maskable=1)
            covered = sorted(i for s, e in plan.spans for i in range(s, e))
            assert covered == sorted(set(covered))
            assert tuple(covered) == plan.masked

    def test_specials_never_masked(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            plan = sample_spans(33, 1, rng, first_maskable=1)
            assert 0 not in plan.masked
            assert max(plan.masked) <= 32
        for _ in range(200):
            plan = sample_spans(33, 1, rng, first_maskable=0)
            assert 32 not in plan.masked  # trailing [EOS] slot untouched

    def test_bit_exact_per_seed(self):
        a = sample_spans(64, 1, np.random.default_rng(77), first_maskable=1)
        b = sample_spans(64, 1, np.random.default_rng(77), first_maskable=1)
        assert a == b

    def test_mean_ratio_matches_uniform_draw(self):
        # Uniform aggregate ratio over [0.20, 0.40] has mean 0.30.
        rng = np.random.default_rng(4)
        ratios = [
            len(sample_spans(257, 1, rng, first_maskable=1).masked) / 256
            for _ in range(2000)
        ]
        assert 0.28 <= float(np.mean(ratios)) <= 0.32

    def test_custom_config(self):
        cfg = MaskConfig(num_spans_min=2, num_spans_max=2, ratio_min=0.5, ratio_max=0.5)
        plan = sample_spans(41, 1, np.random.default_rng(5), cfg, first_maskable=1)
        assert len(plan.spans) == 2
        assert len(plan.masked) == 20


class TestApplyTokenMask:
    def test_replaces_and_records(self):
        plan = MaskPlan(n_tokens=4, spans=((1, 3),))
        masked, targets = apply_token_mask([1, 7, 8, 9], plan, mask_id=3)
        assert masked == [1, 3, 3, 9]
        assert targets == {1: 7, 2: 8}

    def test_input_not_mutated(self):
        ids = [1, 7, 8, 9]
        apply_token_mask(ids, MaskPlan(n_tokens=4, spans=((1, 2),)), mask_id=3)
        assert ids == [1, 7, 8, 9]

    def test_out_of_range(self):
        plan = MaskPlan(n_tokens=6, spans=((5, 6),))
        with pytest.raises(IndexError):
            apply_token_mask([1, 7, 8, 9], plan, mask_id=3)

    def test_plan_requires_some_mask(self):
        with pytest.raises(ValueError):
            MaskPlan(n_tokens=4, spans=())


class TestRemaskHidden:
    def test_only_planned_rows_replaced(self):
        hidden = torch.randn(5, 8)
        plan = MaskPlan(n_tokens=5, spans=((1, 2),))
        out = remask_hidden(hidden, plan, torch.zeros(8))
        assert torch.equal(out[1], torch.zeros(8))
        for i in (0, 2, 3, 4):
            assert torch.equal(out[i], hidden[i])

    def test_input_not_mutated(self):
        hidden = torch.randn(4, 6)
        before = hidden.clone()
        remask_hidden(hidden, MaskPlan(n_tokens=4, spans=((0, 4),)), torch.ones(6))
        assert torch.equal(hidden, before)

    def test_row_count_mismatch(self):
        plan = MaskPlan(n_tokens=6, spans=((1, 2),))
        with pytest.raises(DimensionMismatchError):
            remask_hidden(torch.randn(4, 8), plan, torch.zeros(8))

    def test_embedding_width_mismatch(self):
        plan = MaskPlan(n_tokens=4, spans=((1, 2),))
        with pytest.raises(DimensionMismatchError):
            remask_hidden(torch.randn(4, 8), plan, torch.zeros(7))


def test_plans_to_bool_matches_masked_sets():
    rng = np.random.default_rng(6)
    plans = [sample_spans(20, 1, rng, first_maskable=1) for _ in range(8)]
    mat = plans_to_bool(plans, 20)
    for b, plan in enumerate(plans):
        assert set(torch.nonzero(mat[b]).flatten().tolist()) == set(plan.masked)
