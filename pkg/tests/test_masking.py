import numpy as np
import pytest

from prsnet.masking import (
    MaskBlock,
    MaskConfigError,
    MaskPlan,
    apply_mask,
    coverage,
    default_ranges,
    mask_batch,
    rasterize,
    sample_mask_plan,
)
from prsnet.tensor import ShapeError, Tensor


def test_seed7_coverage_window():
    plan = sample_mask_plan(7, 128, 256, 0.75)
    assert 23921 <= plan.indicator.sum() <= 25232
    assert plan.indicator.shape == (256, 128)


def test_seed7_is_deterministic():
    a, b = sample_mask_plan(7), sample_mask_plan(7)
    assert a.blocks == b.blocks
    np.testing.assert_array_equal(a.indicator, b.indicator)


def test_different_seeds_differ():
    assert sample_mask_plan(1).blocks != sample_mask_plan(2).blocks


@pytest.mark.parametrize("seed", range(20))
def test_blocks_are_wide(seed):
    plan = sample_mask_plan(seed)
    for blk in plan.blocks:
        assert blk.w >= 2 * blk.h
        assert blk.w <= 4 * blk.h
        assert 0 <= blk.x and blk.x + blk.w <= 128 and 0 <= blk.y and blk.y + blk.h <= 256


def test_indicator_is_union_of_blocks():
    plan = sample_mask_plan(3)
    np.testing.assert_array_equal(plan.indicator, rasterize(plan.blocks, 128, 256))


def test_inverted_aspect():
    plan = sample_mask_plan(5, inverted=True, pw_range=(4, 16), ph_range=(16, 64))
    assert all(b.h >= 2 * b.w for b in plan.blocks)
    assert 0.73 <= coverage(plan) <= 0.77


@pytest.mark.parametrize("w,h", [(32, 64), (64, 128)])
def test_scaled_ranges(w, h):
    plan = sample_mask_plan(0, w, h)
    assert 0.73 <= coverage(plan) <= 0.77


def test_default_ranges_at_full_size():
    assert default_ranges(128, 256) == ((16, 127), (8, 32))


def test_infeasible_constraints():
    with pytest.raises(MaskConfigError):
        sample_mask_plan(0, 16, 16, pw_range=(1, 3), ph_range=(4, 8))
    with pytest.raises(MaskConfigError):
        sample_mask_plan(0, ratio=1.2)


def test_json_round_trip():
    plan = sample_mask_plan(11, 32, 64)
    back = MaskPlan.from_json(plan.to_json())
    assert back.blocks == plan.blocks and back.seed == 11
    np.testing.assert_array_equal(back.indicator, plan.indicator)


class TestApplyMask:
    def test_top_left_block(self):
        plan = MaskPlan(8, 6, [MaskBlock(0, 0, 4, 2)])
        out = apply_mask(np.ones((3, 6, 8), np.float32), plan)
        assert (out[:, :2, :4] == 0).all()
        assert out.sum() == 3 * (48 - 8)

    def test_empty_plan_is_identity(self):
        img = np.random.default_rng(0).uniform(size=(3, 6, 8))
        np.testing.assert_array_equal(apply_mask(img, MaskPlan(8, 6, [])), img)

    @pytest.mark.parametrize("seed", range(5))
    def test_elementwise_oracle(self, seed):
        rng = np.random.default_rng(seed)
        img = rng.uniform(0.1, 1.0, size=(2, 3, 64, 32)).astype(np.float32)
        plan = sample_mask_plan(seed, 32, 64)
        out = apply_mask(img, plan)
        for n in range(2):
            for c in range(3):
                for y in range(64):
                    for x in range(32):
                        expected = 0.0 if plan.indicator[y, x] else img[n, c, y, x]
                        assert out[n, c, y, x] == expected

    def test_tensor_input(self):
        plan = MaskPlan(4, 4, [MaskBlock(0, 0, 2, 1)])
        out = apply_mask(Tensor(np.ones((1, 4, 4))), plan)
        assert isinstance(out, Tensor) and out.data.sum() == 14

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            apply_mask(np.ones((3, 5, 5)), MaskPlan(4, 4, []))


class TestCoverage:
    def test_full_block(self):
        assert coverage(MaskPlan(8, 4, [MaskBlock(0, 0, 8, 4)])) == 1.0

    def test_no_blocks(self):
        assert coverage(MaskPlan(8, 4, [])) == 0.0

    def test_overlap_counts_union(self):
        plan = MaskPlan(10, 10, [MaskBlock(0, 0, 4, 2), MaskBlock(2, 0, 4, 2)])
        assert coverage(plan) == pytest.approx(12 / 100)


def test_mask_batch_uses_per_image_plans():
    imgs = np.ones((3, 3, 64, 32), np.float32)
    masked, ind = mask_batch(imgs, seed=9)
    assert ind.shape == (3, 1, 64, 32)
    for i in range(3):
        np.testing.assert_array_equal(ind[i, 0], sample_mask_plan(9 ^ i, 32, 64).indicator)
        np.testing.assert_array_equal(masked[i], imgs[i] * (1 - ind[i]))
