import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from posmask.masking import (
    ACTION_KEEP, ACTION_MASK, ACTION_RANDOM, MaskConfig, apply_position_mask, apply_token_mask,
    restore, sample_mask_plan,
)


def page(n, seed=0, m=1000):
    rng = np.random.default_rng(seed)
    ids = rng.integers(5, 50, size=n)
    a = rng.integers(0, m + 1, size=(n, 2, 2))
    boxes = np.concatenate([a.min(axis=1), a.max(axis=1)], axis=1)[:, [0, 1, 2, 3]]
    return ids, boxes


def test_zero_and_full_rates():
    ids, boxes = page(20)
    elig = np.ones(20, bool)
    p = sample_mask_plan(ids, boxes, elig, MaskConfig(0.0, 0.0, "full"), 0, 50)
    assert p.token_idx.size == 0 and p.position_idx.size == 0
    p = sample_mask_plan(ids, boxes, elig, MaskConfig(1.0, 1.0, "full"), 0, 50)
    assert p.token_idx.tolist() == list(range(20)) == p.position_idx.tolist()


def test_empty_page():
    p = sample_mask_plan([], np.zeros((0, 4)), np.zeros(0, bool), MaskConfig(variant="x1"), 0, 50)
    assert p.token_idx.size == 0 and p.position_idx.size == 0


def test_special_tokens_never_selected():
    ids, boxes = page(30)
    elig = np.ones(30, bool)
    elig[[0, 29]] = False
    p = sample_mask_plan(ids, boxes, elig, MaskConfig(1.0, 1.0, "full"), 1, 50)
    assert 0 not in p.token_idx and 29 not in p.position_idx


def test_token_mask_actions():
    ids, boxes = page(5000, seed=2)
    p = sample_mask_plan(ids, boxes, np.ones(5000, bool), MaskConfig(1.0, 0.0, "none"), 3, 50)
    out = apply_token_mask(ids, p, mask_id=4)
    masked = p.actions == ACTION_MASK
    assert (out[p.token_idx[masked]] == 4).all()
    assert (out[p.token_idx[p.actions == ACTION_KEEP]] == ids[p.token_idx[p.actions == ACTION_KEEP]]).all()
    rand = p.actions == ACTION_RANDOM
    assert (out[p.token_idx[rand]] == p.random_ids[rand]).all()
    frac = np.bincount(p.actions, minlength=3) / len(p.actions)
    np.testing.assert_allclose(frac, [0.8, 0.1, 0.1], atol=0.03)


@pytest.mark.parametrize("variant,coords", [("x1", [0]), ("x1y1", [0, 1]), ("x2y2", [2, 3]), ("full", [0, 1, 2, 3])])
def test_position_mask_sets_grid_max(variant, coords):
    ids, boxes = page(200, seed=4)
    p = sample_mask_plan(ids, boxes, np.ones(200, bool), MaskConfig(0.15, 0.5, variant), 5, 50)
    out = apply_position_mask(boxes, p, 1000)
    K = p.position_idx
    assert (out[np.ix_(K, coords)] == 1000).all()
    other = [c for c in range(4) if c not in coords]
    assert (out[np.ix_(K, other)] == boxes[np.ix_(K, other)]).all()
    untouched = np.setdiff1d(np.arange(200), K)
    assert (out[untouched] == boxes[untouched]).all()
    assert (p.position_targets == boxes[np.ix_(K, coords)]).all()


def test_variant_none_has_empty_k():
    ids, boxes = page(100)
    p = sample_mask_plan(ids, boxes, np.ones(100, bool), MaskConfig(0.15, 1.0, "none"), 0, 50)
    assert p.position_idx.size == 0


def test_rng_consumption_aligned_across_variants():
    ids, boxes = page(64)
    elig = np.ones(64, bool)
    a = sample_mask_plan(ids, boxes, elig, MaskConfig(variant="none"), 9, 50)
    b = sample_mask_plan(ids, boxes, elig, MaskConfig(variant="full"), 9, 50)
    assert a.token_idx.tolist() == b.token_idx.tolist()
    assert a.actions.tolist() == b.actions.tolist()


def test_invalid_config():
    with pytest.raises(ValueError):
        MaskConfig(token_rate=1.5)
    with pytest.raises(ValueError):
        MaskConfig(variant="y2")


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 80), st.floats(0, 1), st.floats(0, 1),
       st.sampled_from(["none", "x1", "x1y1", "x2y2", "full"]), st.integers(0, 2**32 - 1))
def test_restore_reconstructs_page(n, pj, pk, variant, seed):
    ids, boxes = page(n, seed=seed % 1000)
    p = sample_mask_plan(ids, boxes, np.ones(n, bool), MaskConfig(pj, pk, variant), seed, 50)
    mi = apply_token_mask(ids, p, 4)
    mb = apply_position_mask(boxes, p, 1000)
    ri, rb = restore(mi, mb, p)
    assert ri.tobytes() == ids.astype(np.int64).tobytes()
    assert rb.tobytes() == boxes.astype(np.int64).tobytes()
