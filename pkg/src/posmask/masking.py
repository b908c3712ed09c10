"""Token and position masking.

J (token masks) and K (position masks) are drawn independently per token, so a
token can lose both its identity and its coordinates.  Originals are recorded
in the :class:`MaskPlan` before anything is replaced.
"""
from dataclasses import dataclass

import numpy as np

COORDS = ("x1", "y1", "x2", "y2")

VARIANTS = {
    "none": (),
    "x1": (0,),
    "x1y1": (0, 1),
    "x2y2": (2, 3),
    "full": (0, 1, 2, 3),
}

ACTION_MASK, ACTION_RANDOM, ACTION_KEEP = 0, 1, 2


def variant_coords(variant):
    try:
        return VARIANTS[variant]
    except KeyError:
        raise ValueError(f"unknown mask variant {variant!r}; choose from {sorted(VARIANTS)}") from None


@dataclass(frozen=True)
class MaskConfig:
    token_rate: float = 0.15
    position_rate: float = 0.15
    variant: str = "none"
    mask_prob: float = 0.8
    random_prob: float = 0.1

    def __post_init__(self):
        for name in ("token_rate", "position_rate", "mask_prob", "random_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"mask.{name} must lie in [0, 1], got {v}")
        if self.mask_prob + self.random_prob > 1.0:
            raise ValueError("mask.mask_prob + mask.random_prob exceeds 1")
        variant_coords(self.variant)

    @property
    def coords(self):
        return VARIANTS[self.variant]


@dataclass
class MaskPlan:
    token_idx: np.ndarray  # J, sorted
    position_idx: np.ndarray  # K, sorted
    token_targets: np.ndarray  # original ids at J
    position_targets: np.ndarray  # (|K|, len(coords)) original coordinates
    actions: np.ndarray  # per j in J: mask / random / keep
    random_ids: np.ndarray  # replacement id per j (used when action is random)
    coords: tuple

    @property
    def overlap(self):
        return np.intersect1d(self.token_idx, self.position_idx)


def _rng(seed_or_rng):
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def sample_mask_plan(token_ids, boxes, eligible, config, rng, vocab_size):
    """Draw J and K for one page.

    ``eligible`` marks indices that may be masked (special tokens excluded).
    The generator is advanced by the same amount whatever the rates or the
    variant, so runs that differ only in masking settings see aligned streams.
    """
    rng = _rng(rng)
    token_ids = np.asarray(token_ids, dtype=np.int64)
    boxes = np.asarray(boxes, dtype=np.int64).reshape(-1, 4)
    eligible = np.asarray(eligible, dtype=bool)
    n = len(token_ids)
    coords = config.coords
    u_tok = rng.random(n)
    u_pos = rng.random(n)
    u_act = rng.random(n)
    rand_ids = rng.integers(0, vocab_size, size=n) if n else np.zeros(0, dtype=np.int64)

    J = np.nonzero(eligible & (u_tok < config.token_rate))[0]
    if coords:
        K = np.nonzero(eligible & (u_pos < config.position_rate))[0]
    else:
        K = np.zeros(0, dtype=np.int64)
    a = u_act[J]
    actions = np.where(a < config.mask_prob, ACTION_MASK,
                       np.where(a < config.mask_prob + config.random_prob, ACTION_RANDOM, ACTION_KEEP))
    return MaskPlan(
        token_idx=J,
        position_idx=K,
        token_targets=token_ids[J].copy(),
        position_targets=boxes[K][:, list(coords)].copy() if coords else np.zeros((0, 0), np.int64),
        actions=actions.astype(np.int64),
        random_ids=rand_ids[J].astype(np.int64),
        coords=coords,
    )


def apply_token_mask(token_ids, plan, mask_id):
    out = np.array(token_ids, dtype=np.int64, copy=True)
    J = plan.token_idx
    out[J[plan.actions == ACTION_MASK]] = mask_id
    rand = plan.actions == ACTION_RANDOM
    out[J[rand]] = plan.random_ids[rand]
    return out


def apply_position_mask(boxes, plan, m):
    """Set the variant's coordinates of every k in K to the grid maximum ``m``."""
    out = np.array(boxes, dtype=np.int64, copy=True).reshape(-1, 4)
    if plan.coords and len(plan.position_idx):
        rows = plan.position_idx[:, None]
        out[rows, list(plan.coords)] = m
    return out


def restore(token_ids, boxes, plan):
    """Undo both maskings using the recorded targets."""
    ids = np.array(token_ids, dtype=np.int64, copy=True)
    out = np.array(boxes, dtype=np.int64, copy=True).reshape(-1, 4)
    ids[plan.token_idx] = plan.token_targets
    if plan.coords and len(plan.position_idx):
        out[plan.position_idx[:, None], list(plan.coords)] = plan.position_targets
    return ids, out
