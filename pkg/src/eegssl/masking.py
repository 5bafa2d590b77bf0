"""Mask planning: block-wise context preservation plus baseline strategies.

A MaskPlan fixes, for one sample and one masked view, which patch positions
the context encoder may see and which contiguous target blocks the predictor
must regress. Every plan is a pure function of (l, config, seed), and every
plan for the same (l, config) preserves exactly the same number of patches so
batches stay rectangular.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numutil import ceil_exact, round_half_up

STRATEGIES = ("ssp", "random", "block")


class MaskingError(ValueError):
    """Raised for mask configurations that cannot produce a valid plan."""


@dataclass(frozen=True)
class MaskConfig:
    """Knobs for plan generation.

    mask_ratio is the fraction of patches hidden from the context encoder;
    preserve_blocks is how many contiguous blocks the ssp strategy keeps.
    """

    mask_ratio: float = 0.5
    preserve_blocks: int = 3
    strategy: str = "ssp"
    num_target_blocks: int = 4
    num_views: int = 2
    target_block_width: int | None = None  # None -> ceil(0.15 * l)

    def __post_init__(self):
        if not 0.0 < self.mask_ratio < 1.0:
            raise MaskingError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        if self.preserve_blocks < 1:
            raise MaskingError("preserve_blocks must be >= 1")
        if self.strategy not in STRATEGIES:
            raise MaskingError(f"unknown strategy {self.strategy!r}, expected one of {STRATEGIES}")
        if self.num_target_blocks < 1:
            raise MaskingError("num_target_blocks must be >= 1")
        if self.num_views < 1:
            raise MaskingError("num_views must be >= 1")
        if self.target_block_width is not None and self.target_block_width < 1:
            raise MaskingError("target_block_width must be >= 1")

    def resolved_target_width(self, l: int) -> int:
        width = self.target_block_width if self.target_block_width is not None else ceil_exact(0.15 * l)
        return min(max(width, 1), l)


@dataclass(frozen=True)
class MaskPlan:
    """Preserved context positions and target blocks for one masked view.

    loss_indices[i] is target_blocks[i] minus the preserved set: positions the
    context encoder saw are excluded from the prediction loss.
    """

    length: int
    preserved: np.ndarray  # sorted unique int64 indices
    target_blocks: tuple[np.ndarray, ...]
    loss_indices: tuple[np.ndarray, ...]

    def __post_init__(self):
        preserved = np.asarray(self.preserved, dtype=np.int64)
        if preserved.size and (preserved.min() < 0 or preserved.max() >= self.length):
            raise MaskingError("preserved indices out of range")
        if np.any(np.diff(preserved) <= 0):
            raise MaskingError("preserved indices must be sorted and unique")
        object.__setattr__(self, "preserved", preserved)
        object.__setattr__(self, "target_blocks", tuple(np.asarray(b, dtype=np.int64) for b in self.target_blocks))
        object.__setattr__(self, "loss_indices", tuple(np.asarray(b, dtype=np.int64) for b in self.loss_indices))

    @property
    def masked(self) -> np.ndarray:
        """Complement of the preserved set."""
        keep = np.ones(self.length, dtype=bool)
        keep[self.preserved] = False
        return np.nonzero(keep)[0].astype(np.int64)


def preserved_count(l: int, mask_ratio: float) -> int:
    """Exact number of visible patches: l - round(mask_ratio * l)."""
    return l - round_half_up(mask_ratio * l)


def ssp_block_size(l: int, mask_ratio: float, preserve_blocks: int) -> int:
    """Width of each preserved block: ceil((1 - mask_ratio) * l / preserve_blocks)."""
    if l < 1:
        raise MaskingError("l must be >= 1")
    if not 0.0 < mask_ratio < 1.0:
        raise MaskingError(f"mask_ratio must lie in (0, 1), got {mask_ratio}")
    if preserve_blocks < 1:
        raise MaskingError("preserve_blocks must be >= 1")
    return ceil_exact((1.0 - mask_ratio) * l / preserve_blocks)


def _expand_block(start: int, width: int, l: int) -> np.ndarray:
    # Symmetric expansion around the start, extra element to the right for
    # even widths, clipped at the sequence ends without re-extension.
    left = max(0, start - (width - 1) // 2)
    right = min(l - 1, start + width // 2)
    return np.arange(left, right + 1, dtype=np.int64)


def _sample_target_blocks(
    l: int, cfg: MaskConfig, rng: np.random.Generator, preserved: np.ndarray
) -> tuple[tuple[np.ndarray, ...], tuple[np.ndarray, ...]]:
    width = cfg.resolved_target_width(l)
    starts = rng.integers(0, l - width + 1, size=cfg.num_target_blocks)
    blocks = tuple(np.arange(s, s + width, dtype=np.int64) for s in starts)
    preserved_set = set(preserved.tolist())
    loss = tuple(
        np.asarray([j for j in block.tolist() if j not in preserved_set], dtype=np.int64)
        for block in blocks
    )
    return blocks, loss


def make_ssp_plan(l: int, cfg: MaskConfig, seed) -> MaskPlan:
    """Block-wise context preservation.

    Draw order (all from one generator seeded by ``seed``):
      1. preserve_blocks starting points, uniform without replacement;
      2. if the clipped block union overshoots the exact preserved count,
         indices to drop (never touching the first half of block 0, which
         keeps the guaranteed contiguous run alive); if it undershoots,
         singleton indices to add from the complement;
      3. target block starting points.
    """
    rng = np.random.default_rng(seed)
    target = preserved_count(l, cfg.mask_ratio)
    if target < cfg.preserve_blocks:
        raise MaskingError(
            f"cannot place {cfg.preserve_blocks} nonempty blocks in "
            f"{target} preserved patches (l={l}, mask_ratio={cfg.mask_ratio})"
        )
    width = ssp_block_size(l, cfg.mask_ratio, cfg.preserve_blocks)
    starts = rng.choice(l, size=cfg.preserve_blocks, replace=False)
    blocks = [_expand_block(int(s), width, l) for s in starts]
    union = np.unique(np.concatenate(blocks))

    if union.size > target:
        protected_len = min(width // 2, target)
        protected = set(blocks[0][:protected_len].tolist())
        candidates = np.asarray([i for i in union.tolist() if i not in protected], dtype=np.int64)
        drop = rng.choice(candidates, size=union.size - target, replace=False)
        preserved = np.setdiff1d(union, drop)
    elif union.size < target:
        complement = np.setdiff1d(np.arange(l, dtype=np.int64), union)
        add = rng.choice(complement, size=target - union.size, replace=False)
        preserved = np.union1d(union, add)
    else:
        preserved = union

    target_blocks, loss = _sample_target_blocks(l, cfg, rng, preserved)
    return MaskPlan(l, preserved, target_blocks, loss)


def make_random_plan(l: int, cfg: MaskConfig, seed) -> MaskPlan:
    """Uniform-shuffle baseline: keep the first (1 - mask_ratio) * l of a permutation."""
    rng = np.random.default_rng(seed)
    target = preserved_count(l, cfg.mask_ratio)
    perm = rng.permutation(l)
    preserved = np.sort(perm[:target]).astype(np.int64)
    target_blocks, loss = _sample_target_blocks(l, cfg, rng, preserved)
    return MaskPlan(l, preserved, target_blocks, loss)


def make_block_plan(l: int, cfg: MaskConfig, seed) -> MaskPlan:
    """Single-chunk baseline: mask one contiguous run of round(mask_ratio * l)."""
    rng = np.random.default_rng(seed)
    masked_len = round_half_up(cfg.mask_ratio * l)
    if masked_len >= l:
        raise MaskingError("block strategy would mask the whole sequence")
    start = int(rng.integers(0, l - masked_len + 1))
    keep = np.ones(l, dtype=bool)
    keep[start : start + masked_len] = False
    preserved = np.nonzero(keep)[0].astype(np.int64)
    target_blocks, loss = _sample_target_blocks(l, cfg, rng, preserved)
    return MaskPlan(l, preserved, target_blocks, loss)


_PLAN_MAKERS = {"ssp": make_ssp_plan, "random": make_random_plan, "block": make_block_plan}


def make_plan(l: int, cfg: MaskConfig, seed) -> MaskPlan:
    return _PLAN_MAKERS[cfg.strategy](l, cfg, seed)


def make_views(l: int, cfg: MaskConfig, seed) -> list[MaskPlan]:
    """num_views independent plans from per-view seeds spawned off ``seed``."""
    if isinstance(seed, np.random.SeedSequence):
        root = seed
    else:
        root = np.random.SeedSequence(seed)
    return [make_plan(l, cfg, np.random.default_rng(s)) for s in root.spawn(cfg.num_views)]


def boundary_count(plan: MaskPlan) -> int:
    """Number of preserved <-> masked transitions along the sequence."""
    keep = np.zeros(plan.length, dtype=np.int8)
    keep[plan.preserved] = 1
    return int(np.sum(keep[1:] != keep[:-1]))


def preserved_run_lengths(plan: MaskPlan) -> list[int]:
    """Lengths of maximal contiguous preserved runs, in positional order."""
    runs: list[int] = []
    previous = None
    for idx in plan.preserved.tolist():
        if previous is not None and idx == previous + 1:
            runs[-1] += 1
        else:
            runs.append(1)
        previous = idx
    return runs
