"""Time-alteration masking: contiguous frame blocks up to a target ratio.

Default policy zeroes masked frames. A TERA-style mixed policy (zero / random
noise / keep, with configurable probabilities) is available but not default.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .features import FeatureSequence

MAX_REJECTION_ATTEMPTS = 1000


@dataclass
class MaskPolicy:
    kind: str = "zero"  # "zero" | "tera"
    p_zero: float = 0.8
    p_random: float = 0.1  # remaining probability keeps the original frame
    noise_sigma: float = 1.0


@dataclass
class MaskConfig:
    block_len: int = 7
    ratio: float = 0.15
    policy: MaskPolicy = field(default_factory=MaskPolicy)


@dataclass
class MaskPlan:
    blocks: list[tuple[int, int]]  # (start, length), sorted, non-overlapping
    total_frames: int
    degenerate: bool = False

    def __post_init__(self):
        prev_end = 0
        for start, length in self.blocks:
            if start < prev_end or start < 0 or start + length > self.total_frames or length < 1:
                raise ContractError(f"invalid mask block ({start}, {length}) for T={self.total_frames}")
            prev_end = start + length

    @property
    def num_masked(self) -> int:
        return sum(length for _, length in self.blocks)

    def mask_rows(self) -> np.ndarray:
        idx = np.zeros(self.total_frames, dtype=bool)
        for start, length in self.blocks:
            idx[start:start + length] = True
        return idx


def plan_masks(T: int, block_len: int = 7, ratio: float = 0.15,
               rng: np.random.Generator | None = None) -> MaskPlan:
    """Place round-half-up(ratio*T/block_len) blocks, at least one, uniformly.

    Rejection sampling with a bounded attempt budget; falls back to greedy
    left-to-right placement. Blocks running past the end are truncated, so at
    most one block per plan is shorter than block_len.
    """
    if T < 1:
        raise ContractError(f"T must be >= 1, got {T}")
    if not (0.0 < ratio < 0.5):
        raise ContractError(f"ratio must be in (0, 0.5), got {ratio}")
    if block_len < 1:
        raise ContractError(f"block_len must be >= 1, got {block_len}")
    if rng is None:
        rng = np.random.default_rng(0)
    num_blocks = max(1, math.floor(ratio * T / block_len + 0.5))
    degenerate = num_blocks * block_len > T

    # sample where a full block fits; truncation only happens when T < block_len
    start_limit = max(1, T - block_len + 1)
    starts: list[int] = []
    for _ in range(MAX_REJECTION_ATTEMPTS):
        if len(starts) == num_blocks:
            break
        cand = int(rng.integers(0, start_limit))
        if all(cand + block_len <= s or s + block_len <= cand for s in starts):
            starts.append(cand)
    else:
        # greedy fallback: fill remaining blocks left-to-right into free gaps
        taken = sorted(starts)
        pos = 0
        while len(starts) < num_blocks and pos < T:
            if all(pos + block_len <= s or s + block_len <= pos for s in taken):
                starts.append(pos)
                taken = sorted(starts)
                pos += block_len
            else:
                pos += 1
        if len(starts) < num_blocks:
            degenerate = True

    blocks = [(s, min(block_len, T - s)) for s in sorted(starts)]
    return MaskPlan(blocks, T, degenerate=degenerate)


def apply_masks(x: FeatureSequence, plan: MaskPlan, policy: MaskPolicy | None = None,
                rng: np.random.Generator | None = None) -> FeatureSequence:
    """Corrupted copy of x per the plan; the input is left untouched."""
    if plan.total_frames != x.num_frames:
        raise ContractError(f"plan T={plan.total_frames} but sequence has {x.num_frames} frames")
    policy = policy or MaskPolicy()
    frames = x.frames.copy()
    if policy.kind == "zero":
        frames[plan.mask_rows()] = 0.0
    elif policy.kind == "tera":
        if rng is None:
            raise ContractError("tera policy needs an rng")
        for start, length in plan.blocks:
            u = rng.random()
            if u < policy.p_zero:
                frames[start:start + length] = 0.0
            elif u < policy.p_zero + policy.p_random:
                frames[start:start + length] = rng.normal(
                    0.0, policy.noise_sigma, size=(length, x.dim)
                ).astype(np.float32)
            # else: keep original frames
    else:
        raise ContractError(f"unknown mask policy {policy.kind!r}")
    return FeatureSequence(x.utterance_id, frames, x.frame_shift_ms)
