"""Multi-scale relational index sets over a snippet sequence.

A scale r selects ordered tuples of r distinct snippet indices; a
sequence of length T defines the T - 1 scales r in [2, T], and the
aggregator averages one vector per scale.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import comb

import numpy as np

# Per-scale tuple budget; one aggregate per scale is averaged downstream, so
# a small sample keeps compute bounded while reducing variance.
DEFAULT_TUPLES_PER_SCALE = 3


def enumerate_scales(sequence_length: int) -> list[int]:
    """All tuple lengths usable over a sequence of length T: [2, ..., T]."""
    if sequence_length < 2:
        raise ValueError(
            f"no relations definable over sequence of length {sequence_length}"
        )
    return list(range(2, sequence_length + 1))


def _unrank_combination(n: int, r: int, rank: int) -> tuple[int, ...]:
    """rank-th r-subset of range(n) in lexicographic order."""
    out = []
    start = 0
    remaining = r
    while remaining > 0:
        for value in range(start, n):
            block = comb(n - value - 1, remaining - 1)
            if rank < block:
                out.append(value)
                start = value + 1
                remaining -= 1
                break
            rank -= block
    return tuple(out)


def sample_relation_tuples(
    sequence_length: int, scale: int, count: int, seed: int
) -> list[tuple[int, ...]]:
    """Draw `count` distinct strictly increasing index tuples of length `scale`.

    Uniform without replacement over all (T choose scale) tuples, returned in
    lexicographic order; deterministic under seed.
    """
    if not 2 <= scale <= sequence_length:
        raise ValueError(f"scale {scale} outside [2, {sequence_length}]")
    total = comb(sequence_length, scale)
    if not 1 <= count <= total:
        raise ValueError(
            f"cannot draw {count} tuples at scale {scale}: maximum is {total}"
        )
    rng = np.random.default_rng(seed)
    if count == total:
        ranks = range(total)
    elif total <= 100_000:
        ranks = sorted(rng.choice(total, size=count, replace=False).tolist())
    else:
        picked: set[int] = set()
        while len(picked) < count:
            picked.add(int(rng.integers(total)))
        ranks = sorted(picked)
    return [_unrank_combination(sequence_length, scale, rank) for rank in ranks]


@dataclass(frozen=True)
class RelationPlan:
    """The sampled relation tuples for every scale of one sequence length."""

    sequence_length: int
    seed: int
    tuples_per_scale: dict[int, list[tuple[int, ...]]]

    @property
    def scales(self) -> list[int]:
        return sorted(self.tuples_per_scale)

    def tuple_counts(self) -> dict[int, int]:
        return {r: len(ts) for r, ts in self.tuples_per_scale.items()}

    def __post_init__(self):
        expected = enumerate_scales(self.sequence_length)
        if self.scales != expected:
            raise ValueError(f"plan scales {self.scales} != {expected}")
        for r, tuples in self.tuples_per_scale.items():
            for t in tuples:
                if len(t) != r or list(t) != sorted(set(t)):
                    raise ValueError(f"tuple {t} invalid at scale {r}")
                if t[0] < 0 or t[-1] >= self.sequence_length:
                    raise ValueError(f"tuple {t} out of range at scale {r}")


def build_plan(
    sequence_length: int,
    tuples_per_scale: int | None = None,
    seed: int = 0,
) -> RelationPlan:
    """Sample a RelationPlan; per-scale count defaults to min(3, T choose r).

    Distinct scales draw from decorrelated seed streams so tuples at one
    scale do not constrain another.
    """
    requested = DEFAULT_TUPLES_PER_SCALE if tuples_per_scale is None else tuples_per_scale
    if requested < 1:
        raise ValueError(f"tuples_per_scale must be >= 1, got {requested}")
    per_scale: dict[int, list[tuple[int, ...]]] = {}
    for r in enumerate_scales(sequence_length):
        want = min(requested, comb(sequence_length, r))
        per_scale[r] = sample_relation_tuples(
            sequence_length, r, want, seed=seed * 1_000_003 + r
        )
    return RelationPlan(sequence_length=sequence_length, seed=seed, tuples_per_scale=per_scale)
