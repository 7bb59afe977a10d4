"""Statistic distribution-based feature mixing.

Source-domain class statistics are computed per snippet position. For a
target anchor, each snippet blends with its top-K nearest class centers
into a diagonal Gaussian from which new target-domain snippet features are
drawn.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Domain, FeatureDataset, SnippetSequence


@dataclass(frozen=True)
class ClassSnippetStatistics:
    """Per-class, per-snippet mean and sample std over the source domain."""

    mean: np.ndarray  # (C, T, d)
    std: np.ndarray  # (C, T, d)
    counts: np.ndarray  # (C,)

    @property
    def class_count(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class SynthesizedDistribution:
    """Blended Gaussian for one target anchor; std is floored at alpha."""

    anchor_id: str
    label: int
    mean: np.ndarray  # (T, d)
    std: np.ndarray  # (T, d)
    selected_classes: list[tuple[int, ...]]  # per snippet, K class indices


def compute_source_statistics(source: FeatureDataset) -> ClassSnippetStatistics:
    """Elementwise mean and sample std (n - 1 denominator) per (class, snippet, dim).

    Only source-domain sequences enter; every class needs at least two of
    them for the sample std to exist.
    """
    groups: dict[int, list[np.ndarray]] = {c: [] for c in range(source.class_count)}
    for seq in source:
        if seq.domain is Domain.SOURCE:
            groups[seq.label].append(seq.features)
    t, d = source.snippet_count, source.dim
    mean = np.zeros((source.class_count, t, d))
    std = np.zeros((source.class_count, t, d))
    counts = np.zeros(source.class_count, dtype=np.int64)
    for c, feats in groups.items():
        if len(feats) < 2:
            raise ValueError(
                f"class {c} has {len(feats)} source sequences; need >= 2 for sample std"
            )
        stacked = np.stack(feats).astype(np.float64)
        mean[c] = stacked.mean(axis=0)
        std[c] = stacked.std(axis=0, ddof=1)
        counts[c] = len(feats)
    return ClassSnippetStatistics(mean=mean, std=std, counts=counts)


def select_topk_centers(
    anchor_snippet: np.ndarray,
    stats: ClassSnippetStatistics,
    snippet_index: int,
    k: int,
) -> tuple[int, ...]:
    """The K classes whose snippet centers sit nearest the anchor snippet.

    Nearest by Euclidean distance (the exp(1 - distance) score is strictly
    decreasing in it); distance ties break toward the lower class index.
    """
    if not 1 <= k <= stats.class_count:
        raise ValueError(f"k must be in [1, {stats.class_count}], got {k}")
    centers = stats.mean[:, snippet_index, :]
    distances = np.linalg.norm(centers - np.asarray(anchor_snippet, dtype=np.float64), axis=1)
    order = np.argsort(distances, kind="stable")
    return tuple(int(c) for c in order[:k])


def synthesize_distribution(
    anchor: SnippetSequence,
    stats: ClassSnippetStatistics,
    k: int,
    alpha: float,
) -> SynthesizedDistribution:
    """Blend a target anchor with its selected class statistics, per snippet.

    Mean averages the anchor snippet with the K class means (denominator
    K + 1); std averages the K class stds and adds the alpha floor.
    """
    if anchor.domain is not Domain.TARGET:
        raise ValueError(f"anchor {anchor.sample_id!r} is not a target-domain sequence")
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    t_snip, d = anchor.features.shape
    mean = np.empty((t_snip, d))
    std = np.empty((t_snip, d))
    selected = []
    feats = anchor.features.astype(np.float64)
    for t in range(t_snip):
        classes = select_topk_centers(feats[t], stats, t, k)
        selected.append(classes)
        idx = list(classes)
        mean[t] = (feats[t] + stats.mean[idx, t, :].sum(axis=0)) / (k + 1)
        std[t] = stats.std[idx, t, :].mean(axis=0) + alpha
    return SynthesizedDistribution(
        anchor_id=anchor.sample_id,
        label=anchor.label,
        mean=mean,
        std=std,
        selected_classes=selected,
    )


def sample_features(
    dist: SynthesizedDistribution, count: int, seed: int
) -> list[SnippetSequence]:
    """Draw `count` synthesized sequences from the blended Gaussian.

    Every snippet row is sampled elementwise (diagonal covariance),
    independently across dims, snippets, and samples.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    rng = np.random.default_rng(seed)
    t_snip, d = dist.mean.shape
    draws = dist.mean[None] + dist.std[None] * rng.standard_normal((count, t_snip, d))
    return [
        SnippetSequence(
            sample_id=f"syn_{dist.anchor_id}_{j:04d}",
            label=dist.label,
            domain=Domain.SYNTHESIZED,
            features=draws[j].astype(np.float32),
        )
        for j in range(count)
    ]


def build_synthesized_set(
    target_fewshot: FeatureDataset,
    stats: ClassSnippetStatistics,
    k: int,
    alpha: float,
    per_class_total: int,
    seed: int,
) -> FeatureDataset:
    """Synthesize per_class_total sequences per class, split as evenly as
    possible among that class's anchors (earlier anchors take remainders)."""
    if per_class_total < 1:
        raise ValueError(f"per_class_total must be >= 1, got {per_class_total}")
    sequences: list[SnippetSequence] = []
    by_class = target_fewshot.by_class()
    for c in range(target_fewshot.class_count):
        anchors = by_class[c]
        if not anchors:
            raise ValueError(f"class {c} absent from the few-shot set")
        base, extra = divmod(per_class_total, len(anchors))
        for i, anchor in enumerate(anchors):
            quota = base + (1 if i < extra else 0)
            if quota == 0:
                continue
            dist = synthesize_distribution(anchor, stats, k, alpha)
            sequences.extend(sample_features(dist, quota, seed=seed * 1_000_003 + hash_id(anchor.sample_id)))
    return FeatureDataset(sequences, class_count=target_fewshot.class_count)


def hash_id(sample_id: str) -> int:
    """Stable small hash of a sample id (Python's hash is salted per run)."""
    h = 0
    for ch in sample_id:
        h = (h * 131 + ord(ch)) % 1_000_000_007
    return h
