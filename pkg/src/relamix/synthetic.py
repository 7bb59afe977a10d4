"""Paired source/target dataset generation with a controllable domain shift.

Samples are class-conditional Gaussians around per-class, per-snippet mean
vectors. The target domain reuses the source means after an orthogonal
rotation and a per-class translation, so the size of the gap is a direct
function of the shift parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from .data import Domain, FeatureDataset, SnippetSequence

CENTER_RADIUS = 5.0
SNIPPET_OFFSET_RADIUS = 2.0


@dataclass(frozen=True)
class DomainShiftSpec:
    """Parameterizes how far the target domain sits from the source.

    rotation_strength is the rotation angle scale in radians,
    bias_strength the per-class translation magnitude, and noise_std the
    within-domain sample noise applied to both domains.
    """

    rotation_strength: float = 0.0
    bias_strength: float = 0.0
    noise_std: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.rotation_strength < 0 or self.bias_strength < 0 or self.noise_std < 0:
            raise ValueError("shift magnitudes must be non-negative")

    def rotation_matrix(self, dim: int) -> np.ndarray:
        """Orthogonal mixing matrix: expm of a scaled random skew-symmetric map."""
        if dim < 2:
            raise ValueError("rotation undefined for dim < 2")
        if self.rotation_strength == 0.0:
            return np.eye(dim)
        rng = np.random.default_rng(self.seed)
        a = rng.standard_normal((dim, dim))
        skew = a - a.T
        skew *= self.rotation_strength / np.linalg.norm(skew, 2)
        rot = expm(skew)
        if not np.allclose(rot.T @ rot, np.eye(dim), atol=1e-6):
            raise RuntimeError("rotation drifted from orthogonality")
        return rot


def _unit_rows(rng: np.random.Generator, shape) -> np.ndarray:
    v = rng.standard_normal(shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _domain_means(
    class_count: int,
    snippet_count: int,
    dim: int,
    rng: np.random.Generator,
    center_collapse: float,
) -> np.ndarray:
    """Per-class, per-snippet mean vectors, shape (C, T, d).

    Class centers sit on a sphere; per-snippet offsets are centered across
    time so the video-level mean of a class equals its center. Raising
    center_collapse shrinks the centers together, leaving class identity
    only in the snippet-level structure.
    """
    centers = CENTER_RADIUS * _unit_rows(rng, (class_count, dim))
    centers *= 1.0 - center_collapse
    offsets = SNIPPET_OFFSET_RADIUS * _unit_rows(rng, (class_count, snippet_count, dim))
    offsets -= offsets.mean(axis=1, keepdims=True)
    return centers[:, None, :] + offsets


def _sample_domain(
    means: np.ndarray,
    per_class: int,
    noise_std: float,
    rng: np.random.Generator,
    prefix: str,
    domain: Domain,
) -> list[SnippetSequence]:
    class_count, snippet_count, dim = means.shape
    seqs = []
    for c in range(class_count):
        noise = rng.standard_normal((per_class, snippet_count, dim))
        samples = means[c][None, :, :] + noise_std * noise
        for i in range(per_class):
            seqs.append(
                SnippetSequence(
                    sample_id=f"{prefix}_c{c:02d}_i{i:05d}",
                    label=c,
                    domain=domain,
                    features=samples[i].astype(np.float32),
                )
            )
    return seqs


def generate_pair(
    class_count: int,
    per_class_source: int,
    per_class_target: int,
    snippet_count: int,
    dim: int,
    shift: DomainShiftSpec,
    target_train_fraction: float = 0.5,
    center_collapse: float = 0.0,
) -> tuple[FeatureDataset, FeatureDataset, FeatureDataset]:
    """Build (source, target_train_pool, target_test) datasets.

    Deterministic under shift.seed: the same spec always yields
    byte-identical datasets.
    """
    if class_count < 2:
        raise ValueError("need at least 2 classes")
    if per_class_source < 2 or per_class_target < 2:
        raise ValueError("need at least 2 samples per class and domain")
    if dim < 2:
        raise ValueError("rotation undefined for dim < 2")
    if not 0.0 < target_train_fraction < 1.0:
        raise ValueError("target_train_fraction must be in (0, 1)")
    if not 0.0 <= center_collapse <= 1.0:
        raise ValueError("center_collapse must be in [0, 1]")

    rng = np.random.default_rng(shift.seed)
    source_means = _domain_means(class_count, snippet_count, dim, rng, center_collapse)

    rotation = shift.rotation_matrix(dim)
    bias = shift.bias_strength * _unit_rows(rng, (class_count, dim))
    target_means = source_means @ rotation.T + bias[:, None, :]

    source_seqs = _sample_domain(
        source_means, per_class_source, shift.noise_std, rng, "src", Domain.SOURCE
    )
    target_seqs = _sample_domain(
        target_means, per_class_target, shift.noise_std, rng, "tgt", Domain.TARGET
    )

    pool_per_class = max(1, int(round(per_class_target * target_train_fraction)))
    if pool_per_class >= per_class_target:
        pool_per_class = per_class_target - 1
    pool, test = [], []
    for seq in target_seqs:
        index_in_class = int(seq.sample_id.rsplit("_i", 1)[1])
        (pool if index_in_class < pool_per_class else test).append(seq)

    return (
        FeatureDataset(source_seqs, class_count),
        FeatureDataset(pool, class_count),
        FeatureDataset(test, class_count),
    )
