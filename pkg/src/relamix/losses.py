"""Training objectives: alignment, auxiliary contrastive, cross-entropy.

The two contrastive terms share one form: the positive similarity is not
part of the denominator, so unlike standard InfoNCE the loss can go
negative. Prototypes enter as gradient constants.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class LossWeights:
    cdia: float = 1e-4
    ce_source: float = 1.0
    ce_target: float = 1.0
    ce_synth: float = 1e-2
    aux: float = 1e-4

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value < 0:
                raise ValueError(f"loss weight {name} must be non-negative")


@dataclass
class PrototypeBank:
    """Per-class mean embeddings of the few-shot target samples."""

    vectors: torch.Tensor  # (C, d), detached
    present: torch.Tensor  # (C,) bool
    refresh_epoch: int = 0


def cosine_similarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine over the last axis; similarity with a zero vector is 0."""
    dot = (a * b).sum(dim=-1)
    denom = a.norm(dim=-1) * b.norm(dim=-1)
    safe = dot / denom.clamp_min(1e-12)
    return torch.where(denom > 0, safe, torch.zeros_like(safe))


def compute_prototypes(
    embeddings: torch.Tensor, labels: torch.Tensor, class_count: int, refresh_epoch: int = 0
) -> PrototypeBank:
    """Arithmetic mean embedding per class; every class must be present."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    vectors = torch.zeros(class_count, embeddings.shape[-1], dtype=embeddings.dtype)
    present = torch.zeros(class_count, dtype=torch.bool)
    for c in range(class_count):
        mask = labels == c
        if not mask.any():
            raise ValueError(f"class {c} has no embeddings to build a prototype from")
        vectors[c] = embeddings[mask].mean(dim=0)
        present[c] = True
    return PrototypeBank(vectors=vectors.detach(), present=present, refresh_epoch=refresh_epoch)


def _contrastive(
    anchors: torch.Tensor, positive_similarity: torch.Tensor, negatives: torch.Tensor
) -> torch.Tensor:
    # negatives: (N, N_n, d); the positive term is absent from the denominator.
    neg_sim = cosine_similarity(anchors.unsqueeze(1), negatives)
    return (torch.logsumexp(neg_sim, dim=1) - positive_similarity).mean()


def cdia_loss(
    source_embeddings: torch.Tensor,
    source_labels: torch.Tensor,
    prototypes: PrototypeBank,
    negatives: torch.Tensor,
    negative_labels: torch.Tensor,
) -> torch.Tensor:
    """Pull each source embedding toward its class prototype, away from
    other-class negatives.

    negatives has shape (N, N_n, d) with per-anchor labels (N, N_n), all of
    which must differ from the anchor's label.
    """
    labels = torch.as_tensor(source_labels, dtype=torch.long)
    if negatives.ndim != 3 or negatives.shape[1] < 1:
        raise ValueError("need at least one negative per anchor")
    if not prototypes.present[labels].all():
        missing = sorted(set(labels[~prototypes.present[labels]].tolist()))
        raise ValueError(f"no prototype for classes {missing}")
    neg_labels = torch.as_tensor(negative_labels, dtype=torch.long)
    if (neg_labels == labels.unsqueeze(1)).any():
        raise ValueError("a negative shares its anchor's label")
    positives = prototypes.vectors.detach()[labels]
    pos_sim = cosine_similarity(source_embeddings, positives)
    return _contrastive(source_embeddings, pos_sim, negatives)


def aux_loss(
    synth_embeddings: torch.Tensor,
    synth_labels: torch.Tensor,
    permuted_positives: torch.Tensor,
    negatives: torch.Tensor,
    negative_labels: torch.Tensor,
) -> torch.Tensor:
    """Contrastive term on synthesized features: the positive for each anchor
    is the same sequence re-embedded after a random snippet permutation."""
    if negatives.ndim != 3 or negatives.shape[1] < 1:
        raise ValueError("empty negative pool")
    labels = torch.as_tensor(synth_labels, dtype=torch.long)
    neg_labels = torch.as_tensor(negative_labels, dtype=torch.long)
    if (neg_labels == labels.unsqueeze(1)).any():
        raise ValueError("a negative shares its anchor's label")
    pos_sim = cosine_similarity(synth_embeddings, permuted_positives)
    return _contrastive(synth_embeddings, pos_sim, negatives)


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log softmax probability of the true class."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.min() < 0 or labels.max() >= logits.shape[-1]:
        raise ValueError("label outside [0, C)")
    log_norm = torch.logsumexp(logits, dim=-1)
    true_logit = logits.gather(-1, labels.unsqueeze(-1)).squeeze(-1)
    return (log_norm - true_logit).mean()


@dataclass
class LossComponents:
    """One step's loss terms; None marks a term that is switched off."""

    cdia: torch.Tensor | None = None
    ce_source: torch.Tensor | None = None
    ce_target: torch.Tensor | None = None
    ce_synth: torch.Tensor | None = None
    aux: torch.Tensor | None = None

    def as_floats(self) -> dict[str, float]:
        out = {}
        for name, term in self.__dict__.items():
            out[name] = float(term.detach()) if term is not None else 0.0
        return out


def total_loss(components: LossComponents, weights: LossWeights) -> torch.Tensor:
    """Weighted sum of the active terms."""
    total = None
    for name, weight in (
        ("cdia", weights.cdia),
        ("ce_source", weights.ce_source),
        ("ce_target", weights.ce_target),
        ("ce_synth", weights.ce_synth),
        ("aux", weights.aux),
    ):
        term = getattr(components, name)
        if term is None:
            continue
        if not torch.isfinite(term):
            raise FloatingPointError(f"loss term {name} is non-finite: {term}")
        weighted = weight * term
        total = weighted if total is None else total + weighted
    if total is None:
        raise ValueError("no loss component active")
    return total


def sample_negative_indices(
    anchor_labels: np.ndarray,
    pool_labels: np.ndarray,
    per_anchor: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Uniform other-class pool indices per anchor, shape (N, per_anchor).

    Draws with replacement when an anchor's eligible pool is smaller than
    per_anchor; fails only if some anchor has no eligible negative at all.
    """
    anchor_labels = np.asarray(anchor_labels)
    pool_labels = np.asarray(pool_labels)
    out = np.empty((len(anchor_labels), per_anchor), dtype=np.int64)
    for i, label in enumerate(anchor_labels):
        eligible = np.flatnonzero(pool_labels != label)
        if eligible.size == 0:
            raise ValueError(f"no eligible negatives for anchor with label {label}")
        replace = eligible.size < per_anchor
        out[i] = rng.choice(eligible, size=per_anchor, replace=replace)
    return out
