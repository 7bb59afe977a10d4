"""Core data types, snippet windowing, and the few-shot split protocol."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from enum import Enum

import numpy as np


class Domain(str, Enum):
    SOURCE = "source"
    TARGET = "target"
    SYNTHESIZED = "synthesized"


@dataclass(frozen=True)
class SnippetSequence:
    """One sample: a (T, d) matrix of per-snippet feature vectors."""

    sample_id: str
    label: int
    domain: Domain
    features: np.ndarray

    def __post_init__(self):
        feats = np.asarray(self.features)
        if feats.ndim != 2:
            raise ValueError(f"features must be 2-d, got shape {feats.shape}")
        if feats.shape[0] < 2 or feats.shape[1] < 1:
            raise ValueError(f"need at least 2 snippets and 1 dim, got {feats.shape}")
        if not np.isfinite(feats).all():
            raise ValueError(f"non-finite features in sample {self.sample_id!r}")
        if self.label < 0:
            raise ValueError(f"label must be non-negative, got {self.label}")
        object.__setattr__(self, "features", feats)

    @property
    def snippet_count(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class FeatureDataset:
    """An ordered collection of sequences with uniform (T, d) and labels in [0, C).

    Sequences are kept sorted by sample_id so that seeded sampling is
    reproducible regardless of insertion order.
    """

    sequences: list[SnippetSequence]
    class_count: int

    def __post_init__(self):
        if not self.sequences:
            raise ValueError("dataset must contain at least one sequence")
        self.sequences = sorted(self.sequences, key=lambda s: s.sample_id)
        ids = [s.sample_id for s in self.sequences]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate sample_id in dataset")
        t, d = self.sequences[0].features.shape
        for seq in self.sequences:
            if seq.features.shape != (t, d):
                raise ValueError(
                    f"inconsistent shape for {seq.sample_id!r}: "
                    f"{seq.features.shape} vs ({t}, {d})"
                )
            if not 0 <= seq.label < self.class_count:
                raise ValueError(
                    f"label {seq.label} of {seq.sample_id!r} outside [0, {self.class_count})"
                )

    def __len__(self) -> int:
        return len(self.sequences)

    def __iter__(self):
        return iter(self.sequences)

    @property
    def snippet_count(self) -> int:
        return self.sequences[0].features.shape[0]

    @property
    def dim(self) -> int:
        return self.sequences[0].features.shape[1]

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.sequences], dtype=np.int64)

    def feature_tensor(self) -> np.ndarray:
        """All features stacked into an (N, T, d) array."""
        return np.stack([s.features for s in self.sequences])

    def by_class(self) -> dict[int, list[SnippetSequence]]:
        out: dict[int, list[SnippetSequence]] = {c: [] for c in range(self.class_count)}
        for seq in self.sequences:
            out[seq.label].append(seq)
        return out

    def subset(self, sample_ids) -> "FeatureDataset":
        wanted = set(sample_ids)
        picked = [s for s in self.sequences if s.sample_id in wanted]
        missing = wanted - {s.sample_id for s in picked}
        if missing:
            raise KeyError(f"unknown sample ids: {sorted(missing)}")
        return FeatureDataset(picked, self.class_count)


@dataclass(frozen=True)
class FewShotSplit:
    """Per-class selection of sample ids, fixed by (shot_count, seed)."""

    shot_count: int
    seed: int
    selected_ids: dict[int, list[str]] = field(default_factory=dict)

    def all_ids(self) -> list[str]:
        out: list[str] = []
        for c in sorted(self.selected_ids):
            out.extend(self.selected_ids[c])
        return out


def window_snippets(frame_features, window: int, stride: int, pad: int) -> np.ndarray:
    """Pool an (n_frames, d) frame stream into a (T, d) snippet matrix.

    The stream is zero-padded with `pad` rows at each end; window t averages
    rows [t*stride, t*stride + window) of the padded stream, and
    the snippet count is floor((n_frames + 2*pad - window) / stride) + 1.
    """
    frames = np.asarray(frame_features, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise ValueError(f"frame stream must be (N_frames, d), got {frames.shape}")
    if window < 1 or stride < 1 or pad < 0:
        raise ValueError("window and stride must be >= 1, pad >= 0")
    n, d = frames.shape
    padded_len = n + 2 * pad
    if window > padded_len:
        raise ValueError(f"window {window} exceeds padded length {padded_len}")
    padded = np.zeros((padded_len, d), dtype=frames.dtype)
    padded[pad : pad + n] = frames
    t_snip = (padded_len - window) // stride + 1
    out = np.empty((t_snip, d), dtype=frames.dtype)
    for t in range(t_snip):
        out[t] = padded[t * stride : t * stride + window].mean(axis=0)
    return out


def sample_few_shot_split(dataset: FeatureDataset, shot_count: int, seed: int) -> FewShotSplit:
    """Draw `shot_count` sample ids per class, uniformly without replacement.

    A class with fewer than `shot_count` samples contributes everything it
    has, with a warning rather than a failure.
    """
    if shot_count < 1:
        raise ValueError(f"shot_count must be >= 1, got {shot_count}")
    rng = np.random.default_rng(seed)
    selected: dict[int, list[str]] = {}
    for label, seqs in dataset.by_class().items():
        ids = [s.sample_id for s in seqs]  # already sorted by sample_id
        if not ids:
            continue
        if len(ids) < shot_count:
            warnings.warn(
                f"class {label} has only {len(ids)} samples for shot_count={shot_count}; "
                "taking all of them",
                stacklevel=2,
            )
            selected[label] = list(ids)
        else:
            pick = rng.choice(len(ids), size=shot_count, replace=False)
            selected[label] = [ids[i] for i in sorted(pick)]
    return FewShotSplit(shot_count=shot_count, seed=seed, selected_ids=selected)
