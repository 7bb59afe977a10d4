"""Source-only statistical baselines on mean-pooled video features."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import FeatureDataset, SnippetSequence

KNN_NEIGHBOR_COUNTS = (3, 5, 10)


@dataclass(frozen=True)
class BaselineReport:
    method: str  # random | knn | nearest_center | nearest_neighbor
    accuracy: float  # percent
    seed: int | None = None
    per_k_accuracy: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 100.0:
            raise ValueError(f"accuracy {self.accuracy} outside [0, 100]")


def pool_video_feature(seq: SnippetSequence) -> np.ndarray:
    """Video-level feature: arithmetic mean over snippets."""
    return seq.features.astype(np.float64).mean(axis=0)


def _pooled(dataset: FeatureDataset) -> np.ndarray:
    return dataset.feature_tensor().astype(np.float64).mean(axis=1)


def _distances(a: np.ndarray, b: np.ndarray, metric: str) -> np.ndarray:
    """Pairwise (len(a), len(b)) distances."""
    if metric == "euclidean":
        diff = a[:, None, :] - b[None, :, :]
        return np.linalg.norm(diff, axis=-1)
    if metric == "cosine":
        an = a / np.clip(np.linalg.norm(a, axis=1, keepdims=True), 1e-12, None)
        bn = b / np.clip(np.linalg.norm(b, axis=1, keepdims=True), 1e-12, None)
        return 1.0 - an @ bn.T
    raise ValueError(f"unknown metric {metric!r}")


def predict_random(test: FeatureDataset, class_count: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.integers(0, class_count, size=len(test))


def predict_knn(
    source: FeatureDataset, test: FeatureDataset, k: int, metric: str = "euclidean"
) -> np.ndarray:
    """Majority label among the k nearest source samples; vote ties go to
    the smallest label, distance ties to the earlier sample."""
    if k > len(source):
        raise ValueError(f"k={k} exceeds source size {len(source)}")
    dists = _distances(_pooled(test), _pooled(source), metric)
    source_labels = source.labels()
    neighbor_idx = np.argsort(dists, axis=1, kind="stable")[:, :k]
    preds = np.empty(len(test), dtype=np.int64)
    for i, idx in enumerate(neighbor_idx):
        votes = np.bincount(source_labels[idx], minlength=source.class_count)
        preds[i] = int(np.argmax(votes))
    return preds


def predict_nearest_center(
    source: FeatureDataset, test: FeatureDataset, metric: str = "euclidean"
) -> np.ndarray:
    pooled = _pooled(source)
    labels = source.labels()
    centers = np.stack(
        [pooled[labels == c].mean(axis=0) for c in range(source.class_count)]
    )
    dists = _distances(_pooled(test), centers, metric)
    return np.argmin(dists, axis=1)


def predict_nearest_neighbor(
    source: FeatureDataset, test: FeatureDataset, metric: str = "euclidean"
) -> np.ndarray:
    dists = _distances(_pooled(test), _pooled(source), metric)
    return source.labels()[np.argmin(dists, axis=1)]


def accuracy_percent(predictions: np.ndarray, labels: np.ndarray) -> float:
    return 100.0 * float(np.mean(np.asarray(predictions) == np.asarray(labels)))


def run_baselines(
    source: FeatureDataset,
    test: FeatureDataset,
    seed: int = 0,
    metric: str = "euclidean",
) -> list[BaselineReport]:
    """All four baselines on one source/test pair.

    The kNN row averages the accuracies at k = 3, 5, 10 and also reports
    each k individually.
    """
    truth = test.labels()
    reports = [
        BaselineReport(
            method="random",
            accuracy=accuracy_percent(predict_random(test, source.class_count, seed), truth),
            seed=seed,
        )
    ]
    per_k = {
        k: accuracy_percent(predict_knn(source, test, k, metric), truth)
        for k in KNN_NEIGHBOR_COUNTS
    }
    reports.append(
        BaselineReport(
            method="knn",
            accuracy=float(np.mean(list(per_k.values()))),
            per_k_accuracy=per_k,
        )
    )
    reports.append(
        BaselineReport(
            method="nearest_center",
            accuracy=accuracy_percent(predict_nearest_center(source, test, metric), truth),
        )
    )
    reports.append(
        BaselineReport(
            method="nearest_neighbor",
            accuracy=accuracy_percent(predict_nearest_neighbor(source, test, metric), truth),
        )
    )
    return reports
