"""On-disk containers: dataset directories and parameter checkpoints.

A dataset directory holds ``manifest.json`` plus one payload file per
sample. Payload layout: magic ``RMFX``, uint16-LE version, uint32-LE
snippet count, uint32-LE dim, then row-major float32-LE values. Checkpoint
directories follow the same discipline with rank-general tensor blobs.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .data import Domain, FeatureDataset, SnippetSequence

DATASET_MAGIC = b"RMFX"
TENSOR_MAGIC = b"RMTB"
FORMAT_VERSION = 1


class DatasetFormatError(ValueError):
    """Raised when a container is missing, truncated, or inconsistent."""


def _write_payload(path: Path, features: np.ndarray) -> None:
    t, d = features.shape
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<H", FORMAT_VERSION))
        f.write(struct.pack("<II", t, d))
        f.write(np.ascontiguousarray(features, dtype="<f4").tobytes())


def read_payload(path: Path) -> np.ndarray:
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise DatasetFormatError(f"payload file missing: {path}") from None
    if raw[:4] != DATASET_MAGIC:
        raise DatasetFormatError(f"bad magic in {path}")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported version {version} in {path}")
    t, d = struct.unpack_from("<II", raw, 6)
    expected = 14 + 4 * t * d
    if len(raw) != expected:
        raise DatasetFormatError(
            f"truncated payload {path}: expected {expected} bytes, got {len(raw)}"
        )
    values = np.frombuffer(raw, dtype="<f4", offset=14)
    return values.reshape(t, d).copy()


def write_dataset(dataset: FeatureDataset, path) -> None:
    """Write a dataset directory; one payload file per sample."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for seq in dataset.sequences:
        fname = f"{seq.sample_id}.rmfx"
        _write_payload(root / fname, seq.features.astype(np.float32))
        entries.append(
            {
                "sample_id": seq.sample_id,
                "label": int(seq.label),
                "domain": seq.domain.value,
                "file": fname,
            }
        )
    manifest = {
        "version": FORMAT_VERSION,
        "class_count": dataset.class_count,
        "snippet_count": dataset.snippet_count,
        "dim": dataset.dim,
        "samples": entries,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")


def read_dataset(path) -> FeatureDataset:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise DatasetFormatError(f"manifest missing in {root}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("version") != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported manifest version in {manifest_path}")
    t, d = manifest["snippet_count"], manifest["dim"]
    sequences = []
    for entry in manifest["samples"]:
        payload = root / entry["file"]
        features = read_payload(payload)
        if features.shape != (t, d):
            raise DatasetFormatError(
                f"shape mismatch in {payload}: header {features.shape}, "
                f"manifest ({t}, {d})"
            )
        sequences.append(
            SnippetSequence(
                sample_id=entry["sample_id"],
                label=entry["label"],
                domain=Domain(entry["domain"]),
                features=features,
            )
        )
    return FeatureDataset(sequences, class_count=manifest["class_count"])


def _write_tensor(path: Path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<H", FORMAT_VERSION))
        f.write(struct.pack("<B", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes())


def _read_tensor(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if raw[:4] != TENSOR_MAGIC:
        raise DatasetFormatError(f"bad magic in {path}")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported version {version} in {path}")
    (rank,) = struct.unpack_from("<B", raw, 6)
    shape = struct.unpack_from(f"<{rank}I", raw, 7)
    offset = 7 + 4 * rank
    count = int(np.prod(shape)) if rank else 1
    if len(raw) != offset + 4 * count:
        raise DatasetFormatError(f"truncated tensor blob {path}")
    return np.frombuffer(raw, dtype="<f4", offset=offset).reshape(shape).copy()


def save_checkpoint(state: dict, hyperparams: dict, path) -> None:
    """Persist named float tensors plus the hyperparameters needed to rebuild."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (name, tensor) in enumerate(sorted(state.items())):
        fname = f"t{i:04d}.rmtb"
        _write_tensor(root / fname, np.asarray(tensor))
        entries.append({"name": name, "file": fname})
    manifest = {
        "version": FORMAT_VERSION,
        "hyperparams": hyperparams,
        "tensors": entries,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")


def load_checkpoint(path) -> tuple[dict, dict]:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise DatasetFormatError(f"manifest missing in {root}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    state = {e["name"]: _read_tensor(root / e["file"]) for e in manifest["tensors"]}
    return manifest["hyperparams"], state


def digest_directory(path) -> str:
    """SHA-256 over every file in a container directory, order-independent."""
    root = Path(path)
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.name.encode())
            h.update(p.read_bytes())
    return h.hexdigest()
