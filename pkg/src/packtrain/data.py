"""Datasets, deterministic batching, and the dedupable preprocessing stage."""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"PTDS"
FORMAT_VERSION = 1


class DataError(Exception):
    pass


@dataclass(frozen=True)
class Dataset:
    dataset_id: str
    features: np.ndarray  # (N, D) float64
    labels: np.ndarray    # (N,) int64
    class_count: int

    def __post_init__(self):
        if self.features.ndim != 2 or len(self.features) < 1:
            raise DataError("features must be a non-empty N x D matrix")
        if len(self.labels) != len(self.features):
            raise DataError("label count does not match feature rows")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise DataError("label out of range for class_count")

    @property
    def n(self) -> int:
        return len(self.features)

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def synth_dataset(n, d, classes, seed, spread=4.0) -> Dataset:
    """Gaussian class blobs; separable enough for a linear model to learn."""
    if n < 1 or d < 1 or classes < 1:
        raise DataError("n, d and classes must all be >= 1")
    rng = np.random.default_rng(seed)
    centers = rng.normal(scale=spread, size=(classes, d))
    labels = rng.integers(0, classes, size=n)
    features = centers[labels] + rng.normal(size=(n, d))
    return Dataset(
        dataset_id=f"synth-{n}x{d}c{classes}s{seed}",
        features=features, labels=labels.astype(np.int64),
        class_count=classes,
    )


def save_dataset(ds: Dataset, path):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQQI", FORMAT_VERSION, ds.n, ds.dim, ds.class_count))
        fh.write(ds.features.astype("<f8").tobytes())
        fh.write(ds.labels.astype("<u4").tobytes())


def load_dataset(path) -> Dataset:
    """Load a binary tensor file (magic PTDS) or comma-delimited text.

    The dataset id is a digest of the raw bytes, so identical files always
    map to the same id.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw:
        raise DataError(f"{path}: empty file")
    dataset_id = "file-" + hashlib.sha256(raw).hexdigest()[:16]
    if raw[:4] == MAGIC:
        return _parse_binary(raw, dataset_id, path)
    return _parse_text(raw, dataset_id, path)


def _parse_binary(raw, dataset_id, path) -> Dataset:
    header = struct.calcsize("<IQQI")
    if len(raw) < 4 + header:
        raise DataError(f"{path}: truncated header at byte {len(raw)}")
    version, n, d, classes = struct.unpack_from("<IQQI", raw, 4)
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format version {version}")
    off = 4 + header
    need = off + n * d * 8 + n * 4
    if len(raw) != need:
        raise DataError(f"{path}: expected {need} bytes, found {len(raw)}")
    features = np.frombuffer(raw, dtype="<f8", count=n * d, offset=off)
    labels = np.frombuffer(raw, dtype="<u4", count=n, offset=off + n * d * 8)
    try:
        return Dataset(dataset_id, features.reshape(n, d).copy(),
                       labels.astype(np.int64), classes)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from exc


def _parse_text(raw, dataset_id, path) -> Dataset:
    rows, labels = [], []
    for lineno, line in enumerate(raw.decode("utf-8").splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        cells = line.split(",")
        try:
            rows.append([float(c) for c in cells[:-1]])
            labels.append(int(cells[-1]))
        except ValueError as exc:
            raise DataError(f"{path}: line {lineno}: {exc}") from exc
        if len(rows[-1]) != len(rows[0]):
            raise DataError(f"{path}: line {lineno}: inconsistent column count")
    if not rows:
        raise DataError(f"{path}: no data rows")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0:
        raise DataError(f"{path}: negative label")
    return Dataset(dataset_id, np.asarray(rows, dtype=np.float64),
                   labels, int(labels.max()) + 1)


def epoch_permutation(dataset_id: str, n: int, epoch: int) -> np.ndarray:
    """Deterministic per-epoch sample order, shared by packed and standalone runs."""
    digest = hashlib.sha256(f"{dataset_id}|epoch{epoch}".encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    return rng.permutation(n)


def batch_at(ds: Dataset, perm: np.ndarray, cursor: int, b: int):
    """Samples perm[cursor:cursor+b] as (features, labels, sample indices)."""
    if cursor + b > ds.n:
        raise DataError(f"batch [{cursor}, {cursor + b}) exceeds dataset size {ds.n}")
    idx = perm[cursor:cursor + b]
    return ds.features[idx], ds.labels[idx], idx


@dataclass(frozen=True)
class PreprocessSpec:
    """Ordered pure stages: ("normalize", mean, std) and ("jitter", seed)."""
    stages: tuple = ()

    def digest(self) -> str:
        text = ";".join(
            ",".join(str(part) for part in stage) for stage in self.stages)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class PreprocessCache:
    entries: dict = field(default_factory=dict)
    hits: int = 0
    misses: int = 0


def _jitter_row(row: np.ndarray, seed: int, index: int) -> np.ndarray:
    digest = hashlib.sha256(f"jitter|{seed}|{index}".encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    return row + rng.normal(scale=0.01, size=row.shape)


def _apply_stages(spec: PreprocessSpec, row: np.ndarray, index: int) -> np.ndarray:
    out = row
    for stage in spec.stages:
        if stage[0] == "normalize":
            _, mean, std = stage
            out = (out - mean) / std
        elif stage[0] == "jitter":
            out = _jitter_row(out, stage[1], index)
        else:
            raise DataError(f"unknown preprocess stage {stage[0]!r}")
    return out


def preprocess(spec: PreprocessSpec, batch: np.ndarray, indices, dataset_id: str,
               cache: PreprocessCache | None = None) -> np.ndarray:
    """Apply the stage list per sample, memoized on (dataset, spec, sample index)."""
    if not spec.stages:
        return batch
    digest = spec.digest()
    out = np.empty_like(batch)
    for row, index in enumerate(np.asarray(indices)):
        key = (dataset_id, digest, int(index))
        if cache is not None and key in cache.entries:
            cache.hits += 1
            out[row] = cache.entries[key]
            continue
        value = _apply_stages(spec, batch[row], int(index))
        if cache is not None:
            cache.misses += 1
            cache.entries[key] = value
        out[row] = value
    return out
