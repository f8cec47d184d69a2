"""Datasets, non-IID partitioning and skew measurement.

Input data is either read from IDX binary files (the format MNIST-style
datasets ship in) or synthesized as Gaussian blobs for fast tests. The
partitioner hands each node a disjoint slice of the training set, with
per-class sample counts following a heavy-tailed truncated Zipf rule so
that a few nodes end up holding most of each class.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .rng import make_rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Raised for malformed IDX files (bad magic, truncation, mismatch)."""


@dataclass(frozen=True)
class LabeledDataset:
    """Feature matrix in [0,1] plus integer class labels."""

    features: np.ndarray  # (samples, feature_dim) float64
    labels: np.ndarray  # (samples,) int64
    num_classes: int

    def __post_init__(self):
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels disagree on sample count")
        if self.labels.size and int(self.labels.max()) >= self.num_classes:
            raise ValueError("label out of range")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class Allocation:
    """Disjoint per-node index sets into a dataset."""

    per_node: tuple[tuple[int, ...], ...]
    alpha: float
    min_per_class: int
    seed: int

    def to_json(self) -> str:
        doc = {
            "alpha": self.alpha,
            "min_per_class": self.min_per_class,
            "seed": self.seed,
            "per_node": [list(ix) for ix in self.per_node],
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Allocation":
        doc = json.loads(text)
        return cls(
            per_node=tuple(tuple(int(i) for i in ix) for ix in doc["per_node"]),
            alpha=float(doc["alpha"]),
            min_per_class=int(doc["min_per_class"]),
            seed=int(doc["seed"]),
        )


def _read_exact(f, n: int, path: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise IdxFormatError(f"{path}: truncated file (wanted {n} bytes, got {len(buf)})")
    return buf


def load_idx(images_path: str, labels_path: str) -> LabeledDataset:
    """Load an IDX image/label file pair.

    Pixels are scaled to [0,1] by dividing by 255. Bad magic numbers,
    truncated payloads and image/label count mismatches are reported as
    distinct IdxFormatError messages.
    """
    with open(images_path, "rb") as f:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, images_path))
        if magic != IDX_IMAGES_MAGIC:
            raise IdxFormatError(
                f"{images_path}: bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
            )
        raw = _read_exact(f, count * rows * cols, images_path)
    with open(labels_path, "rb") as f:
        magic, label_count = struct.unpack(">II", _read_exact(f, 8, labels_path))
        if magic != IDX_LABELS_MAGIC:
            raise IdxFormatError(
                f"{labels_path}: bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
            )
        raw_labels = _read_exact(f, label_count, labels_path)
    if count != label_count:
        raise IdxFormatError(
            f"image/label count mismatch: {count} images vs {label_count} labels"
        )
    features = np.frombuffer(raw, dtype=np.uint8).astype(np.float64).reshape(count, rows * cols)
    features /= 255.0
    labels = np.frombuffer(raw_labels, dtype=np.uint8).astype(np.int64)
    num_classes = int(labels.max()) + 1 if labels.size else 0
    return LabeledDataset(features=features, labels=labels, num_classes=num_classes)


def synth_blobs(
    n_per_class: int,
    num_classes: int,
    feature_dim: int,
    spread: float,
    seed: int,
) -> LabeledDataset:
    """Gaussian blobs: class c sampled around a fixed per-class center,
    values clamped to [0,1]. Deterministic in the seed.
    """
    if n_per_class < 1 or num_classes < 1 or feature_dim < 1:
        raise ValueError("all counts must be positive")
    rng = make_rng(seed)
    centers = rng.uniform(0.1, 0.9, size=(num_classes, feature_dim))
    feats = []
    labels = []
    for c in range(num_classes):
        pts = centers[c] + rng.normal(0.0, spread, size=(n_per_class, feature_dim))
        feats.append(np.clip(pts, 0.0, 1.0))
        labels.append(np.full(n_per_class, c, dtype=np.int64))
    return LabeledDataset(
        features=np.concatenate(feats),
        labels=np.concatenate(labels),
        num_classes=num_classes,
    )


def subset_per_class(ds: LabeledDataset, cap: int) -> LabeledDataset:
    """Keep the first `cap` samples of every class, in stable order.

    Desk-scale knob for reproducible small runs on large datasets.
    """
    keep = []
    taken = [0] * ds.num_classes
    for idx, y in enumerate(ds.labels):
        if taken[y] < cap:
            keep.append(idx)
            taken[y] += 1
    keep_arr = np.array(keep, dtype=np.int64)
    return LabeledDataset(
        features=ds.features[keep_arr],
        labels=ds.labels[keep_arr],
        num_classes=ds.num_classes,
    )


def zipf_allocate(
    ds: LabeledDataset,
    n_nodes: int,
    alpha: float,
    min_per_class: int,
    seed: int,
) -> Allocation:
    """Partition a dataset across nodes with truncated-Zipf class skew.

    For each class independently: every node draws a value r from the
    Zipf law P(r) proportional to r**(-alpha) truncated to [1, pool],
    where pool is the class sample count. After reserving the
    min_per_class floor for everyone, nodes consume the remaining pool
    in descending draw order, each taking min(draw, remaining); any
    leftover goes to the largest drawer. With alpha around 1.26 this
    leaves one node holding most of each class while every node keeps
    at least the floor.
    """
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    if min_per_class < 1:
        raise ValueError("min_per_class must be >= 1")
    class_pools = [np.flatnonzero(ds.labels == c) for c in range(ds.num_classes)]
    for c, pool in enumerate(class_pools):
        if len(pool) < n_nodes * min_per_class:
            raise ValueError(
                f"class {c} has {len(pool)} samples, need >= "
                f"{n_nodes * min_per_class} for n_nodes={n_nodes}, "
                f"min_per_class={min_per_class}"
            )
    rng = make_rng(seed)
    per_node: list[list[int]] = [[] for _ in range(n_nodes)]
    for pool in class_pools:
        pool_size = len(pool)
        counts = _zipf_counts(n_nodes, alpha, pool_size, min_per_class, rng)
        order = rng.permutation(pool_size)
        shuffled = pool[order]
        offset = 0
        for node, cnt in enumerate(counts):
            per_node[node].extend(int(i) for i in shuffled[offset : offset + cnt])
            offset += cnt
    return Allocation(
        per_node=tuple(tuple(sorted(ix)) for ix in per_node),
        alpha=alpha,
        min_per_class=min_per_class,
        seed=seed,
    )


def _zipf_counts(
    n_nodes: int, alpha: float, pool_size: int, min_per_class: int, rng
) -> np.ndarray:
    """Per-node sample counts for one class; sums exactly to pool_size."""
    support = np.arange(1, pool_size + 1, dtype=np.float64)
    probs = support ** (-float(alpha))
    probs /= probs.sum()
    draws = rng.choice(pool_size, size=n_nodes, p=probs) + 1
    counts = np.full(n_nodes, min_per_class, dtype=np.int64)
    remaining = pool_size - n_nodes * min_per_class
    # draws are target totals, floored at min_per_class; nodes consume the
    # excess pool in descending draw order (stable sort: ties resolve by
    # node id, keeping the split deterministic)
    for node in np.argsort(-draws, kind="stable"):
        if remaining == 0:
            break
        take = min(max(int(draws[node]) - min_per_class, 0), remaining)
        counts[node] += take
        remaining -= take
    if remaining > 0:
        counts[int(np.argmax(draws))] += remaining
    return counts


def gini(counts) -> float:
    """Gini index of a non-negative count vector.

    Mean-absolute-difference form: G = sum_ij |x_i - x_j| / (2 n^2 mu).
    0 for perfect equality; strictly below 1.
    """
    x = np.asarray(counts, dtype=np.float64)
    if x.size == 0 or np.any(x < 0):
        raise ValueError("counts must be non-negative and non-empty")
    total = x.sum()
    if total == 0:
        raise ValueError("at least one count must be positive")
    x = np.sort(x)
    n = x.size
    index = np.arange(1, n + 1)
    # sorted-form identity of the pairwise mean-absolute-difference formula
    return float((2.0 * np.sum(index * x) - (n + 1) * total) / (n * total))


def per_node_totals(alloc: Allocation) -> np.ndarray:
    return np.array([len(ix) for ix in alloc.per_node], dtype=np.float64)


def per_class_counts(ds: LabeledDataset, alloc: Allocation) -> np.ndarray:
    """(n_nodes, num_classes) matrix of sample counts."""
    out = np.zeros((len(alloc.per_node), ds.num_classes), dtype=np.int64)
    for node, ix in enumerate(alloc.per_node):
        for i in ix:
            out[node, ds.labels[i]] += 1
    return out
