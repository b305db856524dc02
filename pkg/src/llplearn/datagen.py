"""Synthetic proportion-labeled datasets built from Gaussian blobs.

The pipeline: draw a balanced pool of labeled instances from isotropic
Gaussians around well-separated class centers, hold out a labeled test
split, then pack the remainder into bags whose proportion vectors are drawn
uniformly from the simplex.  Stored bag proportions are always the exact
realized count ratios.  Everything is a pure function of (spec, seed).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .domain import (
    Bag,
    LLPDataset,
    dataset_to_csv,
    round_counts,
    write_instances_csv,
)

_MAX_PROPORTION_RETRIES = 100


class DataGenerationError(RuntimeError):
    """The requested bags cannot be filled from the available pool."""


@dataclass(frozen=True)
class BlobSpec:
    """Geometry of a Gaussian-blob class layout."""

    num_classes: int
    feature_dim: int
    class_centers: np.ndarray      # (num_classes, feature_dim)
    class_scale: float             # isotropic std around each center
    separation: float              # required min pairwise center distance

    def __post_init__(self):
        centers = np.asarray(self.class_centers, dtype=np.float64)
        if centers.shape != (self.num_classes, self.feature_dim):
            raise ValueError("class_centers must be (num_classes, feature_dim)")
        if self.class_scale < 0:
            raise ValueError("class_scale must be nonnegative")
        if self.num_classes > 1:
            dists = np.linalg.norm(
                centers[:, np.newaxis, :] - centers[np.newaxis, :, :], axis=-1)
            off = dists[~np.eye(self.num_classes, dtype=bool)]
            if off.min() < self.separation - 1e-9:
                raise ValueError(
                    f"pairwise center distance {off.min():.6g} below the "
                    f"required separation {self.separation:.6g}")
        centers.setflags(write=False)
        object.__setattr__(self, "class_centers", centers)

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "feature_dim": self.feature_dim,
            "class_centers": self.class_centers.tolist(),
            "class_scale": self.class_scale,
            "separation": self.separation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BlobSpec":
        return cls(num_classes=d["num_classes"], feature_dim=d["feature_dim"],
                   class_centers=np.asarray(d["class_centers"], dtype=np.float64),
                   class_scale=d["class_scale"], separation=d["separation"])


def random_blob_spec(num_classes: int, feature_dim: int, separation: float,
                     class_scale: float, seed) -> BlobSpec:
    """Draw Gaussian centers and rescale them so the min pairwise distance
    equals ``separation`` exactly."""
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((num_classes, feature_dim))
    if num_classes > 1:
        dists = np.linalg.norm(
            centers[:, np.newaxis, :] - centers[np.newaxis, :, :], axis=-1)
        closest = dists[~np.eye(num_classes, dtype=bool)].min()
        centers *= separation / closest
    return BlobSpec(num_classes=num_classes, feature_dim=feature_dim,
                    class_centers=centers, class_scale=class_scale,
                    separation=separation)


@dataclass(frozen=True)
class InstancePool:
    """A flat pile of labeled instances (pre-bagging or held-out test data)."""

    features: np.ndarray   # (n, feature_dim)
    labels: np.ndarray     # (n,)

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if feats.ndim != 2 or labels.shape != (feats.shape[0],):
            raise ValueError("pool needs (n, d) features and n labels")
        feats.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    @property
    def size(self) -> int:
        return self.labels.size

    def subset(self, indices: np.ndarray) -> "InstancePool":
        return InstancePool(self.features[indices], self.labels[indices])


def generate_blobs(spec: BlobSpec, n_instances: int, seed) -> InstancePool:
    """Sample a pool with (as close as possible to) equal class counts.

    Class counts follow largest-remainder rounding of the uniform prior, so
    a pool size divisible by the class count is exactly balanced.
    """
    if n_instances < spec.num_classes:
        raise ValueError("need at least one instance per class")
    rng = np.random.default_rng(seed)
    counts = round_counts(np.full(spec.num_classes, 1.0 / spec.num_classes),
                          n_instances)
    labels = np.repeat(np.arange(spec.num_classes, dtype=np.int64), counts)
    features = spec.class_centers[labels]
    if spec.class_scale > 0:
        features = features + spec.class_scale * rng.standard_normal(features.shape)
    order = rng.permutation(n_instances)
    return InstancePool(features[order], labels[order])


def holdout_split(pool: InstancePool, fraction: float, seed) -> tuple[InstancePool, InstancePool]:
    """Split off a seeded random fraction of the pool; returns (rest, held)."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    n_held = int(round(fraction * pool.size))
    order = rng.permutation(pool.size)
    return pool.subset(np.sort(order[n_held:])), pool.subset(np.sort(order[:n_held]))


def make_bags(pool: InstancePool, bag_size: int, n_bags: int, seed) -> LLPDataset:
    """Pack pool instances into bags with simplex-uniform target proportions.

    For each bag a proportion vector is drawn from a flat Dirichlet and
    rounded to counts; the bag then takes that many instances of each class
    from the pool, without replacement and never sharing instances between
    bags.  If the pool runs short of a class, that bag's proportions are
    redrawn (bounded retries) before giving up.
    """
    if bag_size < 1 or n_bags < 1:
        raise ValueError("bag_size and n_bags must be positive")
    if bag_size * n_bags > pool.size:
        raise DataGenerationError(
            f"need {bag_size * n_bags} instances but the pool has {pool.size}")
    num_classes = int(pool.labels.max()) + 1
    rng = np.random.default_rng(seed)

    queues = []
    for c in range(num_classes):
        idx = np.flatnonzero(pool.labels == c)
        queues.append(list(rng.permutation(idx)))

    bags = []
    for bag_id in range(n_bags):
        remaining = np.array([len(q) for q in queues])
        if remaining.sum() == bag_size:
            # The bag must absorb the whole remaining pool, so the only
            # feasible counts are the leftover class counts themselves.
            counts = remaining
        else:
            for _ in range(_MAX_PROPORTION_RETRIES):
                target = rng.dirichlet(np.ones(num_classes))
                counts = round_counts(target, bag_size)
                if (counts <= remaining).all():
                    break
            else:
                raise DataGenerationError(
                    f"bag {bag_id}: no feasible proportions after "
                    f"{_MAX_PROPORTION_RETRIES} retries (pool exhausted)")
        chosen = np.concatenate([
            [queues[c].pop() for _ in range(counts[c])] if counts[c] else
            np.empty(0, dtype=np.int64)
            for c in range(num_classes)
        ]).astype(np.int64)
        chosen = chosen[rng.permutation(chosen.size)]
        bags.append(Bag.from_labeled(pool.features[chosen], pool.labels[chosen],
                                     num_classes, bag_id=bag_id))
    return LLPDataset(bags=tuple(bags), num_classes=num_classes,
                      feature_dim=pool.features.shape[1], split_tag="train")


def split_train_validation(dataset: LLPDataset, ratio: float = 0.7) -> tuple[LLPDataset, LLPDataset]:
    """Partition bags into train/validation splits at bag granularity."""
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must be in (0, 1)")
    n = dataset.num_bags
    if n < 2:
        raise ValueError("need at least 2 bags to split")
    n_train = min(max(int(np.floor(ratio * n + 0.5)), 1), n - 1)
    train = LLPDataset(bags=dataset.bags[:n_train], num_classes=dataset.num_classes,
                       feature_dim=dataset.feature_dim, split_tag="train")
    validation = LLPDataset(bags=dataset.bags[n_train:], num_classes=dataset.num_classes,
                            feature_dim=dataset.feature_dim, split_tag="validation")
    return train, validation


def write_dataset_dir(out_dir, train: LLPDataset, validation: LLPDataset,
                      test_pool: InstancePool, spec: BlobSpec, seed: int,
                      bag_size: int) -> None:
    """Emit the CSV pairs for each split, the test pool, and a manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset_to_csv(train, out / "train.csv", out / "train_proportions.csv")
    dataset_to_csv(validation, out / "validation.csv", out / "validation_proportions.csv")
    # Test instances belong to no bag; the format reserves bag_id -1 for that.
    write_instances_csv(out / "test.csv", test_pool.features,
                        np.full(test_pool.size, -1, dtype=np.int64), test_pool.labels)
    manifest = {
        "spec": spec.to_dict(),
        "seed": seed,
        "bag_size": bag_size,
        "splits": {
            "train": [bag.bag_id for bag in train.bags],
            "validation": [bag.bag_id for bag in validation.bags],
        },
        "test_instances": test_pool.size,
        "files": {
            "train": ["train.csv", "train_proportions.csv"],
            "validation": ["validation.csv", "validation_proportions.csv"],
            "test": ["test.csv"],
        },
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
