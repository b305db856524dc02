"""Value types for proportion-labeled bag datasets.

A bag holds feature vectors, an optional hidden ground-truth label per
instance (kept only for evaluation), and the per-class label-proportion
vector that is the sole supervision signal.  Proportions are converted to
exact integer class counts once, at construction time, so every downstream
consumer works with counts guaranteed to add up to the bag size.

All types here are immutable after construction and safe to share between
concurrent workers.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

PROPORTION_SUM_TOL = 1e-9
SPLIT_TAGS = ("train", "validation", "test")

#: Real-valued class-by-instance matrix (num_classes rows, bag_size columns).
#: Used for confidences, per-cell losses, cumulative losses and perturbations.
ScoreMatrix = np.ndarray


class FeasibilityError(ValueError):
    """A label matrix or count vector violates its structural constraints."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def round_counts(proportions: np.ndarray, m: int) -> np.ndarray:
    """Convert a proportion vector into integer class counts summing to ``m``.

    Uses largest-remainder rounding: each class gets ``floor(m * p_c)``
    instances, and the remaining units go to the classes with the largest
    fractional remainders (ties broken by lower class index).  This keeps
    the count vector as close to ``m * p`` as integrality allows and is
    fully deterministic.
    """
    p = np.asarray(proportions, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("proportions must be a non-empty 1-D vector")
    if not isinstance(m, (int, np.integer)) or m < 1:
        raise ValueError(f"bag size must be a positive integer, got {m!r}")
    if np.any(p < -1e-12):
        raise ValueError("proportions must be nonnegative")
    total = float(p.sum())
    if abs(total - 1.0) > PROPORTION_SUM_TOL:
        raise ValueError(f"proportions must sum to 1 (got {total!r})")

    scaled = np.clip(p, 0.0, None) * m
    # Snap values that are integral up to float noise so exact rationals
    # (counts / m) round-trip to the same counts.
    base = np.floor(scaled + 1e-9).astype(np.int64)
    remainders = np.clip(scaled - base, 0.0, None)
    missing = int(m - base.sum())
    if missing > 0:
        order = np.argsort(-remainders, kind="stable")
        base[order[:missing]] += 1
    counts = base
    if counts.sum() != m or np.any(counts < 0):
        raise ValueError("internal rounding error: counts do not sum to bag size")
    return counts


class PseudoLabelMatrix:
    """0/1 class-assignment matrix with exactly one active class per column.

    Row sums are *not* constrained by the type itself; whether they match a
    bag's class counts is checked by :func:`validate_feasible`.
    """

    __slots__ = ("entries",)

    def __init__(self, entries: np.ndarray):
        e = np.asarray(entries)
        if e.ndim != 2 or e.shape[0] < 1 or e.shape[1] < 1:
            raise FeasibilityError(f"label matrix must be 2-D, got shape {e.shape}")
        if not np.isin(e, (0, 1)).all():
            raise FeasibilityError("label matrix entries must be 0 or 1")
        e = e.astype(np.int64)
        if not (e.sum(axis=0) == 1).all():
            raise FeasibilityError("every column must select exactly one class")
        self.entries = _frozen(e)

    @classmethod
    def from_labels(cls, labels: np.ndarray, num_classes: int) -> "PseudoLabelMatrix":
        """Build the one-hot matrix for a vector of per-instance class indices."""
        lab = np.asarray(labels, dtype=np.int64)
        if lab.ndim != 1 or lab.size == 0:
            raise FeasibilityError("labels must be a non-empty 1-D vector")
        if lab.min() < 0 or lab.max() >= num_classes:
            raise FeasibilityError("labels out of range for the class count")
        e = np.zeros((num_classes, lab.size), dtype=np.int64)
        e[lab, np.arange(lab.size)] = 1
        out = cls.__new__(cls)
        out.entries = _frozen(e)
        return out

    @property
    def num_classes(self) -> int:
        return self.entries.shape[0]

    @property
    def bag_size(self) -> int:
        return self.entries.shape[1]

    @property
    def column_labels(self) -> np.ndarray:
        """Per-instance class index (argmax of each column)."""
        return self.entries.argmax(axis=0)

    def row_sums(self) -> np.ndarray:
        return self.entries.sum(axis=1)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PseudoLabelMatrix):
            return NotImplemented
        return np.array_equal(self.entries, other.entries)

    def __hash__(self):
        return hash((self.entries.shape, self.entries.tobytes()))

    def __repr__(self) -> str:
        return f"PseudoLabelMatrix({self.num_classes}x{self.bag_size})"


def label_proportion(Y: PseudoLabelMatrix) -> np.ndarray:
    """Per-class fraction of instances assigned by ``Y`` (row sums / bag size)."""
    return Y.row_sums() / Y.bag_size


@dataclass(frozen=True)
class Instance:
    """A single feature vector with an optional held-out ground-truth label."""

    features: np.ndarray
    true_label: int | None = None


@dataclass(frozen=True)
class Bag:
    """A set of instances annotated only with its class-proportion vector.

    ``true_labels`` uses -1 for unknown and is never consumed by training
    code; it exists so evaluation can score pseudo labels and predictions.
    """

    features: np.ndarray            # (bag_size, feature_dim)
    proportions: np.ndarray         # (num_classes,)
    class_counts: np.ndarray        # (num_classes,), sums to bag_size
    true_labels: np.ndarray | None = None
    bag_id: int = 0

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 1 or feats.shape[1] < 1:
            raise ValueError(f"features must be (bag_size, feature_dim), got {feats.shape}")
        if not np.isfinite(feats).all():
            raise ValueError("features must be finite")
        props = np.asarray(self.proportions, dtype=np.float64)
        counts = np.asarray(self.class_counts, dtype=np.int64)
        m = feats.shape[0]
        if props.shape != counts.shape or props.ndim != 1:
            raise ValueError("proportions and class_counts must be 1-D vectors of equal length")
        expected = round_counts(props, m)
        if not np.array_equal(expected, counts):
            raise FeasibilityError(
                f"class_counts {counts.tolist()} inconsistent with proportions "
                f"(expected {expected.tolist()})"
            )
        labels = self.true_labels
        if labels is not None:
            labels = np.asarray(labels, dtype=np.int64)
            if labels.shape != (m,):
                raise ValueError("true_labels must have one entry per instance")
            if labels.max(initial=-1) >= props.size or labels.min(initial=0) < -1:
                raise ValueError("true_labels must be -1 (unknown) or a valid class index")
            object.__setattr__(self, "true_labels", _frozen(labels))
        object.__setattr__(self, "features", _frozen(feats))
        object.__setattr__(self, "proportions", _frozen(props))
        object.__setattr__(self, "class_counts", _frozen(counts))

    @classmethod
    def from_labeled(cls, features: np.ndarray, labels: np.ndarray,
                     num_classes: int, bag_id: int = 0) -> "Bag":
        """Build a bag whose stored proportion is the exact realized label ratio."""
        labels = np.asarray(labels, dtype=np.int64)
        if labels.min(initial=0) < 0 or labels.max(initial=-1) >= num_classes:
            raise ValueError("labels out of range")
        counts = np.bincount(labels, minlength=num_classes).astype(np.int64)
        proportions = counts / labels.size
        return cls(features=np.asarray(features, dtype=np.float64),
                   proportions=proportions, class_counts=counts,
                   true_labels=labels, bag_id=bag_id)

    @classmethod
    def from_proportions(cls, features: np.ndarray, proportions: np.ndarray,
                         true_labels: np.ndarray | None = None, bag_id: int = 0) -> "Bag":
        """Build a bag from a proportion vector, deriving counts by rounding."""
        feats = np.asarray(features, dtype=np.float64)
        counts = round_counts(np.asarray(proportions, dtype=np.float64), feats.shape[0])
        return cls(features=feats, proportions=np.asarray(proportions, dtype=np.float64),
                   class_counts=counts, true_labels=true_labels, bag_id=bag_id)

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        return self.proportions.size

    @property
    def instances(self) -> tuple[Instance, ...]:
        labels = self.true_labels
        return tuple(
            Instance(self.features[j],
                     None if labels is None or labels[j] < 0 else int(labels[j]))
            for j in range(self.size)
        )


def validate_feasible(Y, bag: Bag) -> bool:
    """True iff ``Y`` assigns one class per instance and matches the bag's counts.

    Accepts either a :class:`PseudoLabelMatrix` or a raw 0/1 array (a raw
    array may violate the one-per-column constraint, in which case the
    result is False).  A shape mismatch is an error, not a False.
    """
    entries = Y.entries if isinstance(Y, PseudoLabelMatrix) else np.asarray(Y)
    if entries.shape != (bag.num_classes, bag.size):
        raise FeasibilityError(
            f"label matrix shape {entries.shape} does not match bag "
            f"({bag.num_classes} classes, {bag.size} instances)"
        )
    if not np.isin(entries, (0, 1)).all():
        return False
    if not (entries.sum(axis=0) == 1).all():
        return False
    return bool((entries.sum(axis=1) == bag.class_counts).all())


@dataclass(frozen=True)
class LLPDataset:
    """A list of bags sharing one class space and feature dimension."""

    bags: tuple[Bag, ...]
    num_classes: int
    feature_dim: int
    split_tag: str = "train"

    def __post_init__(self):
        if self.split_tag not in SPLIT_TAGS:
            raise ValueError(f"split_tag must be one of {SPLIT_TAGS}")
        bags = tuple(self.bags)
        if not bags:
            raise ValueError("dataset must contain at least one bag")
        for bag in bags:
            if bag.num_classes != self.num_classes or bag.feature_dim != self.feature_dim:
                raise ValueError(
                    f"bag {bag.bag_id} has shape ({bag.num_classes} classes, "
                    f"dim {bag.feature_dim}); dataset expects "
                    f"({self.num_classes}, {self.feature_dim})"
                )
        object.__setattr__(self, "bags", bags)

    @property
    def num_bags(self) -> int:
        return len(self.bags)

    @property
    def total_instances(self) -> int:
        return sum(bag.size for bag in self.bags)


# ---------------------------------------------------------------------------
# CSV interchange format
#
# Instances file: header "bag_id,feature_0,...,feature_{d-1},true_label";
# one row per instance; true_label of -1 means unknown (the column itself is
# optional).  Proportions file: header "bag_id,p_1,...,p_C".
# ---------------------------------------------------------------------------

def write_instances_csv(path, features: np.ndarray, bag_ids: np.ndarray,
                        true_labels: np.ndarray | None = None) -> None:
    features = np.asarray(features, dtype=np.float64)
    bag_ids = np.asarray(bag_ids, dtype=np.int64)
    n, d = features.shape
    header = ["bag_id"] + [f"feature_{i}" for i in range(d)]
    if true_labels is not None:
        true_labels = np.asarray(true_labels, dtype=np.int64)
        header.append("true_label")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for j in range(n):
            row = [int(bag_ids[j])] + [repr(float(v)) for v in features[j]]
            if true_labels is not None:
                row.append(int(true_labels[j]))
            writer.writerow(row)


def read_instances_csv(path):
    """Read an instances CSV; returns (features, bag_ids, true_labels or None)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "bag_id":
            raise ValueError(f"{path}: expected an instances CSV starting with bag_id")
        has_labels = header[-1] == "true_label"
        d = len(header) - 1 - (1 if has_labels else 0)
        if d < 1 or header[1:1 + d] != [f"feature_{i}" for i in range(d)]:
            raise ValueError(f"{path}: malformed feature columns in header")
        bag_ids, feats, labels = [], [], []
        for row in reader:
            if not row:
                continue
            bag_ids.append(int(row[0]))
            feats.append([float(v) for v in row[1:1 + d]])
            if has_labels:
                labels.append(int(row[1 + d]))
    features = np.asarray(feats, dtype=np.float64).reshape(len(bag_ids), d)
    ids = np.asarray(bag_ids, dtype=np.int64)
    return features, ids, (np.asarray(labels, dtype=np.int64) if has_labels else None)


def write_proportions_csv(path, bag_ids: np.ndarray, proportions: np.ndarray) -> None:
    proportions = np.asarray(proportions, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bag_id"] + [f"p_{c + 1}" for c in range(proportions.shape[1])])
        for bag_id, p in zip(bag_ids, proportions):
            writer.writerow([int(bag_id)] + [repr(float(v)) for v in p])


def read_proportions_csv(path):
    """Read a proportions CSV; returns (bag_ids, proportions matrix)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "bag_id":
            raise ValueError(f"{path}: expected a proportions CSV starting with bag_id")
        num_classes = len(header) - 1
        if num_classes < 1 or header[1:] != [f"p_{c + 1}" for c in range(num_classes)]:
            raise ValueError(f"{path}: malformed proportion columns in header")
        ids, rows = [], []
        for row in reader:
            if not row:
                continue
            ids.append(int(row[0]))
            rows.append([float(v) for v in row[1:]])
    return np.asarray(ids, dtype=np.int64), np.asarray(rows, dtype=np.float64)


def dataset_to_csv(dataset: LLPDataset, instances_path, proportions_path) -> None:
    """Write one split as the paired instances + proportions CSV files."""
    feats = np.concatenate([bag.features for bag in dataset.bags], axis=0)
    ids = np.concatenate([np.full(bag.size, bag.bag_id, dtype=np.int64)
                          for bag in dataset.bags])
    if all(bag.true_labels is not None for bag in dataset.bags):
        labels = np.concatenate([bag.true_labels for bag in dataset.bags])
    else:
        labels = None
    write_instances_csv(instances_path, feats, ids, labels)
    write_proportions_csv(proportions_path,
                          np.asarray([bag.bag_id for bag in dataset.bags]),
                          np.stack([bag.proportions for bag in dataset.bags]))


def dataset_from_csv(instances_path, proportions_path, split_tag: str = "train") -> LLPDataset:
    """Load a split previously written by :func:`dataset_to_csv`."""
    features, ids, labels = read_instances_csv(instances_path)
    prop_ids, proportions = read_proportions_csv(proportions_path)
    prop_by_id = {int(b): proportions[i] for i, b in enumerate(prop_ids)}
    bags = []
    for bag_id in prop_ids:
        mask = ids == bag_id
        if not mask.any():
            raise ValueError(f"bag {bag_id} has proportions but no instances")
        bag_labels = labels[mask] if labels is not None else None
        bags.append(Bag.from_proportions(features[mask], prop_by_id[int(bag_id)],
                                         true_labels=bag_labels, bag_id=int(bag_id)))
    leftover = set(np.unique(ids)) - {int(b) for b in prop_ids}
    if leftover:
        raise ValueError(f"instances reference bags without proportions: {sorted(leftover)}")
    return LLPDataset(bags=tuple(bags), num_classes=proportions.shape[1],
                      feature_dim=features.shape[1], split_tag=split_tag)
