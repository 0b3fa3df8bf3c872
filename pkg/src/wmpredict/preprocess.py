"""Cross-validation fold planning and train-only min-max normalization."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Mapping, Sequence, TextIO

import numpy as np

from .features import FeatureMatrix, FeatureVector


@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignments: Mapping[str, int]
    seed: int
    subjects: tuple[str, ...] = ()

    def test_ids(self, fold: int) -> list[str]:
        return [s for s in self.subjects if self.assignments[s] == fold]

    def train_ids(self, fold: int) -> list[str]:
        return [s for s in self.subjects if self.assignments[s] != fold]

    def split(self, fold: int) -> tuple[list[str], list[str]]:
        if not 0 <= fold < self.k:
            raise ValueError(f"fold {fold} out of range 0..{self.k - 1}")
        return self.train_ids(fold), self.test_ids(fold)

    def fold_sizes(self) -> list[int]:
        return [sum(1 for f in self.assignments.values() if f == i) for i in range(self.k)]

    def to_csv(self, stream: TextIO) -> None:
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(["subject_id", "fold"])
        for s in self.subjects:
            w.writerow([s, self.assignments[s]])


def make_folds(
    subject_ids: Sequence[str],
    k: int,
    seed: int,
    stratify: Sequence | None = None,
) -> FoldPlan:
    """Shuffle subjects with ``seed`` and deal them round-robin into ``k`` folds.

    With ``stratify`` (one label per subject) subjects are grouped by label
    before dealing, so each fold gets a near-equal share of every label while
    fold sizes still differ by at most one.
    """
    ids = list(subject_ids)
    n = len(ids)
    if len(set(ids)) != n:
        raise ValueError("duplicate subject ids")
    if k < 2 or k > n:
        raise ValueError(f"k must satisfy 2 <= k <= n_subjects ({n}); got {k}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    if stratify is not None:
        if len(stratify) != n:
            raise ValueError("stratify labels must match subject count")
        labels = [stratify[i] for i in order]
        keys = sorted(set(labels), key=str)
        order = np.concatenate([order[[j for j, lab in enumerate(labels) if lab == key]] for key in keys])
    assignments = {ids[i]: pos % k for pos, i in enumerate(order)}
    return FoldPlan(k=k, assignments=assignments, seed=seed, subjects=tuple(ids))


@dataclass(frozen=True, eq=False)
class NormParams:
    """Per-position minimum and maximum of the training features."""

    minimum: np.ndarray
    maximum: np.ndarray

    def __post_init__(self):
        if self.minimum.shape != self.maximum.shape:
            raise ValueError("min/max shape mismatch")
        if np.any(self.minimum > self.maximum):
            raise ValueError("min exceeds max at some position")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.minimum.shape

    def equals(self, other: "NormParams") -> bool:
        return np.array_equal(self.minimum, other.minimum) and np.array_equal(self.maximum, other.maximum)


def _stack(features) -> np.ndarray:
    if isinstance(features, np.ndarray):
        return np.asarray(features, dtype=np.float64)
    items = list(features)
    if not items:
        raise ValueError("no training features")
    if isinstance(items[0], (FeatureVector, FeatureMatrix)):
        measures = {f.measure for f in items}
        if len(measures) > 1:
            raise ValueError(f"mixed measures: {sorted(map(str, measures))}")
        shapes = {f.values.shape for f in items}
        if len(shapes) > 1:
            raise ValueError(f"mixed feature shapes: {sorted(shapes)}")
        return np.stack([f.values for f in items])
    shapes = {np.shape(f) for f in items}
    if len(shapes) > 1:
        raise ValueError(f"mixed feature shapes: {sorted(shapes)}")
    return np.asarray(items, dtype=np.float64)


def fit_minmax(train_features) -> NormParams:
    """Fit min/max over the leading (subject) axis.

    Accepts a list of FeatureVector/FeatureMatrix or an array ``(n, *shape)``.
    """
    x = _stack(train_features)
    if x.shape[0] == 0:
        raise ValueError("no training features")
    lo, hi = x.min(axis=0), x.max(axis=0)
    lo.setflags(write=False)
    hi.setflags(write=False)
    return NormParams(lo, hi)


def apply_minmax(features, params: NormParams):
    """(x - min) / (max - min) positionwise, 0 where max == min. No clamping.

    Accepts a FeatureVector/FeatureMatrix (returns the same type), a single
    array of ``params.shape``, or a batch ``(n, *params.shape)``.
    """
    if isinstance(features, (FeatureVector, FeatureMatrix)):
        return type(features)(apply_minmax(features.values, params), features.measure, features.subject_id)
    x = np.asarray(features, dtype=np.float64)
    if x.shape[-len(params.shape):] != params.shape or x.ndim > len(params.shape) + 1:
        raise ValueError(f"feature shape {x.shape} does not match normalization shape {params.shape}")
    span = params.maximum - params.minimum
    degenerate = span == 0
    safe = np.where(degenerate, 1.0, span)
    out = (x - params.minimum) / safe
    return np.where(degenerate, 0.0, out)
