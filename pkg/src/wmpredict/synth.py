"""Synthetic cluster-measure data with planted sex and age signal.

Every cluster value is ``base_mean + noise_sd * N(0, 1)``. On the signal
measures, male subjects get ``+delta`` at the sex positions, and the age
positions are replaced by ``base_mean + w_j * (age - 28.71) + sigma * N(0, 1)``.
A fraction of cells is then blanked to exercise imputation.

The closed-form oracles below (a class-mean threshold and ordinary least
squares, both restricted to the planted positions) give an independent
reference for how well any model can do on a generated dataset.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .features import (
    AGE_MEAN,
    AGE_RANGE,
    AGE_SD,
    ALL_MEASURES,
    AtlasLayout,
    ClusterMeasureTable,
    LabelTable,
    MeasureId,
)
from .nn.layers import derive_seed, make_rng
from .preprocess import FoldPlan

FA1_MEAN = ALL_MEASURES[2]


@dataclass(frozen=True)
class SynthSpec:
    n_subjects: int = 200
    layout: AtlasLayout = field(default_factory=lambda: AtlasLayout.from_counts(24, 8))
    measures: tuple[MeasureId, ...] = (FA1_MEAN,)
    sex_positions: tuple[int, ...] = ()
    delta: float = 0.0
    age_weights: Mapping[int, float] = field(default_factory=dict)
    sigma: float = 0.5
    base_mean: float = 0.5
    noise_sd: float = 0.05
    missing_rate: float = 0.01
    signal_measures: tuple[MeasureId, ...] | None = None  # None: every measure
    seed: int = 0

    def __post_init__(self):
        n = len(self.layout)
        if self.n_subjects < 2:
            raise ValueError("need at least 2 subjects")
        if len(self.sex_positions) > n:
            raise ValueError(f"{len(self.sex_positions)} sex positions exceed layout size {n}")
        for p in list(self.sex_positions) + list(self.age_weights):
            if not 0 <= p < n:
                raise ValueError(f"signal position {p} outside 0..{n - 1}")
        if len(set(self.sex_positions)) != len(self.sex_positions):
            raise ValueError("duplicate sex positions")
        if set(self.sex_positions) & set(self.age_weights):
            raise ValueError("sex and age positions must be disjoint")
        if self.sigma < 0 or self.noise_sd < 0 or not 0 <= self.missing_rate < 1:
            raise ValueError("sigma, noise_sd must be >= 0 and missing_rate in [0, 1)")
        if not self.measures:
            raise ValueError("no measures to generate")

    def carries_signal(self, measure: MeasureId) -> bool:
        return self.signal_measures is None or measure in self.signal_measures


def planted_spec(
    n_subjects: int = 200,
    layout: AtlasLayout | None = None,
    n_sex_positions: int = 8,
    delta_over_noise: float = 5.0,
    n_age_positions: int = 8,
    age_weight: float = 1.0,
    sigma: float = 0.5,
    seed: int = 0,
    **kwargs,
) -> SynthSpec:
    """Spec with sex and age positions drawn at random (disjoint) from the layout."""
    layout = layout or AtlasLayout.from_counts(24, 8)
    rng = make_rng(derive_seed(seed, 7))
    picks = rng.choice(len(layout), n_sex_positions + n_age_positions, replace=False)
    noise_sd = kwargs.pop("noise_sd", 0.05)
    return SynthSpec(
        n_subjects=n_subjects,
        layout=layout,
        sex_positions=tuple(sorted(int(p) for p in picks[:n_sex_positions])),
        delta=delta_over_noise * noise_sd,
        age_weights={int(p): age_weight for p in sorted(picks[n_sex_positions:])},
        sigma=sigma,
        noise_sd=noise_sd,
        seed=seed,
        **kwargs,
    )


def generate(spec: SynthSpec) -> tuple[dict[MeasureId, ClusterMeasureTable], LabelTable]:
    """Deterministic in ``spec`` (seed included)."""
    rng = make_rng(spec.seed)
    n = spec.n_subjects
    width = len(str(n))
    subjects = tuple(f"sub{i + 1:0{max(width, 3)}d}" for i in range(n))
    is_male = np.zeros(n, dtype=bool)
    is_male[: n // 2] = True
    rng.shuffle(is_male)
    ages = np.clip(rng.normal(AGE_MEAN, AGE_SD, n), *AGE_RANGE)
    labels = LabelTable({s: ("M" if m else "F", float(a)) for s, m, a in zip(subjects, is_male, ages)})

    sex_pos = np.array(spec.sex_positions, dtype=np.intp)
    age_pos = np.array(list(spec.age_weights), dtype=np.intp)
    age_w = np.array([spec.age_weights[p] for p in spec.age_weights], dtype=np.float64)
    tables = {}
    for m in spec.measures:
        mrng = make_rng(derive_seed(spec.seed, m.number))
        values = spec.base_mean + spec.noise_sd * mrng.standard_normal((n, len(spec.layout)))
        age_noise = mrng.standard_normal((n, len(age_pos)))
        if spec.carries_signal(m):
            values[:, sex_pos] += spec.delta * is_male[:, None]
            values[:, age_pos] = spec.base_mean + (ages - AGE_MEAN)[:, None] * age_w + spec.sigma * age_noise
        missing = mrng.random(values.shape) < spec.missing_rate
        values[missing] = np.nan
        tables[m] = ClusterMeasureTable(subjects, m, spec.layout, values)
    return tables, labels


# --------------------------------------------------------------------------
# Closed-form oracles
# --------------------------------------------------------------------------


def class_mean_threshold(
    x_train: np.ndarray, y_train: np.ndarray, x_test: np.ndarray, positions: Sequence[int]
) -> np.ndarray:
    """Average the planted positions, threshold halfway between the two class means."""
    pos = list(positions)
    s_train = x_train[:, pos].mean(axis=1)
    s_test = x_test[:, pos].mean(axis=1)
    mu1, mu0 = s_train[y_train == 1].mean(), s_train[y_train == 0].mean()
    thr = 0.5 * (mu0 + mu1)
    return ((s_test - thr) * np.sign(mu1 - mu0) > 0).astype(np.intp)


def least_squares(
    x_train: np.ndarray, y_train: np.ndarray, x_test: np.ndarray, positions: Sequence[int]
) -> np.ndarray:
    """Ordinary least squares with intercept on the planted positions."""
    pos = list(positions)

    def design(x):
        return np.column_stack([np.ones(len(x)), x[:, pos]])

    coef, *_ = np.linalg.lstsq(design(x_train), y_train, rcond=None)
    return design(x_test) @ coef


def oracle_fold_metrics(
    table: ClusterMeasureTable, labels: LabelTable, plan: FoldPlan, task: str, positions: Sequence[int]
) -> list[float]:
    """Per-fold test accuracy (``task="sex"``) or MAE (``"age"``) of the matching oracle.

    ``table`` should already be imputed.
    """
    out = []
    for k in range(plan.k):
        train, test = plan.split(k)
        xtr, xte = table.rows_for(train), table.rows_for(test)
        if task == "sex":
            pred = class_mean_threshold(xtr, labels.sex_index(train), xte, positions)
            out.append(float(np.mean(pred == labels.sex_index(test))))
        elif task == "age":
            pred = least_squares(xtr, labels.ages(train), xte, positions)
            out.append(float(np.mean(np.abs(pred - labels.ages(test)))))
        else:
            raise ValueError(f"unknown task {task!r}")
    return out
