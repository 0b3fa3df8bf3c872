"""Training protocol, metrics, cross-validation and per-measure ensembles.

Protocol defaults: minibatch SGD, batch 8, lr 0.1, 300 epochs, dropout 0.5,
5-fold CV. The test fold is evaluated after every epoch; reports carry both
the best test metric over epochs (the convention used to report the original
results, which is optimistically biased) and the final-epoch metric.
"""

from __future__ import annotations

import csv
import enum
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence, TextIO

import numpy as np

from .features import (
    ClusterMeasureTable,
    LabelTable,
    MeasureId,
    grid_from_vectors,
    impute_missing,
)
from .models import ModelSpec, Task, TrainedModel, Variant, build, predict
from .nn.layers import derive_seed, make_rng
from .nn.losses import cross_entropy_loss, mse_loss
from .nn.optim import sgd_step, step_decay
from .preprocess import FoldPlan, apply_minmax, fit_minmax, make_folds

log = logging.getLogger(__name__)


class TrainingDivergence(FloatingPointError):
    def __init__(self, epoch: int, batch: int, loss: float, measure=None, fold=None):
        self.epoch, self.batch, self.loss = epoch, batch, loss
        self.measure, self.fold = measure, fold
        where = "".join(f" {k}={v}" for k, v in (("measure", measure), ("fold", fold)) if v is not None)
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}{where}")


@dataclass(frozen=True)
class Hyperparams:
    batch_size: int = 8
    lr: float = 0.1
    epochs: int = 300
    dropout: float = 0.5
    k_folds: int = 5
    seed: int = 0
    lr_decay_step: int = 0  # 0 disables step decay
    lr_decay_gamma: float = 0.1

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1 or self.k_folds < 2:
            raise ValueError("batch_size and epochs must be >= 1, k_folds >= 2")
        if self.lr < 0 or self.lr_decay_step < 0 or not 0 < self.lr_decay_gamma <= 1:
            raise ValueError("invalid learning-rate settings")
        if not 0 <= self.dropout < 1:
            raise ValueError(f"dropout {self.dropout} outside [0, 1)")


# --------------------------------------------------------------------------
# Dataset
# --------------------------------------------------------------------------


class Dataset:
    """Imputed per-measure tables plus labels for a common set of subjects."""

    def __init__(self, tables: Mapping[MeasureId, ClusterMeasureTable], labels: LabelTable):
        if not tables:
            raise ValueError("dataset needs at least one measure table")
        tables = {m: impute_missing(t) for m, t in tables.items()}
        first = next(iter(tables.values()))
        for m, t in tables.items():
            if t.measure != m:
                raise ValueError(f"table keyed {m} holds {t.measure}")
            if set(t.subjects) != set(first.subjects):
                raise ValueError(f"{m} covers a different subject set than {first.measure}")
            if t.layout != first.layout:
                raise ValueError(f"{m} uses a different atlas layout")
        unlabeled = [s for s in first.subjects if s not in labels]
        if unlabeled:
            raise ValueError(f"{len(unlabeled)} subjects lack labels, e.g. {unlabeled[:3]}")
        self.tables = tables
        self.labels = labels
        self.subjects: tuple[str, ...] = first.subjects
        self.layout = first.layout

    @property
    def measures(self) -> list[MeasureId]:
        return list(self.tables)

    def features(self, measure: MeasureId, variant: Variant, subject_ids: Sequence[str]) -> np.ndarray:
        """Raw features ``(n, 1516)``-style for CNN1D or ``(n, 3, width)`` for CNN2D."""
        if measure not in self.tables:
            raise KeyError(f"dataset has no table for {measure}")
        vectors = self.tables[measure].rows_for(subject_ids)
        return vectors if variant is Variant.CNN1D else grid_from_vectors(vectors, self.layout)

    def targets(self, task: Task, subject_ids: Sequence[str]) -> np.ndarray:
        return self.labels.sex_index(subject_ids) if task is Task.SEX else self.labels.ages(subject_ids)


# --------------------------------------------------------------------------
# Metrics and history
# --------------------------------------------------------------------------


def accuracy(predicted_classes, true_classes) -> float:
    p, t = np.asarray(predicted_classes), np.asarray(true_classes)
    if p.size == 0:
        raise ValueError("no predictions to score")
    return float(np.mean(p == t))


def mean_absolute_error(pred, target) -> float:
    p, t = np.asarray(pred, float).reshape(-1), np.asarray(target, float).reshape(-1)
    if p.size == 0:
        raise ValueError("no predictions to score")
    return float(np.mean(np.abs(p - t)))


def higher_is_better(task: Task) -> bool:
    return task is Task.SEX


def _score(task: Task, outputs: np.ndarray, y: np.ndarray) -> float:
    if task is Task.SEX:
        return accuracy(outputs.argmax(axis=1), y)
    return mean_absolute_error(outputs[:, 0], y)


def _forward_eval(net, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    net.eval()
    try:
        return np.concatenate([net.forward(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])
    finally:
        net.train()


@dataclass(frozen=True)
class EpochRecord:
    epoch: int  # 1-based
    train_loss: float
    train_metric: float
    test_metric: float


@dataclass
class TrainHistory:
    task: Task
    records: list[EpochRecord] = field(default_factory=list)

    @property
    def best_epoch(self) -> int:
        scored = [r for r in self.records if not math.isnan(r.test_metric)]
        if not scored:
            return 0
        # earliest epoch wins ties
        if higher_is_better(self.task):
            return max(scored, key=lambda r: (r.test_metric, -r.epoch)).epoch
        return min(scored, key=lambda r: (r.test_metric, r.epoch)).epoch

    @property
    def best_test_metric(self) -> float:
        e = self.best_epoch
        return self.records[e - 1].test_metric if e else math.nan

    @property
    def final_test_metric(self) -> float:
        return self.records[-1].test_metric if self.records else math.nan

    @property
    def final_train_metric(self) -> float:
        return self.records[-1].train_metric if self.records else math.nan

    def to_csv(self, stream: TextIO) -> None:
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "train_metric", "test_metric"])
        for r in self.records:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.train_metric), repr(r.test_metric)])


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


def train_one(
    spec: ModelSpec,
    dataset: Dataset,
    fold: tuple[Sequence[str], Sequence[str]],
    hp: Hyperparams,
    seed: int,
    measure: MeasureId,
) -> tuple[TrainedModel, TrainHistory]:
    """Train one network on ``fold = (train_ids, test_ids)``.

    Normalization is fitted on the training subjects only. Batches are
    reshuffled every epoch and the last partial batch is kept. Returns the
    final-epoch model; the history holds per-epoch metrics.
    """
    train_ids, test_ids = list(fold[0]), list(fold[1])
    if not train_ids:
        raise ValueError("empty training set")
    overlap = set(train_ids) & set(test_ids)
    if overlap:
        raise ValueError(f"{len(overlap)} subjects in both train and test")

    raw_train = dataset.features(measure, spec.variant, train_ids)
    norm = fit_minmax(raw_train)
    x_train = apply_minmax(raw_train, norm)[:, None]
    y_train = dataset.targets(spec.task, train_ids)
    if test_ids:
        x_test = apply_minmax(dataset.features(measure, spec.variant, test_ids), norm)[:, None]
        y_test = dataset.targets(spec.task, test_ids)

    rng = make_rng(seed)
    net = build(spec, rng).train()
    loss_fn = cross_entropy_loss if spec.task is Task.SEX else mse_loss
    history = TrainHistory(spec.task)
    n = len(train_ids)
    # overflow surfaces as a non-finite loss below, reported as TrainingDivergence
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(hp.epochs):
            lr = step_decay(hp.lr, epoch, hp.lr_decay_step, hp.lr_decay_gamma)
            order = rng.permutation(n)
            total = 0.0
            for b, start in enumerate(range(0, n, hp.batch_size)):
                idx = order[start:start + hp.batch_size]
                out = net.forward(x_train[idx])
                loss, grad = loss_fn(out, y_train[idx])
                if not math.isfinite(loss):
                    raise TrainingDivergence(epoch + 1, b + 1, loss, measure=measure)
                net.backward(grad)
                sgd_step(net.parameters(), net.gradients(), lr)
                total += loss * len(idx)
            train_metric = _score(spec.task, _forward_eval(net, x_train), y_train)
            test_metric = _score(spec.task, _forward_eval(net, x_test), y_test) if test_ids else math.nan
            history.records.append(EpochRecord(epoch + 1, total / n, train_metric, test_metric))
            log.debug("%s epoch %d loss %.4f train %.4f test %.4f", measure, epoch + 1, total / n, train_metric, test_metric)
    net.eval()
    model = TrainedModel(spec, net, norm, measure, seed)
    return model, history


def evaluate(model: TrainedModel, dataset: Dataset, subject_ids: Sequence[str]) -> float:
    """Accuracy (sex) or MAE in years (age) of ``model`` on the given subjects."""
    if not subject_ids:
        raise ValueError("no subjects to evaluate")
    out = predict(model, dataset.features(model.measure, model.spec.variant, subject_ids))
    y = dataset.targets(model.spec.task, subject_ids)
    if model.spec.task is Task.SEX:
        return accuracy(out.argmax(axis=1), y)
    return mean_absolute_error(out, y)


def job_seed(hp: Hyperparams, measure: MeasureId, fold: int) -> int:
    return derive_seed(hp.seed, measure.number, fold)


def _train_job(args):
    spec, dataset, split, hp, seed, measure, fold = args
    try:
        return train_one(spec, dataset, split, hp, seed, measure)
    except TrainingDivergence as exc:
        raise TrainingDivergence(exc.epoch, exc.batch, exc.loss, measure=measure, fold=fold) from None


def _run_jobs(jobs: list, workers: int) -> list:
    if workers <= 1 or len(jobs) <= 1:
        return [_train_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_train_job, jobs))


def plan_folds(dataset: Dataset, hp: Hyperparams, stratify: bool = False) -> FoldPlan:
    labels = [dataset.labels.rows[s][0] for s in dataset.subjects] if stratify else None
    return make_folds(dataset.subjects, hp.k_folds, hp.seed, stratify=labels)


@dataclass
class FoldResult:
    fold: int
    test_ids: tuple[str, ...]
    history: TrainHistory
    model: TrainedModel | None = None

    @property
    def best_metric(self) -> float:
        return self.history.best_test_metric

    @property
    def final_metric(self) -> float:
        return self.history.final_test_metric


def mean_sd(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (ddof=1; 0 for a single value)."""
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


@dataclass
class CVReport:
    """Per-fold test metrics of one measure; sd is across folds."""

    measure: MeasureId
    task: Task
    folds: list[FoldResult]

    @property
    def fold_metrics(self) -> list[float]:
        return [f.best_metric for f in self.folds]

    @property
    def final_metrics(self) -> list[float]:
        return [f.final_metric for f in self.folds]

    @property
    def mean(self) -> float:
        return mean_sd(self.fold_metrics)[0]

    @property
    def sd(self) -> float:
        return mean_sd(self.fold_metrics)[1]

    @property
    def final_mean(self) -> float:
        return mean_sd(self.final_metrics)[0]

    @property
    def final_sd(self) -> float:
        return mean_sd(self.final_metrics)[1]

    def write_folds(self, w: csv.writer, final: bool = False) -> None:
        for f in self.folds:
            if final:
                w.writerow([self.measure.name, f.fold, repr(f.final_metric), len(f.history.records)])
            else:
                w.writerow([self.measure.name, f.fold, repr(f.best_metric), f.history.best_epoch])

    def summary_row(self, final: bool = False) -> list:
        mean, sd = (self.final_mean, self.final_sd) if final else (self.mean, self.sd)
        return [self.measure.name, repr(mean), repr(sd)]


FOLD_HEADER = ["measure", "fold", "metric", "best_epoch"]
FINAL_FOLD_HEADER = ["measure", "fold", "metric", "epoch"]
SUMMARY_HEADER = ["measure", "mean", "sd"]


def write_fold_reports(reports: Sequence[CVReport], folds: TextIO, summary: TextIO, final: bool = False) -> None:
    """CSV ``measure,fold,metric,best_epoch`` and ``measure,mean,sd`` for a set of reports."""
    wf = csv.writer(folds, lineterminator="\n")
    ws = csv.writer(summary, lineterminator="\n")
    wf.writerow(FINAL_FOLD_HEADER if final else FOLD_HEADER)
    ws.writerow(SUMMARY_HEADER)
    for r in reports:
        r.write_folds(wf, final=final)
        ws.writerow(r.summary_row(final=final))


def cross_validate(
    spec: ModelSpec,
    dataset: Dataset,
    hp: Hyperparams,
    measure: MeasureId,
    plan: FoldPlan | None = None,
    workers: int = 1,
    keep_models: bool = True,
) -> CVReport:
    """Train one model per fold; every subject is tested exactly once."""
    plan = plan or plan_folds(dataset, hp)
    jobs = [
        (spec, dataset, plan.split(k), hp, job_seed(hp, measure, k), measure, k)
        for k in range(plan.k)
    ]
    results = _run_jobs(jobs, workers)
    folds = [
        FoldResult(k, tuple(plan.test_ids(k)), history, model if keep_models else None)
        for k, (model, history) in enumerate(results)
    ]
    return CVReport(measure, spec.task, folds)


# --------------------------------------------------------------------------
# Ensembles
# --------------------------------------------------------------------------


class Rule(enum.Enum):
    VOTE = "vote"
    AVERAGE = "average"


def rule_for(task: Task) -> Rule:
    return Rule.VOTE if task is Task.SEX else Rule.AVERAGE


@dataclass
class Ensemble:
    members: list[TrainedModel]
    rule: Rule

    def __post_init__(self):
        if not self.members:
            raise ValueError("ensemble needs at least one member")
        tasks = {m.spec.task for m in self.members}
        if len(tasks) != 1:
            raise ValueError("ensemble members must share a task")
        if rule_for(tasks.pop()) is not self.rule:
            raise ValueError(f"rule {self.rule.value} does not match the members' task")

    @property
    def task(self) -> Task:
        return self.members[0].spec.task

    @property
    def measures(self) -> list[MeasureId]:
        return [m.measure for m in self.members]


def combine_votes(member_probs: Sequence[np.ndarray]) -> np.ndarray:
    """Equal-weight majority vote over members' argmax classes.

    Ties go to the tied class with the larger summed probability, then to the
    lower class index (classes are in lexicographic order, F before M).
    """
    probs = np.stack([np.asarray(p, dtype=np.float64) for p in member_probs])  # (members, n, classes)
    n_classes = probs.shape[2]
    votes = probs.argmax(axis=2)
    counts = np.stack([(votes == c).sum(axis=0) for c in range(n_classes)], axis=1)
    summed = probs.sum(axis=0)
    tied = counts == counts.max(axis=1, keepdims=True)
    return np.where(tied, summed, -np.inf).argmax(axis=1)


def combine_average(member_preds: Sequence[np.ndarray]) -> np.ndarray:
    preds = np.stack([np.asarray(p, dtype=np.float64) for p in member_preds])
    return preds.sum(axis=0) / len(preds)


def ensemble_predict(ensemble: Ensemble, features: Mapping[MeasureId, np.ndarray]) -> np.ndarray:
    """Class indices (vote) or ages (average) from raw per-measure features."""
    missing = [m.name for m in ensemble.measures if m not in features]
    if missing:
        raise ValueError(f"missing features for members: {missing}")
    outputs = [predict(m, features[m.measure]) for m in ensemble.members]
    if ensemble.rule is Rule.VOTE:
        if outputs[0].ndim == 1:
            return combine_votes([o[None] for o in outputs])[0]
        return combine_votes(outputs)
    return combine_average(outputs)


def ensemble_train(
    measures: Sequence[MeasureId],
    spec: ModelSpec,
    dataset: Dataset,
    hp: Hyperparams,
    fold: tuple[Sequence[str], Sequence[str]],
    fold_index: int = 0,
    workers: int = 1,
) -> tuple[Ensemble, list[TrainHistory]]:
    """One independently trained member per measure, all on the same split."""
    if not measures:
        raise ValueError("empty measure list")
    jobs = [(spec, dataset, fold, hp, job_seed(hp, m, fold_index), m, fold_index) for m in measures]
    results = _run_jobs(jobs, workers)
    members = [model for model, _ in results]
    return Ensemble(members, rule_for(spec.task)), [h for _, h in results]


@dataclass
class EnsembleFold:
    fold: int
    member_final: dict[str, float]
    member_best: dict[str, tuple[float, int]]
    combined: float
    models: list[TrainedModel] = field(default_factory=list)


@dataclass
class EnsembleReport:
    measures: list[MeasureId]
    task: Task
    folds: list[EnsembleFold]

    @property
    def combined_metrics(self) -> list[float]:
        return [f.combined for f in self.folds]

    def member_metrics(self, measure: MeasureId) -> list[float]:
        return [f.member_final[measure.name] for f in self.folds]

    def write(self, stream: TextIO) -> None:
        """Rows ``member,fold,final_metric,best_metric,best_epoch``; member ``ensemble`` is the combination."""
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(["member", "fold", "final_metric", "best_metric", "best_epoch"])
        for f in self.folds:
            for m in self.measures:
                best, epoch = f.member_best[m.name]
                w.writerow([m.name, f.fold, repr(f.member_final[m.name]), repr(best), epoch])
            w.writerow(["ensemble", f.fold, repr(f.combined), "", ""])

    def write_summary(self, stream: TextIO) -> None:
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(["member", "mean", "sd"])
        for m in self.measures:
            w.writerow([m.name, *map(repr, mean_sd(self.member_metrics(m)))])
        w.writerow(["ensemble", *map(repr, mean_sd(self.combined_metrics))])


def cross_validate_ensemble(
    measures: Sequence[MeasureId],
    spec: ModelSpec,
    dataset: Dataset,
    hp: Hyperparams,
    plan: FoldPlan | None = None,
    workers: int = 1,
) -> EnsembleReport:
    """Per fold: train every member on the shared split and score the combined prediction."""
    if not measures:
        raise ValueError("empty measure list")
    plan = plan or plan_folds(dataset, hp)
    jobs = [
        (spec, dataset, plan.split(k), hp, job_seed(hp, m, k), m, k)
        for k in range(plan.k)
        for m in measures
    ]
    results = iter(_run_jobs(jobs, workers))
    folds = []
    for k in range(plan.k):
        trained = [next(results) for _ in measures]
        ensemble = Ensemble([model for model, _ in trained], rule_for(spec.task))
        test_ids = plan.test_ids(k)
        feats = {m: dataset.features(m, spec.variant, test_ids) for m in measures}
        combined = ensemble_predict(ensemble, feats)
        y = dataset.targets(spec.task, test_ids)
        score = accuracy(combined, y) if spec.task is Task.SEX else mean_absolute_error(combined, y)
        folds.append(
            EnsembleFold(
                fold=k,
                member_final={m.name: evaluate(model, dataset, test_ids) for m, (model, _) in zip(measures, trained)},
                member_best={m.name: (h.best_test_metric, h.best_epoch) for m, (_, h) in zip(measures, trained)},
                combined=score,
                models=list(ensemble.members),
            )
        )
    return EnsembleReport(list(measures), spec.task, folds)


def spec_with_dropout(spec: ModelSpec, hp: Hyperparams) -> ModelSpec:
    return replace(spec, conv_dropout=hp.dropout, fc_dropout=hp.dropout)
