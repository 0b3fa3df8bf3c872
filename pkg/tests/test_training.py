import io
import itertools

import numpy as np
import pytest
from conftest import tiny_dataset, tiny_spec
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import binom

from wmpredict.features import ALL_MEASURES, MeasureId, parse_measure_list
from wmpredict.models import TrainedModel, Task, Variant, build, predict
from wmpredict.nn import make_rng
from wmpredict.preprocess import fit_minmax
from wmpredict.training import (
    CVReport,
    Ensemble,
    Hyperparams,
    Rule,
    TrainingDivergence,
    accuracy,
    combine_average,
    combine_votes,
    cross_validate,
    cross_validate_ensemble,
    ensemble_predict,
    ensemble_train,
    evaluate,
    mean_absolute_error,
    mean_sd,
    plan_folds,
    train_one,
    write_fold_reports,
)

FA1_MEAN = MeasureId.parse("FA1-mean")
HP = Hyperparams(epochs=2, lr=0.01, k_folds=5, seed=3)


# --- train_one -----------------------------------------------------------------


def test_zero_learning_rate_leaves_parameters_untouched():
    ds = tiny_dataset()
    spec = tiny_spec(dropout=0.5)
    hp = Hyperparams(epochs=3, lr=0.0)
    fresh = build(spec, make_rng(11)).parameters()
    model, _ = train_one(spec, ds, plan_folds(ds, hp).split(0), hp, seed=11, measure=FA1_MEAN)
    after = model.network.parameters()
    assert list(after) == list(fresh)
    for k in fresh:
        assert after[k].tobytes() == fresh[k].tobytes(), k


@pytest.mark.parametrize("task", list(Task))
def test_same_seed_same_history_and_weights(task):
    ds = tiny_dataset()
    spec = tiny_spec(Variant.CNN2D, task, dropout=0.5)
    split = plan_folds(ds, HP).split(1)
    lr_hp = HP if task is Task.SEX else Hyperparams(epochs=2, lr=1e-4)
    m1, h1 = train_one(spec, ds, split, lr_hp, seed=7, measure=FA1_MEAN)
    m2, h2 = train_one(spec, ds, split, lr_hp, seed=7, measure=FA1_MEAN)
    assert h1.records == h2.records
    s1, s2 = m1.network.state(), m2.network.state()
    assert all(s1[k].tobytes() == s2[k].tobytes() for k in s1)


def test_separable_sex_training_accuracy(separable_sex):
    *_, history = separable_sex
    assert len(history.records) == 30
    assert history.final_train_metric >= 0.95


def test_norm_params_come_from_training_subjects_only():
    ds = tiny_dataset()
    split = plan_folds(ds, HP).split(2)
    model, _ = train_one(tiny_spec(), ds, split, HP, seed=0, measure=FA1_MEAN)
    expected = fit_minmax(ds.features(FA1_MEAN, Variant.CNN1D, split[0]))
    assert model.norm_params.equals(expected)


def test_train_one_errors():
    ds = tiny_dataset()
    with pytest.raises(ValueError):
        train_one(tiny_spec(), ds, ([], ["sub001"]), HP, 0, FA1_MEAN)
    with pytest.raises(ValueError):
        train_one(tiny_spec(), ds, (["sub001", "sub002"], ["sub002"]), HP, 0, FA1_MEAN)


def test_divergence_is_reported_with_context():
    ds = tiny_dataset()
    hp = Hyperparams(epochs=5, lr=1e6)
    with pytest.raises(TrainingDivergence) as info:
        cross_validate(tiny_spec(task=Task.AGE), ds, hp, FA1_MEAN)
    err = info.value
    assert err.epoch >= 1 and err.batch >= 1
    assert err.fold in range(5) and err.measure == FA1_MEAN
    assert "FA1-mean" in str(err)


# --- metrics / evaluate ------------------------------------------------------


def test_metric_examples():
    assert accuracy([0, 1, 1], [0, 1, 1]) == 1.0
    assert mean_absolute_error([25.0, 30.0], [27.0, 30.0]) == 1.0
    with pytest.raises(ValueError):
        accuracy([], [])


def test_evaluate_empty_subjects():
    ds = tiny_dataset()
    model, _ = train_one(tiny_spec(), ds, plan_folds(ds, HP).split(0), HP, 0, FA1_MEAN)
    with pytest.raises(ValueError):
        evaluate(model, ds, [])


def test_evaluate_matches_last_epoch_test_metric():
    ds = tiny_dataset(n=30)
    split = plan_folds(ds, HP).split(0)
    model, history = train_one(tiny_spec(dropout=0.5), ds, split, HP, 0, FA1_MEAN)
    assert evaluate(model, ds, split[1]) == history.final_test_metric


def test_chance_level_on_balanced_labels():
    ds = tiny_dataset(n=200, delta_over_noise=0.0)
    spec = tiny_spec()
    net = build(spec, make_rng(9))
    raw = ds.features(FA1_MEAN, Variant.CNN1D, ds.subjects)
    model = TrainedModel(spec, net, fit_minmax(raw), FA1_MEAN, 9)
    acc = evaluate(model, ds, list(ds.subjects))
    lo, hi = binom.interval(0.99, 200, 0.5)
    assert lo / 200 <= acc <= hi / 200


# --- cross-validation ----------------------------------------------------------


def test_cv_ten_subjects_five_folds():
    ds = tiny_dataset(n=10)
    report = cross_validate(tiny_spec(), ds, HP, FA1_MEAN)
    assert len(report.folds) == 5
    tested = [s for f in report.folds for s in f.test_ids]
    assert len(tested) == 10 and set(tested) == set(ds.subjects)


def test_cv_each_prediction_from_a_model_that_never_saw_the_subject():
    ds = tiny_dataset(n=15)
    plan = plan_folds(ds, HP)
    report = cross_validate(tiny_spec(), ds, HP, FA1_MEAN, plan=plan)
    for f in report.folds:
        train, test = plan.split(f.fold)
        assert not set(train) & set(f.test_ids)
        assert f.model.norm_params.equals(fit_minmax(ds.features(FA1_MEAN, Variant.CNN1D, train)))


def test_cv_aggregate_is_arithmetic_mean():
    ds = tiny_dataset(n=15)
    report = cross_validate(tiny_spec(task=Task.AGE), ds, Hyperparams(epochs=2, lr=1e-4, k_folds=3), FA1_MEAN)
    metrics = report.fold_metrics
    assert report.mean == pytest.approx(sum(metrics) / 3, abs=1e-12)
    assert report.sd == pytest.approx(float(np.std(metrics, ddof=1)), abs=1e-12)
    assert report.final_mean == pytest.approx(sum(report.final_metrics) / 3, abs=1e-12)


def test_mean_sd_single_value():
    assert mean_sd([2.5]) == (2.5, 0.0)


def test_sweep_over_all_measures():
    ds = tiny_dataset(n=10, measures=ALL_MEASURES)
    hp = Hyperparams(epochs=1, lr=0.01, k_folds=2)
    plan = plan_folds(ds, hp)
    reports = [cross_validate(tiny_spec(), ds, hp, m, plan=plan, keep_models=False) for m in ds.measures]
    assert len(reports) == 14
    assert [r.measure for r in reports] == list(ALL_MEASURES)
    folds, summary = io.StringIO(), io.StringIO()
    write_fold_reports(reports, folds, summary)
    assert folds.getvalue().splitlines()[0] == "measure,fold,metric,best_epoch"
    assert len(folds.getvalue().splitlines()) == 1 + 14 * 2
    assert len(summary.getvalue().splitlines()) == 15


def test_parallel_workers_match_serial():
    ds = tiny_dataset(n=12)
    hp = Hyperparams(epochs=2, lr=0.01, k_folds=3)
    serial = cross_validate(tiny_spec(dropout=0.5), ds, hp, FA1_MEAN, workers=1)
    parallel = cross_validate(tiny_spec(dropout=0.5), ds, hp, FA1_MEAN, workers=2)
    assert [f.history.records for f in serial.folds] == [f.history.records for f in parallel.folds]


def test_best_epoch_prefers_earliest_tie():
    from wmpredict.training import EpochRecord, TrainHistory

    h = TrainHistory(Task.AGE, [EpochRecord(i + 1, 0.0, 0.0, v) for i, v in enumerate([3.0, 1.0, 2.0, 1.0])])
    assert (h.best_epoch, h.best_test_metric, h.final_test_metric) == (2, 1.0, 1.0)
    s = TrainHistory(Task.SEX, [EpochRecord(i + 1, 0.0, 0.0, v) for i, v in enumerate([0.5, 0.9, 0.9])])
    assert s.best_epoch == 2


# --- ensembles -------------------------------------------------------------------


def probs_for(classes, confidence=0.9):
    out = np.full((len(classes), 2), 1 - confidence)
    out[np.arange(len(classes)), classes] = confidence
    return out


def test_vote_majority():
    m, f = 1, 0
    assert combine_votes([probs_for([m]), probs_for([m]), probs_for([f])]).tolist() == [m]


def test_average_example():
    assert combine_average([np.array([25.0]), np.array([27.0])]).tolist() == [26.0]


def test_vote_tie_goes_to_larger_summed_probability():
    a = np.array([[0.05, 0.95]])  # votes M
    b = np.array([[0.65, 0.35]])  # votes F
    assert combine_votes([a, b]).tolist() == [1]  # P(M) 1.3 vs P(F) 0.7
    c = np.array([[0.45, 0.55]])
    d = np.array([[0.9, 0.1]])
    assert combine_votes([c, d]).tolist() == [0]


def test_vote_exact_tie_goes_to_lower_class():
    a = np.array([[0.4, 0.6]])
    b = np.array([[0.6, 0.4]])
    assert combine_votes([a, b]).tolist() == [0]


def test_disjoint_error_vote_is_perfect():
    y = np.array([0, 1] * 15)
    members = []
    for k in range(3):
        pred = y.copy()
        wrong = slice(10 * k, 10 * k + 10)
        pred[wrong] = 1 - pred[wrong]
        members.append(probs_for(pred, 0.99))
        assert accuracy(pred, y) == pytest.approx(2 / 3)
    assert accuracy(combine_votes(members), y) == 1.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_average_is_mean_and_order_free(seed, k):
    preds = [np.random.default_rng(seed + i).uniform(20, 40, 7) for i in range(k)]
    expected = np.mean(np.stack(preds), axis=0)
    assert np.abs(combine_average(preds) - expected).max() <= 1e-12
    for perm in itertools.islice(itertools.permutations(preds), 6):
        assert np.abs(combine_average(list(perm)) - expected).max() <= 1e-12


def _member(task, measure, seed):
    spec = tiny_spec(task=task)
    raw = make_rng(seed).random((10,) + spec.input_shape)
    return TrainedModel(spec, build(spec, make_rng(seed)), fit_minmax(raw), measure, seed), raw


@pytest.mark.parametrize("task", list(Task))
def test_singleton_ensemble_equals_member(task):
    model, raw = _member(task, FA1_MEAN, 4)
    rule = Rule.VOTE if task is Task.SEX else Rule.AVERAGE
    out = ensemble_predict(Ensemble([model], rule), {FA1_MEAN: raw})
    direct = predict(model, raw)
    if task is Task.SEX:
        assert out.tolist() == direct.argmax(axis=1).tolist()
    else:
        assert out.tobytes() == direct.tobytes()


def test_ensemble_validation():
    sex, _ = _member(Task.SEX, FA1_MEAN, 0)
    age, _ = _member(Task.AGE, ALL_MEASURES[8], 0)
    with pytest.raises(ValueError):
        Ensemble([], Rule.VOTE)
    with pytest.raises(ValueError):
        Ensemble([sex, age], Rule.VOTE)
    with pytest.raises(ValueError):
        Ensemble([age], Rule.VOTE)


def test_ensemble_missing_member_features():
    a, raw = _member(Task.SEX, FA1_MEAN, 0)
    b, _ = _member(Task.SEX, ALL_MEASURES[8], 1)
    with pytest.raises(ValueError, match="MD1-mean"):
        ensemble_predict(Ensemble([a, b], Rule.VOTE), {FA1_MEAN: raw})


def test_ensemble_train_three_members():
    measures = parse_measure_list("FA1-mean,MD1-mean,Num_Fibers")
    ds = tiny_dataset(n=12, measures=measures)
    ens, histories = ensemble_train(measures, tiny_spec(), ds, HP, plan_folds(ds, HP).split(0))
    assert ens.rule is Rule.VOTE and len(ens.members) == 3 and len(histories) == 3
    assert ens.measures == measures
    with pytest.raises(ValueError):
        ensemble_train([], tiny_spec(), ds, HP, plan_folds(ds, HP).split(0))


def test_combination_row_accepted():
    names = [m.name for m in parse_measure_list("2,3,6,9,12,13")]
    assert names == ["FA1-max", "FA1-mean", "FA2-mean", "MD1-mean", "MD2-mean", "Num_Fibers"]


def test_cross_validated_ensemble_report():
    measures = [FA1_MEAN, ALL_MEASURES[8]]
    ds = tiny_dataset(n=12, measures=measures)
    hp = Hyperparams(epochs=2, lr=1e-4, k_folds=3)
    report = cross_validate_ensemble(measures, tiny_spec(task=Task.AGE), ds, hp)
    assert len(report.folds) == 3
    buf = io.StringIO()
    report.write(buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "member,fold,final_metric,best_metric,best_epoch"
    assert len(lines) == 1 + 3 * 3
    assert sum(line.startswith("ensemble,") for line in lines) == 3
    # the averaged ensemble can be no worse than the worse member on any fold (MAE is convex)
    for f in report.folds:
        assert f.combined <= max(f.member_final.values()) + 1e-12


def test_cv_report_requires_consistent_fields():
    ds = tiny_dataset(n=10)
    report = cross_validate(tiny_spec(), ds, HP, FA1_MEAN)
    assert isinstance(report, CVReport)
    assert report.task is Task.SEX
