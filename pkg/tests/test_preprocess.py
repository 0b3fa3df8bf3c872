import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wmpredict.features import ALL_MEASURES, FeatureMatrix, FeatureVector
from wmpredict.preprocess import apply_minmax, fit_minmax, make_folds

IDS = [f"s{i}" for i in range(11)]


def test_ten_subjects_five_folds_of_two():
    plan = make_folds(IDS[:10], 5, seed=1)
    assert plan.fold_sizes() == [2, 2, 2, 2, 2]


def test_eleven_subjects_remainder_distribution():
    plan = make_folds(IDS, 5, seed=1)
    assert sorted(plan.fold_sizes()) == [2, 2, 2, 2, 3]


def test_fold_plan_deterministic_and_seed_sensitive():
    a, b = make_folds(IDS, 5, seed=42), make_folds(IDS, 5, seed=42)
    assert dict(a.assignments) == dict(b.assignments)
    others = [dict(make_folds(IDS, 5, seed=s).assignments) for s in range(1, 6)]
    assert any(o != dict(a.assignments) for o in others)


@pytest.mark.parametrize("k", [1, 0, 12])
def test_invalid_k(k):
    with pytest.raises(ValueError):
        make_folds(IDS, k, seed=0)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 60), st.integers(2, 10), st.integers(0, 2**63 - 1))
def test_test_folds_partition_subjects(n, k, seed):
    k = min(k, n)
    ids = [f"x{i}" for i in range(n)]
    plan = make_folds(ids, k, seed)
    tested = [s for f in range(k) for s in plan.test_ids(f)]
    assert sorted(tested) == sorted(ids)
    sizes = plan.fold_sizes()
    assert max(sizes) - min(sizes) <= 1
    for f in range(k):
        train, test = plan.split(f)
        assert not set(train) & set(test)
        assert len(train) + len(test) == n


def test_stratified_folds_balance_labels():
    ids = [f"s{i}" for i in range(20)]
    sex = ["M"] * 10 + ["F"] * 10
    plan = make_folds(ids, 5, seed=3, stratify=sex)
    assert plan.fold_sizes() == [4] * 5
    for f in range(5):
        males = sum(1 for s in plan.test_ids(f) if sex[ids.index(s)] == "M")
        assert males == 2


def test_fold_plan_csv():
    buf = io.StringIO()
    make_folds(IDS[:4], 2, seed=0).to_csv(buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "subject_id,fold"
    assert len(lines) == 5


def test_fit_minmax_direct():
    p = fit_minmax(np.array([[2.0, 0.0], [4.0, 0.0], [6.0, 0.0]]))
    assert (p.minimum.tolist(), p.maximum.tolist()) == ([2.0, 0.0], [6.0, 0.0])


def test_fit_minmax_single_subject():
    v = np.array([[3.0, -1.0, 7.0]])
    p = fit_minmax(v)
    np.testing.assert_array_equal(p.minimum, v[0])
    np.testing.assert_array_equal(p.maximum, v[0])


def test_fit_minmax_accepts_feature_objects():
    m = ALL_MEASURES[2]
    feats = [FeatureVector(np.array([1.0, 5.0]), m, "a"), FeatureVector(np.array([3.0, 2.0]), m, "b")]
    p = fit_minmax(feats)
    assert p.minimum.tolist() == [1.0, 2.0]
    grids = [FeatureMatrix(np.zeros((3, 4)), m, "a"), FeatureMatrix(np.ones((3, 4)), m, "b")]
    assert fit_minmax(grids).shape == (3, 4)


def test_fit_minmax_errors():
    m = ALL_MEASURES[2]
    with pytest.raises(ValueError):
        fit_minmax([])
    with pytest.raises(ValueError):
        fit_minmax([np.zeros(3), np.zeros(4)])
    with pytest.raises(ValueError):
        fit_minmax([FeatureVector(np.zeros(2), m, "a"), FeatureVector(np.zeros(2), ALL_MEASURES[0], "b")])


def test_apply_minmax_examples():
    p = fit_minmax(np.array([[2.0, 5.0], [6.0, 5.0]]))
    out = apply_minmax(np.array([[4.0, 5.0], [8.0, 9.0]]), p)
    assert out[0, 0] == 0.5  # midpoint
    assert out[0, 1] == 0.0  # constant position
    assert out[1, 0] == 1.5  # test value outside the range is not clamped
    assert out[1, 1] == 0.0


def test_apply_minmax_shape_mismatch():
    p = fit_minmax(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        apply_minmax(np.zeros(4), p)


def test_apply_minmax_keeps_feature_type():
    m = ALL_MEASURES[2]
    p = fit_minmax(np.array([[0.0, 0.0], [2.0, 4.0]]))
    out = apply_minmax(FeatureVector(np.array([1.0, 1.0]), m, "a"), p)
    assert isinstance(out, FeatureVector)
    assert out.values.tolist() == [0.5, 0.25]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(3, 30))
def test_normalized_training_features_in_unit_interval(seed, n):
    x = np.random.default_rng(seed).normal(size=(n, 7)) * 100
    out = apply_minmax(x, fit_minmax(x))
    assert out.min() >= 0.0 and out.max() <= 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_norm_params_ignore_test_fold(seed):
    rng = np.random.default_rng(seed)
    ids = [f"s{i}" for i in range(15)]
    data = {s: rng.normal(size=6) for s in ids}
    plan = make_folds(ids, 5, seed)
    train, test = plan.split(0)
    before = fit_minmax([data[s] for s in train])
    for s in test:
        data[s] = data[s] + rng.normal(size=6) * 1e6
    after = fit_minmax([data[s] for s in train])
    assert before.minimum.tobytes() == after.minimum.tobytes()
    assert before.maximum.tobytes() == after.maximum.tobytes()
