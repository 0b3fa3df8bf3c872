import numpy as np
import pytest

from wmpredict.features import AtlasLayout
from wmpredict.models import ModelSpec, Task, Variant
from wmpredict.synth import generate, planted_spec
from wmpredict.training import Dataset, Hyperparams, plan_folds, train_one

TINY_LAYOUT = AtlasLayout.from_counts(6, 2)  # 14 positions, 3 x 8 grid


def tiny_spec(variant=Variant.CNN1D, task=Task.SEX, dropout=0.0):
    return ModelSpec.for_layout(
        variant, task, TINY_LAYOUT, filters=4, fc_sizes=(8, 4), conv_dropout=dropout, fc_dropout=dropout
    )


def tiny_dataset(n=20, measures=None, seed=0, **kw):
    kwargs = dict(n_subjects=n, layout=TINY_LAYOUT, n_sex_positions=3, n_age_positions=3, seed=seed, **kw)
    if measures is not None:
        kwargs["measures"] = tuple(measures)
    tables, labels = generate(planted_spec(**kwargs))
    return Dataset(tables, labels)


@pytest.fixture(scope="session")
def separable_sex():
    """Default-size planted sex data and a CNN1D trained 30 epochs on fold 0."""
    spec = planted_spec()
    ds = Dataset(*generate(spec))
    hp = Hyperparams(epochs=30)
    plan = plan_folds(ds, hp)
    m = spec.measures[0]
    mspec = ModelSpec.for_layout(Variant.CNN1D, Task.SEX, spec.layout)
    model, history = train_one(mspec, ds, plan.split(0), hp, seed=1, measure=m)
    return spec, ds, plan, model, history


@pytest.fixture
def rng():
    return np.random.default_rng(0)
