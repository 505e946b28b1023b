from __future__ import annotations

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from hhvaem import HHVAEM
from hhvaem.errors import ContractError

FAST = dict(hidden=16, marginal_hidden=8, marginal_steps=30, total_steps=40, hmc_T=2, n_samples=3)


@pytest.fixture(scope="module")
def table():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(150, 3))
    X[:, 2] = X[:, 0] + 0.1 * rng.normal(size=150)
    y = X[:, 0] - X[:, 1] + 0.1 * rng.normal(size=150)
    Xm = X.copy()
    Xm[rng.random(X.shape) < 0.3] = np.nan
    return X, Xm, y


def test_params_round_trip_through_clone():
    est = HHVAEM(variant="hvaem", hidden=8)
    assert clone(est).get_params() == est.get_params()


def test_fit_transform_fills_only_missing_cells(table):
    _, Xm, y = table
    est = HHVAEM(**FAST).fit(Xm, y)
    out = est.transform(Xm)
    observed = ~np.isnan(Xm)
    np.testing.assert_array_equal(out[observed], Xm[observed])
    assert np.all(np.isfinite(out))
    assert est.predict(Xm).shape == (Xm.shape[0],)


def test_binary_target_probabilities(table):
    _, Xm, y = table
    est = HHVAEM(variant="vaem", target_kind="binary", **FAST).fit(Xm, (y > 0).astype(float))
    proba = est.predict_proba(Xm[:10])
    assert proba.shape == (10, 2)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)


def test_unfitted_and_wrong_width_inputs(table):
    _, Xm, y = table
    with pytest.raises(NotFittedError):
        HHVAEM().transform(Xm)
    est = HHVAEM(variant="vaem", **FAST).fit(Xm, y)
    with pytest.raises(ContractError):
        est.transform(Xm[:, :2])
    with pytest.raises(ValueError):
        est.transform(np.full((2, 3), np.inf))


def test_categorical_features_are_inferred(table):
    X, _, y = table
    Xc = X.copy()
    Xc[:, 1] = np.digitize(X[:, 1], [-0.5, 0.5])
    est = HHVAEM(variant="vaem", feature_kinds=["real", "categorical", "real"], **FAST).fit(Xc, y)
    assert est.feature_types_[1].K == 3
    assert set(np.unique(est.transform(np.array([[0.1, np.nan, 0.2]]))[:, 1])) <= {0.0, 1.0, 2.0}
