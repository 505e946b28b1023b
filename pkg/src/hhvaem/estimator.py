"""scikit-learn style wrapper around the training harness."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import harness
from . import likelihoods as lk
from .data import MixedDataset
from .errors import ContractError


def _as_dataset(X, y, feature_types, target_type):
    x_mask = (~np.isnan(X)).astype(np.float64)
    if y is None:
        y = np.full(X.shape[0], np.nan)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.shape[0] != X.shape[0]:
        raise ContractError(f"X has {X.shape[0]} rows but y has {y.shape[0]}")
    y_mask = (~np.isnan(y)).astype(np.float64)
    return MixedDataset(X, x_mask, y, y_mask, feature_types, target_type)


class HHVAEM(TransformerMixin, BaseEstimator):
    """Imputer and predictor for incomplete mixed-type tables.

    Missing entries are NaN. ``transform`` imputes every missing feature
    cell, ``predict`` returns target predictions from the observed features.

    Parameters
    ----------
    variant : {"hhvaem", "hvaem", "hmcvaem", "vaem"}
    feature_kinds : sequence of str, optional
        ``real``, ``positive``, ``binary`` or ``categorical`` per column; all
        ``real`` by default. Categorical values are integer codes ``0..K-1``.
    n_categories : dict, optional
        ``{column: K}``; inferred from the training data when omitted.
    target_kind : str
        Likelihood of the target column.
    """

    def __init__(
        self,
        variant="hhvaem",
        feature_kinds=None,
        n_categories=None,
        target_kind="real",
        target_categories=None,
        dims=(10, 5),
        hidden=256,
        marginal_hidden=16,
        marginal_steps=1000,
        total_steps=5000,
        hmc_fraction=0.1,
        hmc_T=10,
        hmc_LF=5,
        batch_size=100,
        learning_rate=1e-3,
        n_samples=10,
        random_state=0,
    ):
        self.variant = variant
        self.feature_kinds = feature_kinds
        self.n_categories = n_categories
        self.target_kind = target_kind
        self.target_categories = target_categories
        self.dims = dims
        self.hidden = hidden
        self.marginal_hidden = marginal_hidden
        self.marginal_steps = marginal_steps
        self.total_steps = total_steps
        self.hmc_fraction = hmc_fraction
        self.hmc_T = hmc_T
        self.hmc_LF = hmc_LF
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.n_samples = n_samples
        self.random_state = random_state

    def _config(self):
        return harness.RunConfig(
            seed=int(self.random_state or 0), variant=self.variant, model_dims=tuple(self.dims),
            model_hidden=self.hidden, model_marginal_hidden=self.marginal_hidden,
            train_marginal_steps=self.marginal_steps, train_total_steps=self.total_steps,
            train_hmc_fraction=self.hmc_fraction, hmc_T=self.hmc_T, hmc_LF=self.hmc_LF,
            train_batch_size=self.batch_size, train_lr=self.learning_rate,
        )

    def _types(self, X, y):
        D = X.shape[1]
        kinds = list(self.feature_kinds) if self.feature_kinds is not None else ["real"] * D
        if len(kinds) != D:
            raise ContractError(f"feature_kinds has {len(kinds)} entries for {D} columns")
        cats = dict(self.n_categories or {})
        ftypes = []
        for d, kind in enumerate(kinds):
            K = 1
            if kind == "categorical":
                K = cats.get(d) or int(np.nanmax(X[:, d])) + 1
            ftypes.append(lk.FeatureType(kind, K, f"x{d + 1}"))
        K = 1
        if self.target_kind == "categorical":
            K = self.target_categories or int(np.nanmax(y)) + 1
        return ftypes, lk.FeatureType(self.target_kind, K, "y")

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64, ensure_all_finite="allow-nan")
        if y is not None:
            y = check_array(np.asarray(y, dtype=np.float64).reshape(-1, 1), ensure_all_finite="allow-nan")[:, 0]
        elif self.target_kind != "real":
            raise ContractError("a non-real target kind needs y")
        ftypes, ttype = self._types(X, y)
        dataset = _as_dataset(X, y, ftypes, ttype)
        self.model_ = harness.run_train(self._config(), dataset)
        self.n_features_in_ = X.shape[1]
        self.feature_types_ = ftypes
        self.target_type_ = ttype
        return self

    def _dataset(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64, ensure_all_finite="allow-nan")
        if X.shape[1] != self.n_features_in_:
            raise ContractError(f"expected {self.n_features_in_} columns, got {X.shape[1]}")
        return _as_dataset(X, None, self.feature_types_, self.target_type_)

    def transform(self, X):
        """Copy of ``X`` with every NaN replaced by the model's imputation."""
        dataset = self._dataset(X)
        return harness.impute(self.model_, dataset, k=self.n_samples, seed=int(self.random_state or 0))

    def predict(self, X):
        dataset = self._dataset(X)
        return harness.predict(self.model_, dataset, k=self.n_samples, seed=int(self.random_state or 0))

    def predict_proba(self, X):
        """Class probabilities ``(n, K)`` for a binary or categorical target."""
        dataset = self._dataset(X)
        return harness.predict(self.model_, dataset, k=self.n_samples, seed=int(self.random_state or 0), proba=True)
