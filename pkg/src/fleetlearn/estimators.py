"""scikit-learn style wrappers for offline fitting.

:class:`BCPolicy` behavior-clones the marginal head (and, when indicators are
given, the indicator-conditioned head) with plain epoch-wise SGD.
:class:`LinearValue` is the frozen least-squares value function.
Both expose ``params_`` / ``coef_`` after ``fit``.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .algorithms import solve_least_squares
from .envsim import NUM_ACTIONS
from .policy import BLOCK_ACTION, BLOCK_MARGINAL, PolicyParams, forward, nll_terms, sgd_step, zero_grad


class BCPolicy(ClassifierMixin, BaseEstimator):
    """Linear-softmax behavior cloning.

    ``fit`` runs ``epochs`` passes of shuffled minibatch SGD, dropping the
    ragged final batch. The number of updates therefore grows with the data,
    which is what makes larger demo fractions train longer.
    """

    def __init__(self, epochs: int = 16, lr: float = 0.05, batch_size: int = 64,
                 random_state: int | None = 0, num_actions: int = NUM_ACTIONS):
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.random_state = random_state
        self.num_actions = num_actions

    def fit(self, X, y, indicator=None, value_weights=None, init: PolicyParams | None = None):
        X, y = check_X_y(X, y, dtype=np.float64)
        if self.epochs < 0 or not self.lr > 0 or self.batch_size < 1:
            raise ValueError("epochs >= 0, lr > 0 and batch_size >= 1 are required")
        y = y.astype(np.int64)
        if y.min() < 0 or y.max() >= self.num_actions:
            raise ValueError(f"labels must lie in [0, {self.num_actions})")
        if indicator is not None:
            indicator = np.asarray(indicator, dtype=np.float64)
            if indicator.shape != y.shape:
                raise ValueError("indicator must have one entry per sample")
        params = init if init is not None else PolicyParams.zeros(X.shape[1], self.num_actions)
        if params.feature_dim != X.shape[1]:
            raise ValueError("init params do not match the feature dimension")
        if value_weights is not None:
            params = params.replace(value_weights=value_weights)
        rng = np.random.default_rng(self.random_state)
        n, b = len(y), self.batch_size
        for _ in range(self.epochs):
            perm = rng.permutation(n)
            for start in range(0, n - b + 1, b):
                idx = perm[start:start + b]
                grad = zero_grad(params)
                _, grad[BLOCK_MARGINAL] = nll_terms(params, X[idx], y[idx])
                if indicator is not None:
                    _, grad[BLOCK_ACTION] = nll_terms(params, X[idx], y[idx], indicator[idx])
                params = sgd_step(params, grad, self.lr)
        self.params_ = params
        self.classes_ = np.arange(self.num_actions)
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X, indicator=None):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        return forward(self.params_, X, indicator)

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]


class LinearValue(RegressorMixin, BaseEstimator):
    """Least-squares linear value function with a ridge fallback."""

    def __init__(self, ridge: float = 1e-6):
        self.ridge = ridge

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        self.coef_ = solve_least_squares(X, y, self.ridge)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        return X @ self.coef_

    def as_params(self, params: PolicyParams) -> PolicyParams:
        check_is_fitted(self, "coef_")
        return params.replace(value_weights=self.coef_)

