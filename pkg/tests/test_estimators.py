import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from fleetlearn.estimators import BCPolicy, LinearValue
from fleetlearn.policy import PolicyParams


def separable(n=400, d=6, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d))
    w = rng.normal(size=(5, d)) * 3
    return x, np.argmax(x @ w.T, axis=1)


def test_params_round_trip_through_clone():
    est = BCPolicy(epochs=3, lr=0.1, batch_size=16, random_state=4)
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    assert not hasattr(twin, "params_")


def test_fit_predict_shapes_and_score():
    x, y = separable()
    est = BCPolicy(epochs=40, lr=0.5, batch_size=32).fit(x, y)
    proba = est.predict_proba(x)
    assert proba.shape == (len(x), 5) and np.allclose(proba.sum(axis=1), 1)
    assert est.predict(x).shape == (len(x),)
    assert est.score(x, y) > 0.9
    assert est.n_features_in_ == 6 and est.classes_.tolist() == [0, 1, 2, 3, 4]


def test_fit_is_deterministic_for_a_seed():
    x, y = separable()
    a = BCPolicy(epochs=2, random_state=9).fit(x, y).params_
    b = BCPolicy(epochs=2, random_state=9).fit(x, y).params_
    c = BCPolicy(epochs=2, random_state=10).fit(x, y).params_
    assert a == b and a != c


def test_update_count_follows_data_size():
    x, y = separable(n=130)
    est = BCPolicy(epochs=3, batch_size=64).fit(x, y)
    assert est.params_.version == 3 * 2  # ragged final batch dropped
    assert BCPolicy(epochs=0).fit(x, y).params_ == PolicyParams.zeros(6)


def test_indicator_trains_conditioned_head():
    x, y = separable()
    ind = (y == 0).astype(float)
    est = BCPolicy(epochs=20, lr=0.5, batch_size=32).fit(x, y, indicator=ind)
    assert est.predict_proba(x, indicator=1)[:, 0].mean() > est.predict_proba(x)[:, 0].mean()
    untouched = BCPolicy(epochs=20, lr=0.5, batch_size=32).fit(x, y)
    assert not untouched.params_.action_weights.any()


def test_value_weights_and_init_are_used():
    x, y = separable()
    init = PolicyParams.zeros(6, version=100)
    est = BCPolicy(epochs=1, batch_size=400).fit(x, y, value_weights=np.arange(6.0), init=init)
    assert est.params_.version == 101 and est.params_.value_weights.tolist() == list(range(6))
    with pytest.raises(ValueError):
        BCPolicy().fit(x, y, init=PolicyParams.zeros(7))


def test_input_validation():
    x, y = separable()
    with pytest.raises(NotFittedError):
        BCPolicy().predict(x)
    with pytest.raises(ValueError):
        BCPolicy().fit(x, y + 5)
    with pytest.raises(ValueError):
        BCPolicy(lr=0).fit(x, y)
    with pytest.raises(ValueError):
        BCPolicy().fit(x, y, indicator=np.ones(3))
    with pytest.raises(ValueError):
        BCPolicy().fit(x[:10], y[:9])
    bad = x.copy()
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        BCPolicy().fit(bad, y)


def test_linear_value_recovers_exact_weights():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(200, 5))
    w = np.array([1.0, -2.0, 0.5, 0.0, 3.0])
    est = LinearValue().fit(x, x @ w)
    assert np.allclose(est.coef_, w, atol=1e-10)
    assert est.score(x, x @ w) == pytest.approx(1.0)
    p = est.as_params(PolicyParams.zeros(5))
    assert np.array_equal(p.value_weights, est.coef_)


def test_linear_value_not_fitted():
    with pytest.raises(NotFittedError):
        LinearValue().predict(np.zeros((1, 3)))
    assert clone(LinearValue(ridge=0.1)).ridge == 0.1
