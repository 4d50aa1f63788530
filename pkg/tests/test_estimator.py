import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from pmpreg import datagen, dynamics, solvers
from pmpreg.estimator import PMPReconstructor
from pmpreg.metrics import psnr
from pmpreg.regnet import RegularizerParams


@pytest.fixture(scope="module")
def toy():
    d = datagen.make_dataset(3, 2, 12, 12, datagen.make_operator("identity", 12, 12), 0.1, seed=4)
    X = np.stack([i.b[0] for i in d.train])
    y = np.stack([i.x_gt[0] for i in d.train])
    return d, X, y


def _small(**kw):
    base = dict(layers=3, channels=2, T=3, K=2, tau=0.2, eta=0.2)
    base.update(kw)
    return PMPReconstructor(**base)


def test_params_and_clone():
    est = _small(variant="basic")
    params = est.get_params()
    assert params["variant"] == "basic" and params["K"] == 2
    twin = clone(est)
    assert twin.get_params() == params
    est.set_params(eta=0.0)
    assert est.eta == 0.0


def test_fit_matches_functional_api(toy):
    d, X, y = toy
    est = _small().fit(X, y)
    theta0 = RegularizerParams.init(3, 2, seed=0, scale=1.0)
    cfg = solvers.SolverConfig(T=3, tau=0.2, eta=0.2, K=2, backtrack=4)
    theta, report = solvers.train(theta0, d.train, cfg)
    assert est.theta_.equal(theta)
    assert est.report_.objective == report.objective


def test_predict_and_score(toy):
    d, X, y = toy
    est = _small().fit(X, y)
    pred = est.predict(X)
    assert pred.shape == (3, 1, 12, 12)
    prob = dynamics.stack(d.train)
    ref = solvers.forward_euler(prob.x0, est.theta_, prob, est._solver()).x_T
    np.testing.assert_array_equal(pred, ref)
    expected = np.mean([psnr(p, t) for p, t in zip(pred, y[:, None])])
    assert est.score(X, y) == pytest.approx(expected, rel=1e-14)
    assert est.predict(X[:, None]).shape == pred.shape


def test_warm_start_continues(toy):
    _, X, y = toy
    est = _small(warm_start=True, K=1).fit(X, y)
    first = est.theta_
    est.fit(X, y)
    both = _small(K=2).fit(X, y)
    assert est.theta_.allclose(both.theta_, rtol=1e-12, atol=0)
    assert not est.theta_.equal(first)


def test_validation(toy):
    _, X, y = toy
    with pytest.raises(NotFittedError):
        _small().predict(X)
    with pytest.raises(ValueError):
        _small().fit(X, y[:2])
    with pytest.raises(ValueError):
        _small().fit(X.reshape(3, 144), y.reshape(3, 144))
    bad = X.copy()
    bad[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        _small().fit(bad, y)
