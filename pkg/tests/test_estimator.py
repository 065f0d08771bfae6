import numpy as np
import pytest
import scipy.sparse as sp
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from ract.data import synthesize
from ract.estimator import RaCTRecommender

FAST = dict(latent_dim=8, hidden_dim=32, stage1_epochs=3, stage2_epochs=1, stage3_epochs=1,
            anneal_epochs=2, batch_size=50, n_val_users=50)


@pytest.fixture(scope="module")
def fitted():
    m = synthesize(300, 60, 4, seed=3)[0]
    X = m.to_csr()
    return RaCTRecommender(**FAST).fit(X), X


def test_get_params_and_clone():
    est = RaCTRecommender(**FAST)
    params = est.get_params()
    assert params["latent_dim"] == 8 and params["random_state"] == 1
    twin = clone(est)
    assert twin.get_params() == params
    est.set_params(cutoff=50)
    assert est.cutoff == 50


def test_predict_shapes(fitted):
    est, X = fitted
    scores = est.predict(X[:10])
    assert scores.shape == (10, 60)
    np.testing.assert_allclose(scores.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_array_equal(scores, est.predict(X[:10].toarray()))
    assert est.transform(X[:4]).shape == (4, 8)
    assert len(est.history_) == 5


def test_score_is_mean_ndcg(fitted):
    est, X = fitted
    dense = X.toarray()
    rng = np.random.default_rng(0)
    observed = dense * (rng.random(dense.shape) < 0.8)
    value = est.score(observed, dense)
    assert 0.0 <= value <= 1.0


def test_validation_errors(fitted):
    est, _ = fitted
    with pytest.raises(ValueError):
        est.predict(np.ones((2, 59)))
    with pytest.raises(ValueError):
        est.predict(np.array([[np.nan] * 60]))
    with pytest.raises(NotFittedError):
        RaCTRecommender().predict(np.ones((1, 60)))
    with pytest.raises(ValueError):
        RaCTRecommender(n_val_users=10).fit(sp.csr_matrix(np.ones((5, 4))))


def test_fit_is_reproducible():
    X = synthesize(200, 30, 3, seed=4)[0].to_csr()
    a = RaCTRecommender(**FAST).fit(X).predict(X[:5])
    b = RaCTRecommender(**FAST).fit(X).predict(X[:5])
    np.testing.assert_array_equal(a, b)
