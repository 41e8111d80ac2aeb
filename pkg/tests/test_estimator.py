import math

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from rddpm import RiemannianDDPM, sphere
from rddpm.datasets import uniform_sphere


def small(**kw):
    base = dict(manifold=sphere(2), hidden=(8,), T=2.0, N=10, gamma_min=0.05, gamma_max=1.0, batch_size=16,
                epochs=2, nll_paths=3, random_state=3)
    base.update(kw)
    return RiemannianDDPM(**base)


class TestEstimator:
    def test_params_and_clone(self):
        est = small()
        params = est.get_params()
        assert params["N"] == 10 and params["hidden"] == (8,)
        twin = clone(est)
        assert twin.get_params()["epochs"] == 2 and twin is not est
        est.set_params(epochs=5)
        assert est.epochs == 5

    def test_fit_sample_score(self):
        rng = np.random.default_rng(0)
        X = uniform_sphere(2, rng, 64)
        est = small().fit(X, X_val=X[:8])
        assert len(est.metrics_) == 2
        s = est.sample(6)
        assert s.shape == (6, 2)
        np.testing.assert_allclose(np.linalg.norm(s, axis=1), 1.0, atol=1e-10)
        steps = est.sample(4, return_steps=[0, 10])
        assert steps.shape == (4, 2, 2)
        ll = est.score_samples(X[:5])
        assert ll.shape == (5,) and np.all(np.isfinite(ll))
        assert est.score(X[:5]) == pytest.approx(np.mean(ll))
        assert est.sample(0).shape == (0, 2)

    def test_untrained_likelihood_is_uniform(self):
        X = uniform_sphere(2, np.random.default_rng(0), 16)
        est = small(epochs=0).fit(X)
        np.testing.assert_allclose(est.score_samples(X), -math.log(2 * math.pi), atol=1e-10)

    def test_seeded_sampling(self):
        X = uniform_sphere(2, np.random.default_rng(0), 32)
        est = small().fit(X)
        np.testing.assert_array_equal(est.sample(5, random_state=1), est.sample(5, random_state=1))

    def test_validation(self):
        with pytest.raises(NotFittedError):
            small().sample(3)
        with pytest.raises(ValueError):
            small().fit(np.array([[2.0, 0.0]]))
        with pytest.raises(ValueError):
            small().fit(np.ones((3, 3)))
        with pytest.raises(ValueError):
            RiemannianDDPM().fit(np.ones((3, 2)))
