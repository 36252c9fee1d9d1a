import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.optimize import minimize

from bdfusion.errors import SeparationError, SingularInformationError
from bdfusion.mle import compress_rows, fit_external_models, fit_logistic_mle, logistic_loglik
from bdfusion.model import ModelSpec
from bdfusion.simulation import generate_dataset


def test_intercept_only_half():
    y = np.array([0, 1] * 20)
    fit = fit_logistic_mle(np.ones((40, 1)), y)
    assert fit.converged
    assert fit.estimate[0] == pytest.approx(0.0, abs=1e-12)
    assert fit.loglik == pytest.approx(40 * np.log(0.5))


def test_saturated_two_by_two():
    # x=0: 30/70, x=1: 60/40
    x = np.r_[np.zeros(100), np.ones(100)]
    y = np.r_[np.ones(30), np.zeros(70), np.ones(60), np.zeros(40)]
    X = np.column_stack([np.ones(200), x])
    fit = fit_logistic_mle(X, y)
    assert fit.estimate[0] == pytest.approx(np.log(3 / 7), abs=1e-10)
    assert fit.estimate[1] == pytest.approx(np.log(3.5), abs=1e-10)
    # closed-form saturated variances: 1/(n p (1-p)) per cell
    v0 = 1 / (100 * 0.3 * 0.7)
    v1 = 1 / (100 * 0.6 * 0.4)
    assert fit.covariance[0, 0] == pytest.approx(v0, rel=1e-8)
    assert fit.covariance[1, 1] == pytest.approx(v0 + v1, rel=1e-8)
    assert fit.covariance[0, 1] == pytest.approx(-v0, rel=1e-8)


def test_weighted_equals_expanded():
    rng = np.random.default_rng(0)
    X = np.column_stack([np.ones(300), rng.integers(0, 2, (300, 2))])
    y = (rng.random(300) < 0.4).astype(float)
    full = fit_logistic_mle(X, y)
    Xc, yc, wc = compress_rows(X, y)
    comp = fit_logistic_mle(Xc, yc, wc)
    np.testing.assert_allclose(comp.estimate, full.estimate, atol=1e-10)
    np.testing.assert_allclose(comp.covariance, full.covariance, atol=1e-10)


def test_separation_and_rank():
    x = np.r_[np.zeros(20), np.ones(20)]
    X = np.column_stack([np.ones(40), x])
    with pytest.raises(SeparationError):
        fit_logistic_mle(X, x)
    with pytest.raises(SingularInformationError):
        fit_logistic_mle(np.column_stack([np.ones(40), x, x]), (np.arange(40) % 3 == 0).astype(float))


def test_against_generic_optimizer():
    rng = np.random.default_rng(3)
    X = np.column_stack([np.ones(500), rng.normal(size=(500, 3))])
    beta = np.array([-0.3, 0.8, -0.5, 0.2])
    y = (rng.random(500) < 1 / (1 + np.exp(-X @ beta))).astype(float)
    fit = fit_logistic_mle(X, y)
    ref = minimize(lambda b: -logistic_loglik(b, X, y), np.zeros(4), method="BFGS", options={"gtol": 1e-10})
    np.testing.assert_allclose(fit.estimate, ref.x, atol=1e-5)
    # numerical Hessian of the log-likelihood versus observed information
    h = 1e-5
    H = np.empty((4, 4))
    for i in range(4):
        for j in range(4):
            ei, ej = np.eye(4)[i] * h, np.eye(4)[j] * h
            f = lambda d: logistic_loglik(fit.estimate + d, X, y)
            H[i, j] = (f(ei + ej) - f(ei - ej) - f(-ei + ej) + f(-ei - ej)) / (4 * h * h)
    np.testing.assert_allclose(np.linalg.inv(-H), fit.covariance, rtol=1e-3)


@given(st.integers(0, 10_000))
def test_fit_invariants(seed):
    rng = np.random.default_rng(seed)
    n = 150
    X = np.column_stack([np.ones(n), rng.integers(0, 2, n), rng.normal(size=n)])
    y = (rng.random(n) < 0.5).astype(float)
    if y.min() == y.max():
        return
    fit = fit_logistic_mle(X, y)
    assert fit.converged
    p = 1 / (1 + np.exp(-X @ fit.estimate))
    assert p.mean() == pytest.approx(y.mean(), abs=1e-9)
    assert np.allclose(fit.covariance, fit.covariance.T, atol=1e-10)
    assert np.all(np.linalg.eigvalsh(fit.covariance) > 0)
    assert np.max(np.abs(X.T @ (y - p))) < 1e-8


def test_external_models_recover_beta_u():
    ext = generate_dataset(10_000, seed=5)
    spec = ModelSpec()
    fits = fit_external_models(ext, spec)
    b = fits["M"]
    assert abs(b.estimate[-1] - 1.5) < 3 * b.se[-1]
    assert len(fits["Y"].estimate) == len(spec.coef_names("Y"))
    assert "alpha_AM" not in fits["Y"].names


def test_external_constant_u_fails_with_role():
    ext = generate_dataset(300, seed=1)
    from bdfusion.model import Dataset
    bad = Dataset(ext.z, ext.a, ext.y, m=ext.m, u=np.zeros(ext.n))
    with pytest.raises((SeparationError, SingularInformationError), match="model"):
        fit_external_models(bad, ModelSpec())
