import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from bdfusion.errors import SamplerError
from bdfusion.model import Dataset, ModelSpec, ParamVector
from bdfusion.posterior import (MarginalTarget, PosteriorDraws, SamplerConfig, complete_data_loglik, effective_sample_size,
                                gelman_rubin,
                                grad_log_posterior, log_marginal_likelihood, log_posterior, sample_posterior,
                                sample_target)
from bdfusion.prior import GaussianPrior
from bdfusion.simulation import generate_dataset


def brute_force_loglik(theta: ParamVector, data: Dataset, spec: ModelSpec):
    """Per-row direct products summed over u, no log-sum-exp."""
    total = 0.0
    sig = lambda x: 1 / (1 + np.exp(-x))
    bern = lambda v, p: p if v == 1 else 1 - p
    for i in range(data.n):
        z, a, m, y = data.z[i], data.a[i], data.m[i], data.y[i]
        lik = 0.0
        for u in (0, 1):
            pu = sig(spec.design("U", [z], a)[0] @ theta.theta_u)
            pm = sig(spec.design("M", [z], a, u=u)[0] @ theta.theta_m)
            py = sig(spec.design("Y", [z], a, m=m, u=u)[0] @ theta.theta_y)
            lik += bern(u, pu) * bern(m, pm) * bern(y, py)
        total += np.log(lik)
    return total


def test_single_row_all_zero():
    spec = ModelSpec()
    d = Dataset(np.zeros((1, 2)), [0], [0], m=[0])
    assert log_marginal_likelihood(np.zeros(spec.dim), d, spec) == pytest.approx(np.log(0.25), abs=1e-14)


def test_brute_force_oracle(truth_theta, spec):
    d = generate_dataset(100, seed=3, keep_u=False)
    assert log_marginal_likelihood(truth_theta, d, spec) == pytest.approx(brute_force_loglik(truth_theta, d, spec),
                                                                          abs=1e-9)


@given(st.integers(0, 10_000))
def test_row_order_and_duplication(seed):
    spec = ModelSpec(include_am_interaction=True)
    rng = np.random.default_rng(seed)
    d = generate_dataset(80, seed=seed, keep_u=False)
    theta = rng.normal(size=spec.dim)
    ll = log_marginal_likelihood(theta, d, spec)
    perm = d.take(rng.permutation(d.n))
    assert log_marginal_likelihood(theta, perm, spec) == pytest.approx(ll, abs=1e-10)
    doubled = d.take(np.r_[np.arange(d.n), np.arange(d.n)])
    assert log_marginal_likelihood(theta, doubled, spec) == pytest.approx(2 * ll, rel=1e-13)


def test_clamped_u_matches_complete_data():
    spec = ModelSpec()
    full = generate_dataset(200, seed=4)
    ones = Dataset(full.z, full.a, full.y, m=full.m, u=np.ones(full.n))
    rng = np.random.default_rng(0)
    theta = spec.unflatten(rng.normal(size=spec.dim) * 0.5)
    clamp = ParamVector(np.array([30.0, 0.0, 0.0, 0.0]), theta.theta_m, theta.theta_y)
    assert log_marginal_likelihood(clamp, ones, spec) == pytest.approx(complete_data_loglik(clamp, ones, spec),
                                                                       abs=1e-9)
    # complete-data likelihood never exceeds the marginal (one term of a sum)
    assert complete_data_loglik(theta, full, spec) <= log_marginal_likelihood(theta, full.drop_u(), spec)


def test_nonfinite_theta_raises(small_main, spec):
    theta = np.zeros(spec.dim)
    theta[0] = np.nan
    with pytest.raises(ValueError):
        log_marginal_likelihood(theta, small_main, spec)


def _fd_grad(f, x, h=1e-5):
    return np.array([(f(x + h * e) - f(x - h * e)) / (2 * h) for e in np.eye(x.size)])


def test_gradient_zero_u_matches_complete_score(spec):
    d = generate_dataset(150, seed=9, keep_u=False)
    rng = np.random.default_rng(1)
    theta = rng.normal(size=spec.dim) * 0.5
    sl = spec.block_slices()
    theta[sl["M"].stop - 1] = 0.0
    theta[sl["Y"].stop - 1] = 0.0
    g = grad_log_posterior(theta, d, spec, None)
    # alpha block score without U: X'(y - p)
    al = theta[sl["Y"]]
    X = spec.design("Y", d.z, d.a, m=d.m, u=0)
    score = X.T @ (d.y - 1 / (1 + np.exp(-X @ al)))
    np.testing.assert_allclose(g[sl["Y"]][:-1], score[:-1], rtol=1e-12, atol=1e-10)


def test_gradient_vanishes_at_mode(small_main, spec):
    from scipy.optimize import minimize
    sizes = spec.block_sizes()
    prior = GaussianPrior.from_moments(spec, {r: np.zeros(k) for r, k in sizes.items()},
                                       {r: 4 * np.eye(k) for r, k in sizes.items()})
    t = MarginalTarget(small_main, spec, prior)
    res = minimize(lambda q: -t.logpost_and_grad(q)[0], np.zeros(spec.dim),
                   jac=lambda q: -t.logpost_and_grad(q)[1], method="BFGS", options={"gtol": 1e-9})
    # polish with a few Newton steps on a finite-difference Hessian
    q = res.x
    for _ in range(3):
        H = np.array([(t.logpost_and_grad(q + 1e-5 * e)[1] - t.logpost_and_grad(q - 1e-5 * e)[1]) / 2e-5
                      for e in np.eye(spec.dim)])
        q = q - np.linalg.solve(0.5 * (H + H.T), t.logpost_and_grad(q)[1])
    assert np.max(np.abs(t.logpost_and_grad(q)[1])) < 1e-6


def test_gelman_rubin_cases():
    rng = np.random.default_rng(0)
    x = rng.normal(size=4000)
    chains = np.stack([rng.permutation(x) for _ in range(4)])
    assert gelman_rubin(chains) == pytest.approx(1.0, abs=0.01)
    assert gelman_rubin(np.stack([np.zeros(10), np.ones(10)])) == np.inf
    with pytest.raises(ValueError):
        gelman_rubin(np.zeros((1, 10)))


def test_gelman_rubin_ar1():
    rng = np.random.default_rng(5)
    phi = 0.5
    chains = np.empty((4, 5000))
    for c in range(4):
        x = rng.normal() / np.sqrt(1 - phi**2)
        for t in range(5000):
            x = phi * x + rng.normal()
            chains[c, t] = x
    assert gelman_rubin(chains) < 1.02
    # AR(1) oracle: n (1 - phi) / (1 + phi)
    assert effective_sample_size(chains) == pytest.approx(20000 / 3, rel=0.1)


def test_effective_sample_size_iid_and_errors():
    x = np.random.default_rng(2).standard_normal((2, 4000))
    assert effective_sample_size(x) == pytest.approx(8000, rel=0.1)
    assert effective_sample_size(np.ones((2, 10))) == 20.0
    with pytest.raises(ValueError):
        effective_sample_size(np.zeros((2, 3)))


def _gauss_target(mu, cov):
    prec = np.linalg.inv(cov)

    def lp(q):
        d = q - mu
        g = -prec @ d
        return 0.5 * float(d @ g), g
    return lp


def test_sampler_gaussian_2d_and_energy():
    mu = np.array([1.0, -2.0])
    cov = np.array([[1.0, 0.6], [0.6, 2.0]])
    lp = _gauss_target(mu, cov)
    d = sample_target(lp, mu, np.sqrt(np.diag(cov)), SamplerConfig(chains=3, iters=2000, warmup=1000, seed=1))
    x = d.draws
    assert len(x) == 3000
    # 4 Monte Carlo standard errors; a flat 0.05 is about 2 MCSE for the wider coordinate
    mcse = np.array([x[:, j].std() / np.sqrt(effective_sample_size(x[:, j].reshape(3, -1))) for j in range(2)])
    assert np.all(np.abs(x.mean(0) - mu) < 4 * mcse)
    np.testing.assert_allclose(np.cov(x.T), cov, rtol=0.1, atol=0.05)
    q = np.einsum("bi,ij,bj->b", x - mu, np.linalg.inv(cov), x - mu)
    d_stat = stats.kstest(q, stats.chi2(2).cdf).statistic
    ess = effective_sample_size(q.reshape(3, -1))
    assert stats.kstwo(int(ess)).sf(d_stat) > 0.01


def test_sampler_determinism(small_main, spec):
    sizes = spec.block_sizes()
    prior = GaussianPrior.from_moments(spec, {r: np.zeros(k) for r, k in sizes.items()},
                                       {r: np.eye(k) for r, k in sizes.items()})
    cfg = SamplerConfig(chains=2, iters=60, warmup=30, seed=4, leapfrog_steps=8)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        a = sample_posterior(small_main, spec, prior, cfg)
        b = sample_posterior(small_main, spec, prior, cfg)
    np.testing.assert_array_equal(a.draws, b.draws)
    assert a.draws.shape == (60, spec.dim)
    assert a.rhat is not None and a.rhat.shape == (spec.dim,)
    one = sample_target(_gauss_target(np.zeros(2), np.eye(2)), np.zeros(2), np.ones(2),
                        SamplerConfig(chains=1, iters=20, warmup=10))
    assert one.rhat is None and one.max_rhat() is None


def test_sampler_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(iters=10, warmup=10)
    with pytest.raises(ValueError):
        SamplerConfig(iters=10, warmup=0)


def test_sampler_hard_error_on_nan_target():
    with pytest.raises(SamplerError):
        sample_target(lambda q: (np.nan, np.zeros(2)), np.zeros(2), np.ones(2), SamplerConfig(chains=1, iters=5, warmup=2))


def test_real_posterior_converges(spec):
    from bdfusion.mle import fit_external_models
    from bdfusion.prior import build_prior
    main = generate_dataset(1000, seed=21, keep_u=False)
    ext = generate_dataset(1000, seed=22)
    prior = build_prior(fit_external_models(ext, spec), spec)
    d = sample_posterior(main, spec, prior, SamplerConfig(chains=3, iters=600, warmup=300, seed=2))
    assert d.max_rhat() < 1.05
    assert np.all(np.isfinite(d.draws))


def test_draws_csv(tmp_path):
    d = PosteriorDraws.from_draws(np.arange(12.0).reshape(6, 2), names=("a", "b"), chains=2)
    d.to_csv(tmp_path / "d.csv")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0] == "chain,iter,a,b"
    assert len(lines) == 7
