"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary.
The two coverage studies are the expensive part (about 15-20 s of HMC per
replicate on one core); their reports are written to ``results/``.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from bdfusion import cli
from bdfusion.corrections import BiasModels, dg_correction, ix_correction, main_patterns, naive_rnde
from bdfusion.estimands import bdf_cf_estimate, estimate_nde, estimate_nie, estimate_rnde, estimate_total_effect
from bdfusion.mle import fit_external_models
from bdfusion.model import CovariatePatternTable, ModelSpec
from bdfusion.posterior import MarginalTarget, SamplerConfig, effective_sample_size, log_marginal_likelihood, sample_posterior, sample_target
from bdfusion.prior import build_prior
from bdfusion.simulation import (DeltaFlags, GenerativeCoefficients, ScenarioConfig, generate_dataset, model_spec,
                                 run_study)

from conftest import record_acceptance

RESULTS = Path(__file__).resolve().parent.parent / "results"
STUDY_SEED = 1
REPLICATES = 50
SMOKE_REPLICATES = 10


# ------------------------------------------------------------------ 1


def test_criterion_1_gradient():
    spec = ModelSpec(include_am_interaction=True)
    main = generate_dataset(200, delta_flags=DeltaFlags(True, True), seed=101, keep_u=False)
    ext = generate_dataset(500, delta_flags=DeltaFlags(True, True), seed=102)
    target = MarginalTarget(main, spec, build_prior(fit_external_models(ext, spec), spec))
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    worst = 0.0
    h = 1e-5
    for _ in range(20):
        theta = rng.normal(0, 1, spec.dim)
        g = target.logpost_and_grad(theta)[1]
        fd = np.array([(target.logpost_and_grad(theta + h * e)[0] - target.logpost_and_grad(theta - h * e)[0]) / (2 * h)
                       for e in np.eye(spec.dim)])
        worst = max(worst, float(np.max(np.abs(fd - g) / np.maximum(np.abs(g), 1.0))))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-5 and elapsed < 10
    record_acceptance(1, ok, f"max relative FD error {worst:.2e} (< 1e-5) in {elapsed:.2f}s (< 10s)")
    assert ok


# ------------------------------------------------------------------ 2


def test_criterion_2_marginalization_identity():
    spec = ModelSpec()
    d = generate_dataset(1000, seed=103, keep_u=False)
    rng = np.random.default_rng(1)
    theta = rng.normal(0, 1, spec.dim)
    sl = spec.block_slices()
    theta[sl["M"].stop - 1] = theta[sl["Y"].stop - 1] = 0.0
    t0 = time.perf_counter()
    marg = log_marginal_likelihood(theta, d, spec)
    elapsed = time.perf_counter() - t0
    # independent complete-data M + Y log-likelihood with the U terms dropped
    th = spec.unflatten(theta)
    pm = 1 / (1 + np.exp(-(spec.design("M", d.z, d.a, u=0) @ th.theta_m)))
    py = 1 / (1 + np.exp(-(spec.design("Y", d.z, d.a, m=d.m, u=0) @ th.theta_y)))
    ref = np.sum(d.m * np.log(pm) + (1 - d.m) * np.log(1 - pm) + d.y * np.log(py) + (1 - d.y) * np.log(1 - py))
    err = abs(marg - ref)
    ok = err < 1e-10 and elapsed < 1
    record_acceptance(2, ok, f"|marginal - complete M+Y| = {err:.1e} (< 1e-10) in {elapsed * 1e3:.1f}ms")
    assert ok


# ------------------------------------------------------------------ 3


def test_criterion_3_cf_vs_sim():
    flags = DeltaFlags(True, False)
    spec = model_spec(flags)
    t0 = time.perf_counter()
    main = generate_dataset(10_000, delta_flags=flags, seed=104, keep_u=False)
    ext = generate_dataset(1_000, delta_flags=flags, seed=105)
    prior = build_prior(fit_external_models(ext, spec), spec)
    draws = sample_posterior(main, spec, prior, SamplerConfig(seed=7))
    cf = bdf_cf_estimate(draws, CovariatePatternTable.from_dataset(main), spec, seed=3)
    sim = estimate_rnde(draws, main, spec, seed=3, method="sim")
    elapsed = time.perf_counter() - t0
    diff = abs(cf.point - sim.point)
    ok = len(draws) == 3000 and diff < 0.005 and elapsed < 300
    record_acceptance(3, ok, f"|CF - SIM| = {diff:.5f} (< 0.005), B={len(draws)}, {elapsed:.0f}s (< 300s)")
    assert ok


# ------------------------------------------------------------------ 4


def test_criterion_4_sampler_calibration():
    mu = np.array([0.5, -1.0, 2.0])
    sd = np.array([1.0, 0.5, 2.0])
    corr = np.array([[1.0, 0.5, -0.3], [0.5, 1.0, 0.2], [-0.3, 0.2, 1.0]])
    cov = corr * np.outer(sd, sd)
    prec = np.linalg.inv(cov)

    def logp(q):
        d = q - mu
        g = -prec @ d
        return 0.5 * float(d @ g), g

    t0 = time.perf_counter()
    out = sample_target(logp, mu, sd, SamplerConfig(chains=3, iters=2000, warmup=1000, seed=11))
    elapsed = time.perf_counter() - t0
    x = out.draws
    mean_err = float(np.max(np.abs(x.mean(0) - mu)))
    sd_err = float(np.max(np.abs(x.std(0, ddof=1) / sd - 1)))
    # 2 x potential energy above its minimum is chi-square with 3 degrees of freedom
    quad = np.einsum("bi,ij,bj->b", x - mu, prec, x - mu)
    # draws are autocorrelated, so the KS statistic is referred to its
    # null law at the effective sample size of the energy series
    ess = effective_sample_size(quad.reshape(3, -1))
    d_stat = stats.kstest(quad, stats.chi2(3).cdf).statistic
    p = float(stats.kstwo(int(round(ess))).sf(d_stat))
    ok = len(x) == 3000 and mean_err < 0.05 and sd_err < 0.10 and p > 0.01 and elapsed < 30
    record_acceptance(4, ok, f"mean err {mean_err:.3f} (< 0.05), sd rel err {sd_err:.3f} (< 0.10), "
                             f"energy KS p={p:.3f} (> 0.01, ESS {ess:.0f}), {elapsed:.1f}s")
    assert ok


# --------------------------------------------------------------- 5, 6, 7


class _Timer:
    def __init__(self, smoke):
        self.t0 = time.perf_counter()
        self.smoke = smoke
        self.smoke_elapsed = None

    def __call__(self, cfg, replicate, records):
        if replicate == self.smoke - 1:
            self.smoke_elapsed = time.perf_counter() - self.t0


def _study(transportable):
    cfg = ScenarioConfig(n1=10_000, n2=1_000, delta_ua=True, delta_yam=False, transportable=transportable,
                         replicates=REPLICATES, seed=STUDY_SEED)
    timer = _Timer(SMOKE_REPLICATES)
    report = run_study(cfg, progress=timer)
    elapsed = time.perf_counter() - timer.t0
    name = "study_transportable" if transportable else "study_non_transportable"
    report.write(RESULTS / name)
    return cfg, report, elapsed, timer.smoke_elapsed


@pytest.fixture(scope="module")
def transportable_study():
    return _study(True)


@pytest.fixture(scope="module")
def nontransportable_study():
    return _study(False)


def _coverage(report, cfg, method, first=None):
    recs = [r for r in report.records if r.method == method and not r.error]
    if first is not None:
        recs = [r for r in recs if r.replicate < first]
    return 100.0 * np.mean([r.covered for r in recs]) if recs else float("nan")


@pytest.mark.slow
def test_criterion_5_coverage(transportable_study):
    cfg, report, elapsed, smoke = transportable_study
    cf = report.summary(cfg.label, "BDF-CF")
    naive = report.summary(cfg.label, "Naive")
    smoke_cov = _coverage(report, cfg, "BDF-CF", SMOKE_REPLICATES)
    record_acceptance("5-smoke", smoke < 45 * 60,
                      f"first {SMOKE_REPLICATES} replicates in {smoke / 60:.1f} min (< 45), "
                      f"BDF-CF coverage {smoke_cov:.0f}% (logged only)")
    ok = 86 <= cf.coverage <= 100 and naive.coverage <= 14 and elapsed < 4 * 3600 and cf.n_failed == 0
    record_acceptance(5, ok, f"BDF-CF coverage {cf.coverage:.1f}% (in [86, 100]), naive {naive.coverage:.1f}% "
                             f"(<= 14), {cf.n_ok}/{REPLICATES} replicates ok, {elapsed / 60:.1f} min")
    assert smoke < 45 * 60
    assert ok


@pytest.mark.slow
def test_criterion_6_width(transportable_study):
    cfg, report, _, _ = transportable_study
    w = report.summary(cfg.label, "BDF-CF").mean_width
    ok = abs(w - 0.042) <= 0.008
    record_acceptance(6, ok, f"BDF-CF mean width {w:.4f} (0.042 +- 0.008)")
    assert ok


@pytest.mark.slow
def test_criterion_7_non_transportable(nontransportable_study):
    cfg, report, elapsed, _ = nontransportable_study
    sim = report.summary(cfg.label, "BDF-SIM").coverage
    cf = report.summary(cfg.label, "BDF-CF").coverage
    dg = report.summary(cfg.label, "DG").coverage
    ok = sim <= 10 and cf <= 10 and dg <= 25
    record_acceptance(7, ok, f"BDF-SIM {sim:.1f}%, BDF-CF {cf:.1f}% (<= 10), DG {dg:.1f}% (<= 25), "
                             f"{elapsed / 60:.1f} min")
    assert ok


# ------------------------------------------------------------------ 8


def test_criterion_8_correction_identities():
    spec = ModelSpec(u_exposure_induced=False)
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        main = generate_dataset(300, seed=200 + seed, keep_u=False)
        y = rng.normal(size=len(spec.coef_names("Y")))
        y[-1] = 0.0
        m_az = rng.normal(size=4)
        models = BiasModels.from_coefficients(spec, y_u=y, u_amz=rng.normal(size=5), m_az=m_az,
                                              m_azu=np.r_[m_az, 0.0], u_z=rng.normal(size=3))
        idx = [np.arange(main.n)]
        naive = naive_rnde(main, spec, resamples=idx).point
        for fn in (dg_correction, ix_correction):
            worst = max(worst, abs(fn(main, None, spec, models=models, resamples=idx).point - naive))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and elapsed < 1
    record_acceptance(8, ok, f"max |corrected - naive| = {worst:.1e} (<= 1e-12) over 10 cases in {elapsed:.2f}s")
    assert ok


# ------------------------------------------------------------------ 9


def test_criterion_9_decomposition():
    flags = DeltaFlags(ua=False, yam=True)
    spec = model_spec(flags)
    t0 = time.perf_counter()
    main = generate_dataset(1000, delta_flags=flags, seed=106, keep_u=False)
    ext = generate_dataset(1000, delta_flags=flags, seed=107)
    prior = build_prior(fit_external_models(ext, spec), spec)
    draws = sample_posterior(main, spec, prior, SamplerConfig(chains=2, iters=1000, warmup=500, seed=5))
    nde = estimate_nde(draws, main, spec, seed=9)
    nie = estimate_nie(draws, main, spec, seed=9)
    te = estimate_total_effect(draws, main, spec, seed=9)
    elapsed = time.perf_counter() - t0
    worst = float(np.max(np.abs(nde.draws + nie.draws - te.draws)))
    ok = len(draws) == 1000 and worst < 0.01 and elapsed < 300
    record_acceptance(9, ok, f"max per-draw |NDE + NIE - TE| = {worst:.1e} (< 0.01), B={len(draws)}, {elapsed:.0f}s")
    assert ok


# ------------------------------------------------------------------ 10


def test_criterion_10_determinism(tmp_path):
    cfg = tmp_path / "study.yaml"
    cfg.write_text("seed: 4\nreplicates: 2\nchains: 2\niters: 150\nwarmup: 75\nn-boot: 30\n"
                   "scenarios:\n  - {n1: 400, n2: 200}\n  - {n1: 400, n2: 200, transportable: false}\n")
    assert cli.main(["study", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["study", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "report.csv").read_bytes()
    b = (tmp_path / "b" / "report.csv").read_bytes()
    ok = a == b and len(a) > 0
    record_acceptance(10, ok, f"report.csv byte-identical across reruns ({len(a)} bytes)")
    assert ok
