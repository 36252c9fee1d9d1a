"""Synthetic main/external data and the coverage study harness.

Generation follows a fixed sequential chain

    Z1, Z2 ~ Bern(0.5) independently
    A | Z  ~ Bern(expit(-0.2 + 0.5 Z1 + 0.7 Z2))
    U | A  ~ Bern(expit(-0.4 + 1.5 dUA A))
    M | .  ~ Bern(expit(-1.5 + 0.3 Z1 + 0.2 Z2 + 0.7 A + beta_U U))
    Y | .  ~ Bern(expit(-2 + 0.3 Z1 + 0.2 Z2 + A + 0.8 M + dYAM A M + alpha_U U))

with beta_U = alpha_U = 1.5 for main data and for transportable external
data, and 0 for non-transportable external data.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import multiprocessing
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .corrections import all_corrections
from .errors import BDFError
from .estimands import bdf_cf_estimate, estimate_rnde, rnde_closed_form
from .mle import fit_external_models
from .model import CovariatePatternTable, Dataset, ModelSpec, ParamVector
from .posterior import SamplerConfig, sample_posterior
from .prior import build_prior

log = logging.getLogger(__name__)

METHODS = ("Naive", "DG", "IX", "BDF-SIM", "BDF-CF")


@dataclass(frozen=True)
class GenerativeCoefficients:
    """Coefficients of the generating chain; Z coefficients listed as (Z1, Z2)."""

    a: tuple = (-0.2, 0.5, 0.7)
    u: tuple = (-0.4, 1.5)
    m: tuple = (-1.5, 0.3, 0.2, 0.7)
    y: tuple = (-2.0, 0.3, 0.2, 1.0, 0.8)
    y_am: float = 1.0
    beta_u: float = 1.5
    alpha_u: float = 1.5
    p_z: float = 0.5

    def with_confounding(self, strength) -> "GenerativeCoefficients":
        return replace(self, beta_u=float(strength), alpha_u=float(strength))


@dataclass(frozen=True)
class DeltaFlags:
    ua: bool = True
    yam: bool = False


def model_spec(flags: DeltaFlags) -> ModelSpec:
    """Correctly specified analysis models for a generating scenario."""
    return ModelSpec(z_dim=2, include_am_interaction=flags.yam, u_exposure_induced=flags.ua)


def true_theta(coef: GenerativeCoefficients, flags: DeltaFlags) -> ParamVector:
    """Generating coefficients in the analysis-model layout of :func:`model_spec`."""
    g0, gA = coef.u
    theta_u = [g0] + ([gA] if flags.ua else []) + [0.0, 0.0]
    b0, bz1, bz2, bA = coef.m
    theta_m = [b0, bA, bz1, bz2, coef.beta_u]
    a0, az1, az2, aA, aM = coef.y
    theta_y = [a0, aA, az1, az2, aM] + ([coef.y_am] if flags.yam else []) + [coef.alpha_u]
    return ParamVector(np.array(theta_u, float), np.array(theta_m, float), np.array(theta_y, float))


def generate_dataset(n, coefficients: GenerativeCoefficients = GenerativeCoefficients(),
                     delta_flags: DeltaFlags = DeltaFlags(), seed=0, keep_u=True) -> Dataset:
    """Sample ``n`` rows from the generating chain; ``keep_u=False`` drops U (main data)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    c, f = coefficients, delta_flags
    rng = np.random.default_rng(seed)
    draw = lambda p: (rng.random(n) < p).astype(np.int64)
    ex = lambda x: 1.0 / (1.0 + np.exp(-x))
    z1 = draw(c.p_z)
    z2 = draw(c.p_z)
    a = draw(ex(c.a[0] + c.a[1] * z1 + c.a[2] * z2))
    u = draw(ex(c.u[0] + (c.u[1] if f.ua else 0.0) * a))
    m = draw(ex(c.m[0] + c.m[1] * z1 + c.m[2] * z2 + c.m[3] * a + c.beta_u * u))
    y = draw(ex(c.y[0] + c.y[1] * z1 + c.y[2] * z2 + c.y[3] * a + c.y[4] * m
                + (c.y_am if f.yam else 0.0) * a * m + c.alpha_u * u))
    return Dataset(np.column_stack([z1, z2]), a, y, m=m, u=u if keep_u else None)


def true_rnde(coefficients: GenerativeCoefficients = GenerativeCoefficients(),
              delta_flags: DeltaFlags = DeltaFlags()) -> float:
    """Population rNDE by enumeration over (z1, z2) with exact sums over u and m."""
    spec = model_spec(delta_flags)
    theta = true_theta(coefficients, delta_flags)
    p = coefficients.p_z
    total = 0.0
    for z1, z2 in itertools.product((0, 1), repeat=2):
        w = (p if z1 else 1 - p) * (p if z2 else 1 - p)
        total += w * rnde_closed_form(theta, (z1, z2), spec)
    return total


@dataclass(frozen=True)
class ScenarioConfig:
    """One cell of the simulation grid.

    ``n1`` is the main-data size and ``n2`` the external size (n1 // 10 by
    default). ``processes > 1`` runs replicates in a worker pool.
    """

    n1: int = 1000
    n2: int | None = None
    delta_ua: bool = True
    delta_yam: bool = False
    transportable: bool = True
    replicates: int = 200
    seed: int = 0
    chains: int = 3
    iters: int = 2000
    warmup: int = 1000
    leapfrog_steps: int = 32
    n_boot: int = 200
    inflate_sigma: float | None = None
    methods: tuple = METHODS
    processes: int = 1

    def __post_init__(self):
        if self.n2 is None:
            object.__setattr__(self, "n2", max(1, self.n1 // 10))
        if self.n1 < 1 or self.n2 < 1 or self.replicates < 1:
            raise ValueError("n1, n2 and replicates must all be >= 1")
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise ValueError(f"unknown methods {sorted(bad)}")
        object.__setattr__(self, "methods", tuple(self.methods))

    @property
    def flags(self) -> DeltaFlags:
        return DeltaFlags(self.delta_ua, self.delta_yam)

    @property
    def label(self) -> str:
        yn = lambda b: "Yes" if b else "No"
        return f"T={yn(self.transportable)},AM={yn(self.delta_yam)},UA={yn(self.delta_ua)},n1={self.n1},n2={self.n2}"

    def sampler(self, seed) -> SamplerConfig:
        return SamplerConfig(chains=self.chains, iters=self.iters, warmup=self.warmup, seed=seed,
                             leapfrog_steps=self.leapfrog_steps)


@dataclass
class ReplicateRecord:
    scenario: str
    replicate: int
    method: str
    point: float = float("nan")
    ci_low: float = float("nan")
    ci_high: float = float("nan")
    covered: bool | None = None
    error: str = ""
    max_rhat: float | None = None


@dataclass
class MethodSummary:
    scenario: str
    method: str
    truth: float
    n_ok: int
    n_failed: int
    mean_bias: float
    coverage: float
    mean_width: float


@dataclass
class StudyReport:
    summaries: list[MethodSummary]
    records: list[ReplicateRecord] = field(default_factory=list)
    truths: dict = field(default_factory=dict)

    def summary(self, scenario, method) -> MethodSummary:
        for s in self.summaries:
            if s.scenario == scenario and s.method == method:
                return s
        raise KeyError((scenario, method))

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["scenario", "method", "truth", "n_ok", "n_failed", "mean_bias", "coverage_pct", "mean_width"])
        for s in self.summaries:
            wr.writerow([s.scenario, s.method, repr(s.truth), s.n_ok, s.n_failed,
                         repr(s.mean_bias), repr(s.coverage), repr(s.mean_width)])
        return buf.getvalue()

    def records_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        names = list(ReplicateRecord.__dataclass_fields__)
        wr.writerow(names)
        for r in self.records:
            wr.writerow([repr(v) if isinstance(v, float) else ("" if v is None else v)
                         for v in (getattr(r, k) for k in names)])
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {"truths": self.truths, "summaries": [asdict(s) for s in self.summaries]}
        return json.dumps(doc, indent=2, sort_keys=True)

    def write(self, outdir, per_replicate=True) -> None:
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(self.to_csv())
        (out / "report.json").write_text(self.to_json())
        if per_replicate:
            (out / "replicates.csv").write_text(self.records_csv())


def replicate_seeds(master_seed, replicate):
    """Independent integer seeds for one replicate's data, sampler, estimands and bootstrap."""
    ss = np.random.SeedSequence([master_seed, replicate])
    return [int(s.generate_state(1)[0]) for s in ss.spawn(5)]


def scenario_data(cfg: ScenarioConfig, replicate: int):
    """(main without U, external with U) for one replicate."""
    s_main, s_ext, *_ = replicate_seeds(cfg.seed, replicate)
    coef = GenerativeCoefficients()
    ext_coef = coef if cfg.transportable else coef.with_confounding(0.0)
    main = generate_dataset(cfg.n1, coef, cfg.flags, s_main, keep_u=False)
    external = generate_dataset(cfg.n2, ext_coef, cfg.flags, s_ext, keep_u=True)
    return main, external


def run_replicate(cfg: ScenarioConfig, replicate: int, truth: float) -> list[ReplicateRecord]:
    """All requested methods on one simulated pair; failures are recorded, not raised."""
    _, _, s_mcmc, s_est, s_boot = replicate_seeds(cfg.seed, replicate)
    main, external = scenario_data(cfg, replicate)
    spec = model_spec(cfg.flags)
    label = cfg.label
    records = []

    def record(method, res=None, exc=None, rhat=None):
        r = ReplicateRecord(label, replicate, method, max_rhat=rhat)
        if exc is not None:
            r.error = f"{type(exc).__name__}: {exc}"
        else:
            r.point, r.ci_low, r.ci_high = res.point, res.ci_low, res.ci_high
            r.covered = bool(res.ci_low <= truth <= res.ci_high)
        records.append(r)

    if {"Naive", "DG", "IX"} & set(cfg.methods):
        try:
            corr = all_corrections(main, external, spec, cfg.n_boot, s_boot)
        except (BDFError, ArithmeticError, ValueError, RuntimeError) as exc:
            corr = {k: exc for k in ("NAIVE", "DG", "IX")}
        for method, key in (("Naive", "NAIVE"), ("DG", "DG"), ("IX", "IX")):
            if method in cfg.methods:
                res = corr[key]
                record(method, exc=res) if isinstance(res, Exception) else record(method, res)

    bdf = [m for m in ("BDF-SIM", "BDF-CF") if m in cfg.methods]
    if bdf:
        try:
            fits = fit_external_models(external, spec)
            prior = build_prior(fits, spec, sigma=cfg.inflate_sigma)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                draws = sample_posterior(main, spec, prior, cfg.sampler(s_mcmc))
        except (BDFError, ArithmeticError, ValueError) as exc:
            for m in bdf:
                record(m, exc=exc)
        else:
            rhat = draws.max_rhat()
            for m in bdf:
                try:
                    if m == "BDF-CF":
                        res = bdf_cf_estimate(draws, CovariatePatternTable.from_dataset(main), spec, s_est)
                    else:
                        res = estimate_rnde(draws, main, spec, seed=s_est, method="sim")
                    record(m, res, rhat=rhat)
                except (BDFError, ArithmeticError, ValueError) as exc:
                    record(m, exc=exc, rhat=rhat)
    return records


def _job(args):
    return run_replicate(*args)


def summarize(records, truths, scenarios) -> list[MethodSummary]:
    out = []
    for cfg in scenarios:
        for method in cfg.methods:
            rs = [r for r in records if r.scenario == cfg.label and r.method == method]
            ok = [r for r in rs if not r.error]
            truth = truths[cfg.label]
            if ok:
                pts = np.array([r.point for r in ok])
                widths = np.array([r.ci_high - r.ci_low for r in ok])
                cov = 100.0 * np.mean([r.covered for r in ok])
                out.append(MethodSummary(cfg.label, method, truth, len(ok), len(rs) - len(ok),
                                         float(np.mean(pts - truth)), float(cov), float(np.mean(widths))))
            else:
                nan = float("nan")
                out.append(MethodSummary(cfg.label, method, truth, 0, len(rs), nan, nan, nan))
    return out


def run_study(configs, progress=None) -> StudyReport:
    """Run every replicate of every scenario and aggregate per method.

    Replicate ``r`` of a scenario always draws from the substream
    (seed, r), so adding replicates never changes earlier ones and reruns
    reproduce the report bit-for-bit.
    """
    scenarios = [configs] if isinstance(configs, ScenarioConfig) else list(configs)
    truths = {cfg.label: true_rnde(GenerativeCoefficients(), cfg.flags) for cfg in scenarios}
    records = []
    for cfg in scenarios:
        jobs = [(cfg, r, truths[cfg.label]) for r in range(cfg.replicates)]
        if cfg.processes > 1:
            with multiprocessing.get_context("spawn").Pool(cfg.processes) as pool:
                results = pool.map(_job, jobs)
        else:
            results = []
            for j in jobs:
                results.append(_job(j))
                if progress:
                    progress(cfg, j[1], results[-1])
        for recs in results:
            records.extend(recs)
    return StudyReport(summarize(records, truths, scenarios), records, truths)
