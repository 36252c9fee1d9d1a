"""Population causal contrasts from posterior draws.

Two routes turn each posterior draw theta^(b) into a population contrast:

* closed form (``method="cf"``): exact per-pattern g-formula sums over the
  binary U and M, averaged with Bayesian-bootstrap weights
  d^(b) ~ Dirichlet(xi_1, ..., xi_K) over the K covariate patterns;
* simulation (``method="sim"``): for each main-data row, draw the latent U
  and counterfactual mediators, plug them into the closed-form outcome mean,
  and average over the rows.

A randomised mediator ``H_z(a0)`` is a draw from the law of M given Z under
exposure a0, i.e. it is generated with its own U draw, independent of the U
that enters the outcome model.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import IdentificationError
from .model import CovariatePatternTable, Dataset, ModelSpec, ParamVector, Regime
from .posterior import PosteriorDraws

KINDS = ("rNDE", "rNIE", "NDE", "NIE", "TE", "CDE", "ACE_TVC", "CONTRAST")
_NATURAL_KEY = 7
_DIRICHLET_KEY = 11


@dataclass(eq=False)
class EstimandResult:
    kind: str
    method: str
    point: float
    ci_low: float
    ci_high: float
    draws: np.ndarray = field(repr=False)
    levels: tuple = ()

    @classmethod
    def summarize(cls, kind, method, values, levels=()):
        values = np.asarray(values, dtype=float)
        lo, hi = np.quantile(values, [0.025, 0.975])
        return cls(kind, method, float(values.mean()), float(lo), float(hi), values, tuple(levels))

    @property
    def width(self) -> float:
        return self.ci_high - self.ci_low

    def covers(self, truth) -> bool:
        return self.ci_low <= truth <= self.ci_high

    def to_dict(self, include_draws=False) -> dict:
        out = {
            "kind": self.kind,
            "method": self.method.upper(),
            "levels": list(self.levels),
            "point": self.point,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "n_draws": int(self.draws.size),
        }
        if include_draws:
            out["draws"] = self.draws.tolist()
        return out

    def to_json(self, path, include_draws=False) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(include_draws), fh, indent=2)

    def to_csv(self, path, include_draws=False) -> None:
        """One summary row; with ``include_draws`` one row per draw instead."""
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            if include_draws:
                wr.writerow(["kind", "method", "draw", "value"])
                for b, v in enumerate(self.draws):
                    wr.writerow([self.kind, self.method.upper(), b, repr(float(v))])
            else:
                wr.writerow(["kind", "method", "point", "ci_low", "ci_high", "n_draws"])
                wr.writerow([self.kind, self.method.upper(), repr(self.point), repr(self.ci_low),
                             repr(self.ci_high), self.draws.size])


def dirichlet_sample(alpha, rng, size=None) -> np.ndarray:
    """Dirichlet draw(s) by normalising independent Gamma(alpha_k, 1) variates."""
    alpha = np.asarray(alpha, dtype=float)
    if alpha.ndim != 1 or alpha.size == 0 or np.any(~(alpha > 0)):
        raise ValueError("Dirichlet concentration must be a non-empty vector of positive values")
    shape = alpha.shape if size is None else (size,) + alpha.shape
    g = rng.standard_gamma(np.broadcast_to(alpha, shape))
    return g / g.sum(axis=-1, keepdims=True)


def _theta_matrix(draws) -> np.ndarray:
    if isinstance(draws, PosteriorDraws):
        return draws.draws
    if isinstance(draws, ParamVector):
        return draws.flatten()[None, :]
    return np.atleast_2d(np.asarray(draws, dtype=float))


class _Tables:
    """Conditional probabilities for B parameter draws at K covariate patterns.

    Every accessor returns a (B, K) array.
    """

    def __init__(self, thetas, patterns, spec: ModelSpec):
        self.spec = spec
        self.z = np.asarray(patterns, dtype=float).reshape(-1, spec.z_dim)
        sl = spec.block_slices()
        self.g, self.b, self.al = thetas[:, sl["U"]], thetas[:, sl["M"]], thetas[:, sl["Y"]]
        self._cache = {}

    def _lin(self, key, role, coef, **kw):
        if key not in self._cache:
            x = self.spec.design(role, self.z, **kw)
            self._cache[key] = expit(coef @ x.T)
        return self._cache[key]

    def pu(self, a):
        """P(U=1 | a, z)."""
        return self._lin(("U", a), "U", self.g, a=a)

    def pm(self, a, u):
        """P(M=1 | a, u, z)."""
        return self._lin(("M", a, u), "M", self.b, a=a, u=u)

    def mu(self, a, m, u):
        """E[Y | a, m, u, z]."""
        return self._lin(("Y", a, m, u), "Y", self.al, a=a, m=m, u=u)

    @staticmethod
    def _bern(p, x):
        return p if x == 1 else 1.0 - p

    def p_u(self, a, u):
        return self._bern(self.pu(a), u)

    def p_m(self, a, u, m):
        return self._bern(self.pm(a, u), m)

    def mediator_law(self, a0, m):
        """P(M=m | a0, z) with U summed out."""
        return sum(self.p_m(a0, u, m) * self.p_u(a0, u) for u in (0, 1))

    def y_given_am(self, a, m):
        """sum_u E[Y | a, m, u, z] P(u | a, z)."""
        return sum(self.mu(a, m, u) * self.p_u(a, u) for u in (0, 1))

    def regime_mean(self, g: Regime):
        if g.kind in ("set_A_and_M", "set_A1_A2"):
            a, m = g.levels
            return self.y_given_am(a, m)
        a = g.levels[0]
        if g.kind == "set_A":
            return sum(self.p_u(a, u) * self.p_m(a, u, m) * self.mu(a, m, u) for u in (0, 1) for m in (0, 1))
        return sum(self.mediator_law(g.mediator_law, m) * self.y_given_am(a, m) for m in (0, 1))

    def natural(self, kind, a, a_star):
        pu = lambda u: self.p_u(0, u)
        if kind == "NDE":
            terms = (pu(u) * self.p_m(a_star, u, m) * (self.mu(a, m, u) - self.mu(a_star, m, u))
                     for u in (0, 1) for m in (0, 1))
        elif kind == "NIE":
            terms = (pu(u) * self.mu(a, m, u) * (self.p_m(a, u, m) - self.p_m(a_star, u, m))
                     for u in (0, 1) for m in (0, 1))
        else:
            terms = (pu(u) * (self.mu(a, m, u) * self.p_m(a, u, m) - self.mu(a_star, m, u) * self.p_m(a_star, u, m))
                     for u in (0, 1) for m in (0, 1))
        return sum(terms)


def _regime_pair(kind, levels):
    """(g, g') for the estimands expressible as independent regimes."""
    if kind == "rNDE":
        a, a_star = levels
        return Regime.randomized_m(a, a_star), Regime.randomized_m(a_star, a_star)
    if kind == "rNIE":
        a, a_star = levels
        return Regime.randomized_m(a, a), Regime.randomized_m(a, a_star)
    if kind == "CDE":
        a, a_star, m = levels
        return Regime.set_a_and_m(a, m), Regime.set_a_and_m(a_star, m)
    if kind == "ACE_TVC":
        a1, a2, a1p, a2p = levels
        return Regime.set_a1_a2(a1, a2), Regime.set_a1_a2(a1p, a2p)
    raise ValueError(f"{kind} is not a regime-pair estimand")


def check_identification(kind, spec: ModelSpec):
    if kind in ("NDE", "NIE", "TE") and spec.u_exposure_induced:
        raise IdentificationError(
            f"{kind} requires U not to be exposure-induced (u_exposure_induced must be false); "
            "an exposure-induced mediator-outcome confounder is a recanting witness"
        )
    if kind == "ACE_TVC" and spec.structure != "tvc":
        raise IdentificationError("ACE_TVC requires the time-varying structure (structure='tvc')")
    if kind in ("rNDE", "rNIE", "NDE", "NIE", "TE") and spec.structure != "mediation":
        raise IdentificationError(f"{kind} requires the mediation structure")


def pattern_contrasts(draws, patterns, spec: ModelSpec, kind="rNDE", levels=(1, 0)) -> np.ndarray:
    """Closed-form contrast for each draw and covariate pattern, shape (B, K)."""
    check_identification(kind, spec)
    pats = patterns.patterns if isinstance(patterns, CovariatePatternTable) else patterns
    t = _Tables(_theta_matrix(draws), pats, spec)
    if kind in ("NDE", "NIE", "TE"):
        a, a_star = levels
        return t.natural(kind, a, a_star)
    g, gp = _regime_pair(kind, levels)
    return t.regime_mean(g) - t.regime_mean(gp)


def rnde_closed_form(theta: ParamVector, z, spec: ModelSpec, a=1, a_star=0) -> float:
    """rNDE at covariate value ``z``: exact sum over the binary U and M."""
    return float(pattern_contrasts(theta, np.atleast_2d(z), spec, "rNDE", (a, a_star))[0, 0])


def _cf_population(phi, patterns: CovariatePatternTable, seed):
    rng = np.random.default_rng(np.random.SeedSequence([seed, _DIRICHLET_KEY]))
    d = dirichlet_sample(patterns.xi, rng, size=phi.shape[0])
    return np.einsum("bk,bk->b", d, phi)


def bdf_cf_estimate(draws, patterns: CovariatePatternTable, spec: ModelSpec, seed=0,
                    kind="rNDE", levels=(1, 0)) -> EstimandResult:
    """Closed-form estimate with Bayesian-bootstrap marginalisation over Z.

    For each draw b, d^(b) ~ Dirichlet(xi) and the population value is
    sum_k d_k^(b) * phi_k^(b).
    """
    phi = pattern_contrasts(draws, patterns, spec, kind, levels)
    return EstimandResult.summarize(kind, "CF", _cf_population(phi, patterns, seed), levels)


def _draw_rng(seed, b, key):
    return np.random.default_rng(np.random.SeedSequence([seed, b, key]))


def _simulate_regime(t: _Tables, b, idx, g: Regime, rng):
    """Per-unit outcome means under regime ``g`` for draw ``b``."""
    n = idx.size

    def bern(p):
        return (rng.random(n) < p[b][idx]).astype(np.int8)

    def y_mean(a, m, u):
        tab = np.stack([np.stack([t.mu(a, mm, uu)[b] for uu in (0, 1)], -1) for mm in (0, 1)], 1)
        return tab[idx, m, u]

    if g.kind in ("set_A_and_M", "set_A1_A2"):
        a, m = g.levels
        u = bern(t.pu(a))
        return y_mean(a, np.full(n, m), u)
    a = g.levels[0]
    if g.kind == "set_A":
        u = bern(t.pu(a))
        pm = np.where(u == 1, t.pm(a, 1)[b][idx], t.pm(a, 0)[b][idx])
        m = (rng.random(n) < pm).astype(np.int8)
        return y_mean(a, m, u)
    a0 = g.mediator_law
    u_med = bern(t.pu(a0))
    pm = np.where(u_med == 1, t.pm(a0, 1)[b][idx], t.pm(a0, 0)[b][idx])
    m = (rng.random(n) < pm).astype(np.int8)
    u = bern(t.pu(a))
    return y_mean(a, m, u)


def _sim_setup(draws, main: Dataset, spec):
    pt = CovariatePatternTable.from_dataset(main)
    return _Tables(_theta_matrix(draws), pt.patterns, spec), pt.index


def bdf_sim_estimate(draws, main: Dataset, spec: ModelSpec, regime_pair, seed=0,
                     kind="CONTRAST", levels=()) -> EstimandResult:
    """Simulation-based estimate of E[Y^g - Y^g'] over a full pass of the main rows.

    Each regime's random numbers come from a stream keyed on (seed, draw,
    regime), so swapping g and g' negates every draw exactly and estimands
    sharing a regime are paired.
    """
    g, gp = regime_pair
    for r in (g, gp):
        if not isinstance(r, Regime):
            raise ValueError(f"unsupported regime {r!r}")
    t, idx = _sim_setup(draws, main, spec)
    B = t.g.shape[0]
    out = np.empty(B)
    for b in range(B):
        yg = _simulate_regime(t, b, idx, g, _draw_rng(seed, b, g.key()))
        ygp = _simulate_regime(t, b, idx, gp, _draw_rng(seed, b, gp.key()))
        out[b] = np.mean(yg - ygp)
    return EstimandResult.summarize(kind, "SIM", out, levels)


def _natural_sim(draws, main, spec, kind, a, a_star, seed, crn):
    t, idx = _sim_setup(draws, main, spec)
    B, n = t.g.shape[0], idx.size
    out = np.empty(B)
    for b in range(B):
        rng = _draw_rng(seed, b, _NATURAL_KEY)
        u = (rng.random(n) < t.pu(0)[b][idx]).astype(np.int8)
        v_star = rng.random(n)
        v = v_star if crn else rng.random(n)

        def med(a0, v_):
            pm = np.where(u == 1, t.pm(a0, 1)[b][idx], t.pm(a0, 0)[b][idx])
            return (v_ < pm).astype(np.int8)

        def mu(a0, m):
            return np.where(u == 1, np.where(m == 1, t.mu(a0, 1, 1)[b][idx], t.mu(a0, 0, 1)[b][idx]),
                            np.where(m == 1, t.mu(a0, 1, 0)[b][idx], t.mu(a0, 0, 0)[b][idx]))

        m_star = med(a_star, v_star)
        m_a = med(a, v)
        if kind == "NDE":
            phi = mu(a, m_star) - mu(a_star, m_star)
        elif kind == "NIE":
            phi = mu(a, m_a) - mu(a, m_star)
        else:
            phi = mu(a, m_a) - mu(a_star, m_star)
        out[b] = phi.mean()
    return out


def _estimate(kind, draws, main, spec, levels, seed, method):
    check_identification(kind, spec)
    method = method.lower()
    if method == "cf":
        return bdf_cf_estimate(draws, CovariatePatternTable.from_dataset(main), spec, seed, kind, levels)
    if method != "sim":
        raise ValueError(f"unknown method {method!r}")
    return bdf_sim_estimate(draws, main, spec, _regime_pair(kind, levels), seed, kind, levels)


def estimate_rnde(draws, main, spec, levels=(1, 0), seed=0, method="cf"):
    return _estimate("rNDE", draws, main, spec, levels, seed, method)


def estimate_rnie(draws, main, spec, levels=(1, 0), seed=0, method="sim"):
    """Randomised interventional indirect effect: H_z(a) versus H_z(a*) with A held at a."""
    return _estimate("rNIE", draws, main, spec, levels, seed, method)


def estimate_cde(draws, main, spec, levels=(1, 0, 0), seed=0, method="sim"):
    """Controlled direct effect, ``levels = (a, a*, m)``.

    With an exposure-induced U this is the time-varying ACE with M in the
    second-exposure slot, so U is drawn under each regime's exposure.
    """
    return _estimate("CDE", draws, main, spec, levels, seed, method)


def estimate_ace_tvc(draws, main, spec, levels=(1, 1, 0, 0), seed=0, method="sim"):
    """ACE of (A1, A2) = (a1, a2) versus (a1', a2'); ``levels = (a1, a2, a1', a2')``."""
    return _estimate("ACE_TVC", draws, main, spec, levels, seed, method)


def _natural(kind, draws, main, spec, levels, seed, method, crn):
    check_identification(kind, spec)
    a, a_star = levels
    if method.lower() == "cf":
        return bdf_cf_estimate(draws, CovariatePatternTable.from_dataset(main), spec, seed, kind, levels)
    if method.lower() != "sim":
        raise ValueError(f"unknown method {method!r}")
    return EstimandResult.summarize(kind, "SIM", _natural_sim(draws, main, spec, kind, a, a_star, seed, crn), levels)


def estimate_nde(draws, main, spec, levels=(1, 0), seed=0, method="sim", crn=False):
    """Natural direct effect E[Y^{a M^{a*}} - Y^{a* M^{a*}}]; U must not be exposure-induced."""
    return _natural("NDE", draws, main, spec, levels, seed, method, crn)


def estimate_nie(draws, main, spec, levels=(1, 0), seed=0, method="sim", crn=False):
    """Natural indirect effect E[Y^{a M^a} - Y^{a M^{a*}}].

    ``crn=True`` drives M^a and M^{a*} with a common uniform draw.
    """
    return _natural("NIE", draws, main, spec, levels, seed, method, crn)


def estimate_total_effect(draws, main, spec, levels=(1, 0), seed=0, method="sim", crn=False):
    """Total effect E[Y^{a M^a} - Y^{a* M^{a*}}] on the same random streams as NDE/NIE."""
    return _natural("TE", draws, main, spec, levels, seed, method, crn)


ESTIMATORS = {
    "rNDE": estimate_rnde,
    "rNIE": estimate_rnie,
    "NDE": estimate_nde,
    "NIE": estimate_nie,
    "TE": estimate_total_effect,
    "CDE": estimate_cde,
    "ACE_TVC": estimate_ace_tvc,
}
