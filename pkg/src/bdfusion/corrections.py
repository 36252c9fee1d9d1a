"""Frequentist comparators: the naive g-formula and two external-data bias corrections.

All three standardise a per-pattern quantity over the empirical covariate
distribution of the main data. The uncorrected residual effect is

    rNDE_uc(z) = sum_m P(M=m | a=0, z) [E(Y | 1, m, z) - E(Y | 0, m, z)]

from logistic fits that ignore U. The delta-gamma (DG) and interaction (IX)
corrections subtract a bias term B(z) built from models fit on the external
data. Those external fits are held fixed inside the bootstrap, which
resamples the main data only.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit

from .errors import CellSparsityError, StructuralError
from .mle import compress_rows, fit_logistic_mle
from .model import Dataset, ModelSpec

log = logging.getLogger(__name__)

MIN_CELL = 5
METHODS = ("NAIVE", "DG", "IX")


@dataclass(frozen=True, eq=False)
class CorrectionResult:
    method: str
    point: float
    ci_low: float
    ci_high: float
    n_boot: int
    boot: np.ndarray = field(repr=False, default_factory=lambda: np.empty(0))
    n_boot_failed: int = 0

    @property
    def width(self) -> float:
        return self.ci_high - self.ci_low

    def covers(self, truth) -> bool:
        return self.ci_low <= truth <= self.ci_high

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "point": self.point,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "n_boot": self.n_boot,
            "n_boot_failed": self.n_boot_failed,
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


# ---------------------------------------------------------------- naive fit


def _naive_design(role, z, a, m, spec: ModelSpec):
    z = np.atleast_2d(np.asarray(z, dtype=float))
    n = z.shape[0]
    a = np.broadcast_to(np.asarray(a, dtype=float), (n,))
    cols = [np.ones(n), a] + list(z.T)
    if role == "Y":
        m = np.broadcast_to(np.asarray(m, dtype=float), (n,))
        cols.append(m)
        if spec.include_am_interaction:
            cols.append(a * m)
    return np.column_stack(cols)


class _NaiveRows:
    """Main data collapsed to distinct (z, a, m, y) rows for cheap weighted refits."""

    def __init__(self, main: Dataset, spec: ModelSpec):
        if spec.structure != "mediation":
            raise StructuralError("corrections are defined for the mediation structure only")
        if main.m is None:
            raise StructuralError("main dataset lacks the m column")
        self.spec = spec
        rows = np.column_stack([main.z, main.a, main.m, main.y])
        self.rows, self.index = np.unique(rows, axis=0, return_inverse=True)
        self.index = self.index.reshape(-1)
        self.n = main.n
        p = main.z_dim
        self.z, self.a, self.m, self.y = self.rows[:, :p], self.rows[:, p], self.rows[:, p + 1], self.rows[:, p + 2]
        self.patterns, zinv = np.unique(self.z, axis=0, return_inverse=True)
        self.z_of_row = zinv.reshape(-1)
        self.Xm = _naive_design("M", self.z, self.a, None, spec)
        self.Xy = _naive_design("Y", self.z, self.a, self.m, spec)

    def counts(self, row_idx=None):
        if row_idx is None:
            return np.bincount(self.index, minlength=len(self.rows)).astype(float)
        return np.bincount(self.index[row_idx], minlength=len(self.rows)).astype(float)

    def pattern_weights(self, w):
        pz = np.bincount(self.z_of_row, weights=w, minlength=len(self.patterns))
        return pz / pz.sum()

    def rnde_uc(self, w):
        """Per-pattern uncorrected rNDE from weighted naive fits."""
        spec, pats = self.spec, self.patterns
        active = w > 0
        bm = _fit_or_constant(self.Xm[active], self.m[active], w[active])
        by = _fit_or_constant(self.Xy[active], self.y[active], w[active])
        pm1 = _predict(bm, _naive_design("M", pats, 0, None, spec))
        out = np.zeros(len(pats))
        for m, pm in ((0, 1.0 - pm1), (1, pm1)):
            mu1 = _predict(by, _naive_design("Y", pats, 1, m, spec))
            mu0 = _predict(by, _naive_design("Y", pats, 0, m, spec))
            out += pm * (mu1 - mu0)
        return out


def _fit_or_constant(X, y, w):
    """Logistic MLE on weighted distinct rows, or the constant mean when y does not vary."""
    if np.all(y == y[0]):
        return ("const", float(y[0]))
    return ("logit", fit_logistic_mle(X, y, w).estimate)


def _predict(fit, X):
    kind, v = fit
    return np.full(X.shape[0], v) if kind == "const" else expit(X @ v)


# -------------------------------------------------------------- bias models


def _z_key(z):
    return tuple(int(v) for v in z)


@dataclass(frozen=True, eq=False)
class BiasModels:
    """External-data conditional models entering the DG and IX bias terms.

    Each field maps covariate patterns ``z`` (K x p) and scalar levels to a
    length-K array:

    * ``y_u(a, m, z, u)``: E[Y | a, m, z, u]
    * ``u_amz(a, m, z)``: P(U=1 | a, m, z)
    * ``m_az(a, z)``: P(M=1 | a, z)
    * ``m_azu(a, z, u)``: P(M=1 | a, z, u)
    * ``u_z(z)``: P(U=1 | z)
    """

    y_u: Callable
    u_amz: Callable
    m_az: Callable
    m_azu: Callable
    u_z: Callable
    saturated: dict = field(default_factory=dict)

    @classmethod
    def from_coefficients(cls, spec: ModelSpec, y_u, u_amz, m_az, m_azu, u_z) -> "BiasModels":
        """Logistic models with given coefficient vectors.

        Designs: ``y_u`` uses the Y block layout of ``spec``; ``u_amz`` is
        (1, a, m, z); ``m_az`` is (1, a, z); ``m_azu`` is the M block layout;
        ``u_z`` is (1, z).
        """
        y_u, u_amz, m_az, m_azu, u_z = (np.asarray(c, dtype=float) for c in (y_u, u_amz, m_az, m_azu, u_z))
        return cls(
            y_u=lambda a, m, z, u: expit(spec.design("Y", z, a, m=m, u=u) @ y_u),
            u_amz=lambda a, m, z: expit(_lin_design(z, a, m) @ u_amz),
            m_az=lambda a, z: expit(_lin_design(z, a) @ m_az),
            m_azu=lambda a, z, u: expit(spec.design("M", z, a, u=u) @ m_azu),
            u_z=lambda z: expit(_lin_design(z) @ u_z),
        )


def _lin_design(z, *levels):
    z = np.atleast_2d(np.asarray(z, dtype=float))
    n = z.shape[0]
    return np.column_stack([np.ones(n)] + [np.full(n, float(v)) for v in levels] + list(z.T))


def _cell_table(keys, resp):
    """Cell key -> (count, mean response)."""
    acc = {}
    for k, r in zip(keys, resp.tolist()):
        c = acc.setdefault(k, [0, 0.0])
        c[0] += 1
        c[1] += r
    return {k: (c, s / c) for k, (c, s) in acc.items()}


def _cell_model(ext_keys, resp, needed, X_fn, X_ext, name, saturate):
    """Saturated cell proportion when every needed cell has >= MIN_CELL rows, else logistic."""
    table = _cell_table(ext_keys, resp)
    if saturate and all(table.get(k, (0, 0))[0] >= MIN_CELL for k in needed):
        return (lambda keys: np.array([table[k][1] for k in keys])), True
    if saturate:
        log.warning("%s: some cells have fewer than %d external rows; using main-effects logistic model",
                    name, MIN_CELL)
    Xc, yc, wc = compress_rows(X_ext, resp)
    beta = fit_logistic_mle(Xc, yc, wc).estimate
    return (lambda keys: expit(X_fn(keys) @ beta)), False


def fit_bias_models(external: Dataset, spec: ModelSpec, patterns, saturate=True) -> BiasModels:
    """Fit the external-data models used by the corrections.

    The Y model is the parametric Y block of ``spec``. The U and M models are
    saturated cell proportions over the cells needed for ``patterns`` when
    every such cell holds at least ``MIN_CELL`` external rows.

    Raises
    ------
    CellSparsityError
        A (z, a, m) cell needed for some main-data pattern has no external rows.
    """
    if external.u is None or external.m is None:
        raise StructuralError("external dataset must contain u and m columns")
    patterns = np.atleast_2d(patterns)
    zk = [_z_key(z) for z in external.z]
    pk = [_z_key(z) for z in patterns]
    a, m, u = external.a, external.m, external.u

    present = set(zip(zk, a.tolist(), m.tolist()))
    empty = [(z, aa, mm) for z in pk for aa in (0, 1) for mm in (0, 1) if (z, aa, mm) not in present]
    if empty:
        raise CellSparsityError(f"external data has empty (z, a, m) cells: {empty}", cells=empty)

    Xy = spec.design("Y", external.z, a, m=m, u=u)
    Xyc, yyc, wyc = compress_rows(Xy, external.y)
    alpha = fit_logistic_mle(Xyc, yyc, wyc).estimate

    zarr = lambda keys: np.array([k[0] for k in keys], dtype=float).reshape(len(keys), -1)
    col = lambda keys, j: np.array([k[j] for k in keys], dtype=float)

    u_amz, s1 = _cell_model(
        list(zip(zk, a.tolist(), m.tolist())), u,
        [(z, aa, mm) for z in pk for aa in (0, 1) for mm in (0, 1)],
        lambda keys: np.column_stack([np.ones(len(keys)), col(keys, 1), col(keys, 2), zarr(keys)]),
        np.column_stack([np.ones(external.n), a, m, external.z]),
        "P(U|a,m,z)", saturate)
    m_az, s2 = _cell_model(
        list(zip(zk, a.tolist())), m,
        [(z, aa) for z in pk for aa in (0, 1)],
        lambda keys: np.column_stack([np.ones(len(keys)), col(keys, 1), zarr(keys)]),
        np.column_stack([np.ones(external.n), a, external.z]),
        "P(M|a,z)", saturate)
    m_azu, s3 = _cell_model(
        list(zip(zk, a.tolist(), u.tolist())), m,
        [(z, aa, uu) for z in pk for aa in (0, 1) for uu in (0, 1)],
        lambda keys: spec.design("M", zarr(keys), col(keys, 1), u=col(keys, 2)),
        spec.design("M", external.z, a, u=u),
        "P(M|a,z,u)", saturate)
    u_z, s4 = _cell_model(
        [(z,) for z in zk], u, [(z,) for z in pk],
        lambda keys: np.column_stack([np.ones(len(keys)), zarr(keys)]),
        np.column_stack([np.ones(external.n), external.z]),
        "P(U|z)", saturate)

    keys_of = lambda z: [_z_key(r) for r in np.atleast_2d(z)]
    return BiasModels(
        y_u=lambda aa, mm, z, uu: expit(spec.design("Y", z, aa, m=mm, u=uu) @ alpha),
        u_amz=lambda aa, mm, z: u_amz([(k, aa, mm) for k in keys_of(z)]),
        m_az=lambda aa, z: m_az([(k, aa) for k in keys_of(z)]),
        m_azu=lambda aa, z, uu: m_azu([(k, aa, uu) for k in keys_of(z)]),
        u_z=lambda z: u_z([(k,) for k in keys_of(z)]),
        saturated={"u_amz": s1, "m_az": s2, "m_azu": s3, "u_z": s4},
    )


def dg_bias(models: BiasModels, patterns) -> np.ndarray:
    """delta(z) * gamma(z) at m=0, with gamma evaluated at a=0."""
    delta = models.u_amz(1, 0, patterns) - models.u_amz(0, 0, patterns)
    gamma = models.y_u(0, 0, patterns, 1) - models.y_u(0, 0, patterns, 0)
    return delta * gamma


def ix_bias(models: BiasModels, patterns, a=1, a_star=0) -> np.ndarray:
    """Bias of the uncorrected additive natural direct effect, exposure a versus a*."""
    total = np.zeros(np.atleast_2d(patterns).shape[0])
    pu1 = models.u_z(patterns)
    for m in (0, 1):
        pm_star = models.m_az(a_star, patterns)
        pm_star = pm_star if m == 1 else 1.0 - pm_star
        for u in (0, 1):
            ey1 = models.y_u(a, m, patterns, u)
            ey0 = models.y_u(a_star, m, patterns, u)
            pu_a = models.u_amz(a, m, patterns)
            pu_s = models.u_amz(a_star, m, patterns)
            if u == 0:
                pu_a, pu_s = 1.0 - pu_a, 1.0 - pu_s
            pmu = models.m_azu(a_star, patterns, u)
            pmu = pmu if m == 1 else 1.0 - pmu
            pu = pu1 if u == 1 else 1.0 - pu1
            total += (ey1 * pu_a - ey0 * pu_s) * pm_star
            total -= (ey1 - ey0) * pmu * pu
    return total


# ---------------------------------------------------------------- bootstrap


def _percentile(values):
    lo, hi = np.quantile(values, [0.025, 0.975])
    return float(lo), float(hi)


def bootstrap_corrections(main: Dataset, spec: ModelSpec, biases: dict, n_boot=200, seed=0,
                          resamples=None) -> dict[str, CorrectionResult]:
    """Point estimates and percentile intervals for several bias terms at once.

    Parameters
    ----------
    biases : dict
        method name -> per-pattern bias array aligned with the sorted main-data
        covariate patterns (``NAIVE`` maps to zeros).
    resamples : sequence of index arrays, optional
        Explicit bootstrap resamples; overrides ``n_boot`` and ``seed``.

    A resample whose naive refit fails is skipped and counted.
    """
    rows = _NaiveRows(main, spec)
    w = rows.counts()
    phi = rows.rnde_uc(w)
    pz = rows.pattern_weights(w)
    points = {k: float(pz @ (phi - b)) for k, b in biases.items()}

    if resamples is None:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 29]))
        resamples = (rng.integers(0, main.n, main.n) for _ in range(n_boot))
    boot = {k: [] for k in biases}
    failed = total = 0
    for idx in resamples:
        total += 1
        wb = rows.counts(idx)
        try:
            phib = rows.rnde_uc(wb)
        except (ArithmeticError, ValueError) as exc:
            log.debug("bootstrap refit failed: %s", exc)
            failed += 1
            continue
        pzb = rows.pattern_weights(wb)
        for k, b in biases.items():
            boot[k].append(float(pzb @ (phib - b)))
    if failed == total:
        raise RuntimeError("every bootstrap refit failed")
    out = {}
    for k in biases:
        vals = np.asarray(boot[k])
        lo, hi = _percentile(vals)
        out[k] = CorrectionResult(k, points[k], lo, hi, total, vals, failed)
    return out


def main_patterns(main: Dataset) -> np.ndarray:
    return np.unique(main.z, axis=0)


def naive_rnde(main: Dataset, spec: ModelSpec, n_boot=200, seed=0, resamples=None) -> CorrectionResult:
    """Uncorrected g-formula estimate standardised over the main-data covariates."""
    k = len(main_patterns(main))
    return bootstrap_corrections(main.drop_u(), spec, {"NAIVE": np.zeros(k)}, n_boot, seed, resamples)["NAIVE"]


def dg_correction(main: Dataset, external: Dataset, spec: ModelSpec, n_boot=200, seed=0,
                  models: BiasModels | None = None, resamples=None) -> CorrectionResult:
    """Delta-gamma corrected estimate; ``models`` defaults to logistic external fits."""
    pats = main_patterns(main)
    models = models or fit_bias_models(external, spec, pats, saturate=False)
    return bootstrap_corrections(main.drop_u(), spec, {"DG": dg_bias(models, pats)}, n_boot, seed, resamples)["DG"]


def ix_correction(main: Dataset, external: Dataset, spec: ModelSpec, n_boot=200, seed=0,
                  models: BiasModels | None = None, resamples=None) -> CorrectionResult:
    """Interaction-based corrected estimate; U and M models saturated where cells allow."""
    pats = main_patterns(main)
    models = models or fit_bias_models(external, spec, pats, saturate=True)
    return bootstrap_corrections(main.drop_u(), spec, {"IX": ix_bias(models, pats)}, n_boot, seed, resamples)["IX"]


def all_corrections(main: Dataset, external: Dataset, spec: ModelSpec, n_boot=200, seed=0):
    """NAIVE, DG and IX on shared bootstrap resamples.

    A bias model that cannot be built is reported as the exception in place
    of its result.
    """
    pats = main_patterns(main)
    biases, errors = {"NAIVE": np.zeros(len(pats))}, {}
    for name, fn in (("DG", lambda: dg_bias(fit_bias_models(external, spec, pats, saturate=False), pats)),
                     ("IX", lambda: ix_bias(fit_bias_models(external, spec, pats, saturate=True), pats))):
        try:
            biases[name] = fn()
        except Exception as exc:  # recorded per method by the caller
            errors[name] = exc
    out = bootstrap_corrections(main.drop_u(), spec, biases, n_boot, seed)
    out.update(errors)
    return out
