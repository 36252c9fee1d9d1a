"""U-marginalised posterior, Hamiltonian Monte Carlo, and R-hat.

The main data never observe U, so each row contributes

    log sum_{u in {0,1}} p(y | a, z, m, u) p(m | a, z, u) p(u | a, z)

to the log-likelihood. All variables are discrete, so rows are collapsed to
unique patterns with frequency weights before any evaluation; this makes the
likelihood invariant to row order and exactly linear in row duplication.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_expit

from .errors import SamplerError, StructuralError
from .model import Dataset, ModelSpec, ParamVector
from .prior import GaussianPrior

log = logging.getLogger(__name__)


class MarginalTarget:
    """Log-posterior ``log L_m(theta) + log prior(theta)`` and its gradient.

    Parameters
    ----------
    main : Dataset or None
        Main data. ``None`` leaves only the prior (useful for testing the sampler).
    spec : ModelSpec
    prior : GaussianPrior, optional
    complete_data : bool
        Condition on an observed ``u`` column instead of summing over it.
    """

    def __init__(self, main: Dataset | None, spec: ModelSpec, prior: GaussianPrior | None = None,
                 complete_data: bool = False):
        self.spec = spec
        self.dim = spec.dim
        self.complete_data = complete_data
        self._sl = spec.block_slices()
        if prior is not None:
            self._mu = prior.mean
            self._prec = np.linalg.inv(prior.covariance())
            self._prec = 0.5 * (self._prec + self._prec.T)
            sign, logdet = np.linalg.slogdet(prior.covariance())
            self._prior_const = -0.5 * logdet - 0.5 * self.dim * np.log(2 * np.pi)
        else:
            self._mu = None
        self.n_rows = 0
        if main is None:
            self._w = None
            return
        if complete_data and main.u is None:
            raise StructuralError("complete-data mode needs the u column")
        if not complete_data and main.u is not None:
            main = main.drop_u()
        s2 = main.stage2(spec)
        cols = [main.z, main.a[:, None], s2[:, None], main.y[:, None]]
        if complete_data:
            cols.append(main.u[:, None])
        rows, counts = np.unique(np.hstack(cols), axis=0, return_counts=True)
        p = spec.z_dim
        z, a, m, y = rows[:, :p], rows[:, p], rows[:, p + 1], rows[:, p + 2]
        self._u_obs = rows[:, p + 3].astype(float) if complete_data else None
        self.n_rows = int(counts.sum())
        self._w = counts.astype(float)
        self._XU = spec.design("U", z, a)
        self._XM = spec.design("M", z, a, u=0)[:, :-1]
        self._XY = spec.design("Y", z, a, m=m, u=0)[:, :-1]
        self._m = m.astype(float)
        self._y = y.astype(float)
        self._sm = 2.0 * self._m - 1.0
        self._sy = 2.0 * self._y - 1.0

    def _flat(self, theta):
        flat = theta.flatten() if isinstance(theta, ParamVector) else np.asarray(theta, dtype=float)
        if flat.shape != (self.dim,):
            raise ValueError(f"expected {self.dim} coefficients, got {flat.shape}")
        if not np.all(np.isfinite(flat)):
            raise ValueError("non-finite parameter vector")
        return flat

    def loglik_and_grad(self, theta, need_grad=True):
        flat = self._flat(theta)
        if self._w is None:
            return 0.0, np.zeros(self.dim)
        sl = self._sl
        g, b, al = flat[sl["U"]], flat[sl["M"]], flat[sl["Y"]]
        eta_u = self._XU @ g
        eta_m0 = self._XM @ b[:-1]
        eta_y0 = self._XY @ al[:-1]
        eta_m1 = eta_m0 + b[-1]
        eta_y1 = eta_y0 + al[-1]
        j0 = log_expit(-eta_u) + log_expit(self._sm * eta_m0) + log_expit(self._sy * eta_y0)
        j1 = log_expit(eta_u) + log_expit(self._sm * eta_m1) + log_expit(self._sy * eta_y1)
        if self.complete_data:
            r1 = self._u_obs
            rowll = np.where(r1 == 1.0, j1, j0)
        else:
            rowll = np.logaddexp(j0, j1)
            r1 = np.exp(j1 - rowll)
        ll = float(np.dot(self._w, rowll))
        if not need_grad:
            return ll, None
        r0 = 1.0 - r1
        w = self._w
        grad = np.empty(self.dim)
        grad[sl["U"]] = self._XU.T @ (w * (r1 - expit(eta_u)))
        res_m0 = self._m - expit(eta_m0)
        res_m1 = self._m - expit(eta_m1)
        res_y0 = self._y - expit(eta_y0)
        res_y1 = self._y - expit(eta_y1)
        gm = np.empty(b.size)
        gm[:-1] = self._XM.T @ (w * (r0 * res_m0 + r1 * res_m1))
        gm[-1] = np.dot(w, r1 * res_m1)
        gy = np.empty(al.size)
        gy[:-1] = self._XY.T @ (w * (r0 * res_y0 + r1 * res_y1))
        gy[-1] = np.dot(w, r1 * res_y1)
        grad[sl["M"]] = gm
        grad[sl["Y"]] = gy
        return ll, grad

    def loglik(self, theta) -> float:
        return self.loglik_and_grad(theta, need_grad=False)[0]

    def logpost_and_grad(self, theta):
        ll, grad = self.loglik_and_grad(theta)
        if self._mu is None:
            return ll, grad
        d = np.asarray(theta.flatten() if isinstance(theta, ParamVector) else theta, dtype=float) - self._mu
        pd = self._prec @ d
        return ll - 0.5 * float(d @ pd) + self._prior_const, grad - pd


def log_marginal_likelihood(theta, main: Dataset, spec: ModelSpec) -> float:
    """log L_m: the main-data log-likelihood with U summed out."""
    return MarginalTarget(main, spec).loglik(theta)


def complete_data_loglik(theta, data: Dataset, spec: ModelSpec) -> float:
    """Log-likelihood of data with u observed (the U, M and Y terms)."""
    return MarginalTarget(data, spec, complete_data=True).loglik(theta)


def grad_log_posterior(theta, main: Dataset, spec: ModelSpec, prior: GaussianPrior | None) -> np.ndarray:
    return MarginalTarget(main, spec, prior).logpost_and_grad(theta)[1]


def log_posterior(theta, main: Dataset, spec: ModelSpec, prior: GaussianPrior | None) -> float:
    return MarginalTarget(main, spec, prior).logpost_and_grad(theta)[0]


# ---------------------------------------------------------------------------
# Gelman-Rubin

def gelman_rubin(chains) -> np.ndarray:
    """Potential scale reduction factor per parameter.

    ``chains`` has shape (n_chains, n_draws) or (n_chains, n_draws, n_params).
    Zero within-chain variance yields ``inf``.
    """
    x = np.asarray(chains, dtype=float)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[:, :, None]
    c, n, _ = x.shape
    if c < 2:
        raise ValueError("R-hat needs at least two chains")
    if n < 2:
        raise ValueError("R-hat needs at least two draws per chain")
    w = x.var(axis=1, ddof=1).mean(axis=0)
    b_over_n = x.mean(axis=1).var(axis=0, ddof=1)
    var_plus = (n - 1) / n * w + b_over_n
    with np.errstate(divide="ignore", invalid="ignore"):
        rhat = np.where(w > 0, np.sqrt(var_plus / np.where(w > 0, w, 1.0)), np.inf)
    return rhat[0] if squeeze else rhat


def effective_sample_size(chains) -> float:
    """Multi-chain effective sample size of a scalar series.

    Autocorrelations are averaged over chains and truncated with Geyer's
    initial monotone positive sequence. ``chains`` has shape (n_chains, n_draws).
    """
    x = np.atleast_2d(np.asarray(chains, dtype=float))
    c, n = x.shape
    if n < 4:
        raise ValueError("ESS needs at least four draws per chain")
    d = x - x.mean(axis=1, keepdims=True)
    f = np.fft.rfft(d, n=2 * n, axis=1)
    acov = np.fft.irfft(f * np.conj(f), axis=1)[:, :n] / n
    w = acov[:, 0].mean() * n / (n - 1)
    if w <= 0:
        return float(c * n)
    var_plus = (n - 1) / n * w + (x.mean(axis=1).var(ddof=1) if c > 1 else 0.0)
    rho = 1.0 - (w - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # sums of adjacent pairs, kept while positive and forced non-increasing
    pairs = rho[: n - n % 2].reshape(-1, 2).sum(axis=1)
    k = np.argmax(pairs <= 0) if np.any(pairs <= 0) else len(pairs)
    pairs = np.minimum.accumulate(pairs[:k])
    tau = -1.0 + 2.0 * pairs.sum()
    return float(c * n / max(tau, 1.0 / np.log10(c * n)))


# ---------------------------------------------------------------------------
# HMC


@dataclass(frozen=True)
class SamplerConfig:
    chains: int = 3
    iters: int = 2000
    warmup: int = 1000
    seed: int = 0
    step_size: float | None = None
    leapfrog_steps: int = 32
    target_accept: float = 0.8
    init_jitter: float = 0.1
    step_jitter: float = 0.1
    max_energy_error: float = 1000.0

    def __post_init__(self):
        if not self.iters > self.warmup >= 1:
            raise ValueError("need iters > warmup >= 1")
        if self.chains < 1 or self.leapfrog_steps < 1:
            raise ValueError("chains and leapfrog_steps must be positive")


@dataclass(eq=False)
class PosteriorDraws:
    """Retained draws, chain-major: all of chain 0, then chain 1, ..."""

    draws: np.ndarray
    chain_id: np.ndarray
    iteration: np.ndarray
    names: tuple[str, ...]
    warmup_discarded: int
    accept_rate: np.ndarray
    step_size: np.ndarray
    divergences: np.ndarray
    seed: int
    rhat: np.ndarray | None = None
    warnings: list[str] = field(default_factory=list)

    @property
    def n_chains(self) -> int:
        return int(self.chain_id.max()) + 1

    def __len__(self):
        return self.draws.shape[0]

    def by_chain(self) -> np.ndarray:
        return self.draws.reshape(self.n_chains, -1, self.draws.shape[1])

    def max_rhat(self) -> float | None:
        return None if self.rhat is None else float(np.max(self.rhat))

    def params(self, spec: ModelSpec, b: int) -> ParamVector:
        return spec.unflatten(self.draws[b])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["chain", "iter", *self.names])
            for c, it, row in zip(self.chain_id, self.iteration, self.draws):
                wr.writerow([int(c), int(it), *(repr(float(v)) for v in row)])

    @classmethod
    def from_draws(cls, draws, names=(), chains=1, seed=0):
        """Wrap an externally produced (B, dim) array, split evenly into chains."""
        draws = np.atleast_2d(np.asarray(draws, dtype=float))
        per = draws.shape[0] // chains
        if per * chains != draws.shape[0]:
            raise ValueError("draw count is not divisible by the chain count")
        chain_id = np.repeat(np.arange(chains), per)
        rhat = gelman_rubin(draws.reshape(chains, per, -1)) if chains > 1 and per > 1 else None
        return cls(draws, chain_id, np.tile(np.arange(per), chains), tuple(names), 0,
                   np.full(chains, np.nan), np.full(chains, np.nan), np.zeros(chains, int), seed, rhat)


class _DualAveraging:
    def __init__(self, eps0, target, gamma=0.05, t0=10.0, kappa=0.75):
        self.mu = np.log(10.0 * eps0)
        self.target, self.gamma, self.t0, self.kappa = target, gamma, t0, kappa
        self.t = 0
        self.hbar = 0.0
        self.log_eps = np.log(eps0)
        self.log_eps_bar = 0.0

    def update(self, accept):
        self.t += 1
        t = self.t
        eta = 1.0 / (t + self.t0)
        self.hbar = (1 - eta) * self.hbar + eta * (self.target - accept)
        self.log_eps = self.mu - np.sqrt(t) / self.gamma * self.hbar
        wt = t ** (-self.kappa)
        self.log_eps_bar = wt * self.log_eps + (1 - wt) * self.log_eps_bar
        return float(np.exp(self.log_eps))

    @property
    def final(self):
        return float(np.exp(self.log_eps_bar))


def _leapfrog(logp_grad, q, p, grad, eps, minv, steps):
    p = p + 0.5 * eps * grad
    for i in range(steps):
        q = q + eps * minv * p
        lp, grad = logp_grad(q)
        if not np.isfinite(lp):
            return q, p, lp, grad
        if i < steps - 1:
            p = p + eps * grad
    p = p + 0.5 * eps * grad
    return q, p, lp, grad


def _initial_step(logp_grad, q, lp, grad, minv, rng):
    """Double or halve a trial step until one-step acceptance crosses 1/2."""
    p = rng.standard_normal(q.size) / np.sqrt(minv)
    h0 = -lp + 0.5 * np.sum(minv * p * p)

    def log_ratio(e):
        _, p1, lp1, _ = _leapfrog(logp_grad, q, p, grad, e, minv, 1)
        if not np.isfinite(lp1):
            return -np.inf
        return h0 - (-lp1 + 0.5 * np.sum(minv * p1 * p1))

    eps = 0.1
    up = log_ratio(eps) > np.log(0.5)
    for _ in range(60):
        r = log_ratio(eps)
        if up and not r > np.log(0.5):
            return eps / 2.0
        if not up and r > np.log(0.5):
            return eps
        eps = eps * 2.0 if up else eps / 2.0
    return eps


def run_chain(logp_grad, init, cfg: SamplerConfig, rng, minv0=None):
    """One HMC chain with dual-averaging warmup and a diagonal metric.

    Warmup schedule: the first half adapts the step size only; draws in
    [0.5, 0.85) of warmup estimate the diagonal inverse metric; the step
    size is then re-adapted over the final 15%.

    Returns (draws after warmup, mean accept prob, final step, divergences).
    """
    q = np.array(init, dtype=float)
    dim = q.size
    minv = np.ones(dim) if minv0 is None else np.array(minv0, dtype=float)
    lp, grad = logp_grad(q)
    if not np.isfinite(lp):
        raise SamplerError("non-finite log density at the initial point")
    eps = cfg.step_size or _initial_step(logp_grad, q, lp, grad, minv, rng)
    w = cfg.warmup
    win_lo, win_hi = int(0.5 * w), int(0.85 * w)
    adapt_metric = cfg.step_size is None and win_hi - win_lo >= 20
    da = _DualAveraging(eps, cfg.target_accept) if cfg.step_size is None else None
    window = []
    n_keep = cfg.iters - w
    draws = np.empty((n_keep, dim))
    acc_sum = 0.0
    divergences = 0
    finite_energy_seen = False
    for it in range(cfg.iters):
        step = eps * rng.uniform(1 - cfg.step_jitter, 1 + cfg.step_jitter)
        p0 = rng.standard_normal(dim) / np.sqrt(minv)
        h0 = -lp + 0.5 * np.sum(minv * p0 * p0)
        # random path length breaks resonance with near-periodic orbits
        n_steps = int(rng.integers((cfg.leapfrog_steps + 1) // 2, cfg.leapfrog_steps + 1))
        q1, p1, lp1, grad1 = _leapfrog(logp_grad, q, p0, grad, step, minv, n_steps)
        h1 = -lp1 + 0.5 * np.sum(minv * p1 * p1) if np.isfinite(lp1) else np.inf
        if np.isfinite(h1):
            finite_energy_seen = True
        dh = h1 - h0
        if not np.isfinite(dh) or dh > cfg.max_energy_error:
            accept = 0.0
            if it >= w:
                divergences += 1
        else:
            accept = float(min(1.0, np.exp(-dh)))
        if rng.uniform() < accept:
            q, lp, grad = q1, lp1, grad1
        if it < w:
            if da is not None:
                eps = da.update(accept)
            if adapt_metric and win_lo <= it < win_hi:
                window.append(q.copy())
                if it == win_hi - 1:
                    arr = np.asarray(window)
                    k = arr.shape[0]
                    var = arr.var(axis=0, ddof=1)
                    minv = (k / (k + 5.0)) * var + 1e-3 * (5.0 / (k + 5.0))
                    eps = _initial_step(logp_grad, q, lp, grad, minv, rng)
                    da = _DualAveraging(eps, cfg.target_accept)
            if it == w - 1 and da is not None:
                eps = da.final
        else:
            draws[it - w] = q
            acc_sum += accept
    if not finite_energy_seen:
        raise SamplerError("every proposal had non-finite energy")
    return draws, acc_sum / n_keep, eps, divergences


def sample_posterior(main: Dataset | None, spec: ModelSpec, prior: GaussianPrior,
                     cfg: SamplerConfig = SamplerConfig(), complete_data: bool = False) -> PosteriorDraws:
    """Draw from the posterior proportional to L_m(theta) x prior(theta).

    Chains start at the prior mean plus ``init_jitter`` prior standard
    deviations of Gaussian noise (inflated coordinates use their pre-inflation
    scale) and use independent streams seeded by ``(seed, chain)``.
    """
    target = MarginalTarget(main, spec, prior, complete_data=complete_data)

    def logp_grad(q):
        try:
            return target.logpost_and_grad(q)
        except ValueError:
            return -np.inf, np.zeros(q.size)

    sd = prior.sd.copy()
    sl = spec.block_slices()
    for role, idx in prior.inflated_indices.items():
        for j in idx:
            sd[sl[role].start + j] /= prior.inflation_factor
    return sample_target(logp_grad, prior.mean, sd, cfg, tuple(spec.names()))


def sample_target(logp_grad, init_mean, init_sd, cfg: SamplerConfig = SamplerConfig(), names=()) -> PosteriorDraws:
    """Run ``cfg.chains`` HMC chains on an arbitrary differentiable log density.

    ``logp_grad(q)`` returns (log density, gradient). Chains start at
    ``init_mean + init_jitter * init_sd * N(0, I)``; ``init_sd**2`` also seeds
    the diagonal inverse metric.
    """
    mean = np.asarray(init_mean, dtype=float)
    sd = np.asarray(init_sd, dtype=float)
    minv0 = sd**2
    out, chain_ids, its, acc, steps, divs = [], [], [], [], [], []
    for c in range(cfg.chains):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, c]))
        for _ in range(100):
            init = mean + cfg.init_jitter * sd * rng.standard_normal(mean.size)
            if np.isfinite(logp_grad(init)[0]):
                break
        else:
            raise SamplerError("could not find a finite starting point")
        d, a, e, nd = run_chain(logp_grad, init, cfg, rng, minv0=minv0)
        out.append(d)
        chain_ids.append(np.full(d.shape[0], c))
        its.append(np.arange(cfg.warmup, cfg.iters))
        acc.append(a)
        steps.append(e)
        divs.append(nd)
    draws = np.vstack(out)
    keep = cfg.iters - cfg.warmup
    rhat = gelman_rubin(draws.reshape(cfg.chains, keep, -1)) if cfg.chains > 1 and keep > 1 else None
    msgs = []
    for c, nd in enumerate(divs):
        if nd > 0.1 * keep:
            msg = f"chain {c}: {nd} divergent transitions out of {keep} post-warmup iterations"
            msgs.append(msg)
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return PosteriorDraws(
        draws=draws,
        chain_id=np.concatenate(chain_ids),
        iteration=np.concatenate(its),
        names=tuple(names),
        warmup_discarded=cfg.warmup,
        accept_rate=np.asarray(acc),
        step_size=np.asarray(steps),
        divergences=np.asarray(divs),
        seed=cfg.seed,
        rhat=rhat,
        warnings=msgs,
    )
