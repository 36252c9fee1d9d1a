"""Block-Gaussian priors built from external-data fits, with variance inflation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import PriorError
from .model import ROLES, ModelSpec, ParamVector

_LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class _Block:
    mean: np.ndarray
    cov: np.ndarray
    chol: np.ndarray
    logdet: float


def _make_block(role, mean, cov):
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (mean.size, mean.size):
        raise PriorError(f"block {role}: covariance shape {cov.shape} does not match mean")
    if not np.allclose(cov, cov.T, atol=1e-10, rtol=0):
        raise PriorError(f"block {role}: covariance is not symmetric")
    cov = 0.5 * (cov + cov.T)
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise PriorError(f"block {role}: covariance is not positive-definite") from exc
    return _Block(mean, cov, chol, 2.0 * float(np.sum(np.log(np.diag(chol)))))


def inflate_covariance(cov, indices, sigma):
    """Scale row/column ``j`` of ``cov`` by ``sigma`` for each ``j`` in ``indices``.

    Diagonal entries of inflated coordinates pick up ``sigma**2``; entries
    shared by two inflated coordinates also pick up ``sigma**2``. Correlations
    are unchanged.
    """
    d = np.ones(cov.shape[0])
    d[list(indices)] = sigma
    return cov * np.outer(d, d)


@dataclass(frozen=True, eq=False)
class GaussianPrior:
    """Independent multivariate-normal priors on the U, M and Y blocks."""

    spec: ModelSpec
    blocks: dict[str, _Block]
    inflation_factor: float = 1.0
    inflated_indices: dict[str, tuple[int, ...]] = field(default_factory=dict)

    @classmethod
    def from_moments(cls, spec, means, covs, inflation_factor=1.0, inflated_indices=None):
        blocks = {}
        sizes = spec.block_sizes()
        for role in ROLES:
            if np.asarray(means[role]).size != sizes[role]:
                raise PriorError(f"block {role}: expected {sizes[role]} coefficients")
            blocks[role] = _make_block(role, means[role], covs[role])
        return cls(spec, blocks, float(inflation_factor), dict(inflated_indices or {}))

    @property
    def mean(self) -> np.ndarray:
        return np.concatenate([self.blocks[r].mean for r in ROLES])

    @property
    def sd(self) -> np.ndarray:
        return np.concatenate([np.sqrt(np.diag(self.blocks[r].cov)) for r in ROLES])

    def covariance(self) -> np.ndarray:
        """Full block-diagonal covariance."""
        dim = self.spec.dim
        out = np.zeros((dim, dim))
        for role, sl in self.spec.block_slices().items():
            out[sl, sl] = self.blocks[role].cov
        return out

    def to_json(self) -> dict:
        return {
            "spec": {
                "z_dim": self.spec.z_dim,
                "include_am_interaction": self.spec.include_am_interaction,
                "u_exposure_induced": self.spec.u_exposure_induced,
                "structure": self.spec.structure,
            },
            "inflation_factor": self.inflation_factor,
            "inflated_indices": {r: list(v) for r, v in self.inflated_indices.items()},
            "blocks": {
                r: {
                    "names": list(self.spec.coef_names(r)),
                    "mean": self.blocks[r].mean.tolist(),
                    "covariance": self.blocks[r].cov.tolist(),
                }
                for r in ROLES
            },
        }

    @classmethod
    def from_json(cls, doc: dict) -> "GaussianPrior":
        spec = ModelSpec(**doc["spec"])
        blocks = doc["blocks"]
        for r in ROLES:
            names = blocks[r].get("names")
            if names is not None and tuple(names) != spec.coef_names(r):
                raise PriorError(f"block {r}: coefficient names {names} do not match the model spec")
        return cls.from_moments(
            spec,
            {r: blocks[r]["mean"] for r in ROLES},
            {r: blocks[r]["covariance"] for r in ROLES},
            doc.get("inflation_factor", 1.0),
            {r: tuple(v) for r, v in doc.get("inflated_indices", {}).items()},
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path) -> "GaussianPrior":
        return cls.from_json(json.loads(Path(path).read_text()))


def default_identifiable(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    """Coordinates learnable from data without U: everything but theta_U, beta_U, alpha_U."""
    sizes = spec.block_sizes()
    return {"U": (), "M": tuple(range(sizes["M"] - 1)), "Y": tuple(range(sizes["Y"] - 1))}


def build_prior(fits, spec: ModelSpec, sigma=None, identifiable=None) -> GaussianPrior:
    """Prior N(theta_hat_X, Sigma_hat_X) per block from external MLE fits.

    With ``sigma`` given, the identifiable coordinates (``identifiable`` maps
    role -> block-local indices, defaulting to :func:`default_identifiable`)
    get their covariance rows and columns scaled by ``sigma`` so their marginal
    priors become diffuse while correlations with the bias coefficients stay put.
    """
    for role in ROLES:
        if not fits[role].converged:
            raise PriorError(f"{role} model fit did not converge")
    means = {r: np.asarray(fits[r].estimate, dtype=float) for r in ROLES}
    covs = {r: np.asarray(fits[r].covariance, dtype=float) for r in ROLES}
    inflated = {}
    if sigma is not None:
        if sigma < 1:
            raise PriorError("inflation factor must be >= 1")
        idx = default_identifiable(spec) if identifiable is None else identifiable
        for role in ROLES:
            ind = tuple(int(j) for j in idx.get(role, ()))
            if ind:
                covs[role] = inflate_covariance(covs[role], ind, float(sigma))
                inflated[role] = ind
    return GaussianPrior.from_moments(spec, means, covs, 1.0 if sigma is None else float(sigma), inflated)


def _as_flat(theta, spec):
    return theta.flatten() if isinstance(theta, ParamVector) else np.asarray(theta, dtype=float)


def log_prior_density(theta, prior: GaussianPrior) -> float:
    """Sum of the three block multivariate-normal log-densities, constants included."""
    flat = _as_flat(theta, prior.spec)
    if flat.shape != (prior.spec.dim,):
        raise ValueError("parameter dimension does not match the prior")
    total = 0.0
    for role, sl in prior.spec.block_slices().items():
        b = prior.blocks[role]
        resid = np.linalg.solve(b.chol, flat[sl] - b.mean)
        total += -0.5 * (resid @ resid) - 0.5 * b.logdet - 0.5 * b.mean.size * _LOG_2PI
    return float(total)


def grad_log_prior(theta, prior: GaussianPrior) -> np.ndarray:
    """Blockwise -Sigma^{-1} (theta - mu)."""
    flat = _as_flat(theta, prior.spec)
    out = np.empty_like(flat)
    for role, sl in prior.spec.block_slices().items():
        b = prior.blocks[role]
        x = np.linalg.solve(b.chol, flat[sl] - b.mean)
        out[sl] = -np.linalg.solve(b.chol.T, x)
    return out
