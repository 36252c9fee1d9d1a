"""Maximum-likelihood logistic regression by damped Newton-Raphson."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_expit

from .errors import SeparationError, SingularInformationError, StructuralError
from .model import ROLES, Dataset, ModelSpec

SEPARATION_BOUND = 30.0


@dataclass(frozen=True, eq=False)
class MleFit:
    estimate: np.ndarray
    covariance: np.ndarray
    converged: bool
    iterations: int
    loglik: float
    names: tuple[str, ...] = field(default=())

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance))


def logistic_loglik(beta, X, y, w=None):
    eta = X @ beta
    w = np.ones(len(y)) if w is None else w
    return float(np.sum(w * (y * log_expit(eta) + (1.0 - y) * log_expit(-eta))))


def _score_info(beta, X, y, w):
    p = expit(X @ beta)
    score = X.T @ (w * (y - p))
    info = (X * (w * p * (1.0 - p))[:, None]).T @ X
    return score, info


def compress_rows(X, y):
    """Collapse duplicate (x, y) rows into frequency weights."""
    stacked = np.column_stack([X, y])
    uniq, counts = np.unique(stacked, axis=0, return_counts=True)
    return uniq[:, :-1], uniq[:, -1], counts.astype(float)


def fit_logistic_mle(design, response, weights=None, tol=1e-8, max_iter=50, names=()):
    """Fit a Bernoulli-logit model by Newton-Raphson with step halving.

    Parameters
    ----------
    design : (n, p) array
        Regressors, intercept column included by the caller.
    response : (n,) array of 0/1
    weights : (n,) array, optional
        Frequency weights (row counts). Defaults to ones.
    tol : float
        Convergence threshold on the max-norm of the score.
    max_iter : int
        Newton iteration cap.

    Returns
    -------
    MleFit
        ``covariance`` is the inverse observed information at the estimate.

    Raises
    ------
    SingularInformationError
        The design is rank deficient.
    SeparationError
        A coefficient runs past +-30 while the likelihood keeps improving.
    """
    X = np.asarray(design, dtype=float)
    y = np.asarray(response, dtype=float)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise StructuralError("design and response have incompatible shapes")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("response must be binary 0/1")
    w = np.ones(len(y)) if weights is None else np.asarray(weights, dtype=float)
    active = w > 0
    if np.linalg.matrix_rank(X[active]) < X.shape[1]:
        raise SingularInformationError("design matrix is rank deficient")

    beta = np.zeros(X.shape[1])
    ll = logistic_loglik(beta, X, y, w)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        score, info = _score_info(beta, X, y, w)
        if np.max(np.abs(score)) < tol:
            converged = True
            it -= 1
            break
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError as exc:
            raise SingularInformationError("observed information is singular") from exc
        t = 1.0
        for _ in range(21):
            cand = beta + t * step
            ll_new = logistic_loglik(cand, X, y, w)
            if np.isfinite(ll_new) and ll_new >= ll - 1e-12 * max(1.0, abs(ll)):
                break
            t *= 0.5
        else:
            break
        beta, ll = cand, ll_new
        if np.max(np.abs(beta)) > SEPARATION_BOUND:
            raise SeparationError(
                f"coefficient magnitude exceeded {SEPARATION_BOUND:g}; data appear separated"
            )
    else:
        score, _ = _score_info(beta, X, y, w)
        converged = bool(np.max(np.abs(score)) < tol)

    _, info = _score_info(beta, X, y, w)
    try:
        chol = np.linalg.cholesky(info)
    except np.linalg.LinAlgError as exc:
        raise SingularInformationError("observed information is not positive-definite") from exc
    inv_chol = np.linalg.inv(chol)
    cov = inv_chol.T @ inv_chol
    cov = 0.5 * (cov + cov.T)
    return MleFit(beta, cov, converged, it, ll, tuple(names))


def role_design(data: Dataset, spec: ModelSpec, role: str):
    """(design, response) for fitting ``role`` on a dataset that observes u."""
    if role != "U" and data.u is None:
        raise StructuralError(f"{role} model needs the u column")
    s2 = data.stage2(spec)
    X = spec.design(role, data.z, data.a, m=s2, u=data.u)
    resp = {"U": data.u, "M": s2, "Y": data.y}[role]
    if resp is None:
        raise StructuralError("U model needs the u column")
    return X, resp


def fit_external_models(external: Dataset, spec: ModelSpec, tol=1e-8, max_iter=50) -> dict[str, MleFit]:
    """Fit the U, M and Y logistic models on data where U is observed.

    Errors are re-raised with the failing role named in the message.
    """
    if external.u is None:
        raise StructuralError("external dataset must contain the u column")
    fits = {}
    for role in ROLES:
        X, resp = role_design(external, spec, role)
        Xc, yc, wc = compress_rows(X, resp)
        try:
            fits[role] = fit_logistic_mle(Xc, yc, wc, tol=tol, max_iter=max_iter, names=spec.coef_names(role))
        except (SeparationError, SingularInformationError) as exc:
            raise type(exc)(f"{role} model: {exc}") from exc
    return fits
