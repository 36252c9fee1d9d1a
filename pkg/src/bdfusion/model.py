"""Domain types and logistic-model primitives.

Three binary-logit models make up the data-generating structure:

    logit P(U=1) = gamma_0 + gamma_A a + z' gamma_Z
    logit P(M=1) = beta_0 + beta_A a + z' beta_Z + beta_U u
    logit P(Y=1) = alpha_0 + alpha_A a + z' alpha_Z + alpha_M m + alpha_AM a m + alpha_U u

The flattened parameter layout is always U-block, then M-block, then Y-block,
with the Z coefficients in column order. The U coefficient is the last entry
of the M and Y blocks; several vectorised routines rely on that.

In the time-varying structure the second exposure A2 takes the slot of M.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np
from scipy.special import expit, log_expit

from .errors import BoundaryError, StructuralError

ROLES = ("U", "M", "Y")
_PREFIX = {"U": "gamma", "M": "beta", "Y": "alpha"}


def logit_inv(x):
    """Inverse logit, 1 / (1 + exp(-x)); saturates to 0 or 1 without overflow."""
    return expit(x)


def log_logit_inv(x):
    """log(logit_inv(x)), accurate far into both tails."""
    return log_expit(x)


def bernoulli_loglik(y, p):
    """Bernoulli log-likelihood ``y log p + (1 - y) log(1 - p)``.

    Raises :class:`BoundaryError` when any ``p`` is exactly 0 or 1.
    """
    p = np.asarray(p, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any((p <= 0.0) | (p >= 1.0)):
        raise BoundaryError("probability on the boundary of (0, 1); upstream saturation")
    out = y * np.log(p) + (1.0 - y) * np.log1p(-p)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class ModelSpec:
    """Structure of the U, M and Y logistic models.

    ``structure`` is ``"mediation"`` (A -> M -> Y) or ``"tvc"``, where the
    second-stage node is a second exposure A2 stored in the ``a2`` column.
    """

    z_dim: int = 2
    include_am_interaction: bool = False
    u_exposure_induced: bool = True
    structure: str = "mediation"

    def __post_init__(self):
        if self.z_dim < 0:
            raise ValueError("z_dim must be non-negative")
        if self.structure not in ("mediation", "tvc"):
            raise ValueError(f"unknown structure {self.structure!r}")

    @property
    def stage2(self) -> str:
        return "a2" if self.structure == "tvc" else "m"

    def parents(self) -> dict[str, tuple[str, ...]]:
        zs = tuple(f"z{j + 1}" for j in range(self.z_dim))
        s2 = self.stage2
        u_par = (("a",) if self.u_exposure_induced else ()) + zs
        y_par = ("a",) + zs + (s2,) + (("a*" + s2,) if self.include_am_interaction else ()) + ("u",)
        return {"U": u_par, s2.upper() if s2 == "m" else "A2": ("a",) + zs + ("u",), "Y": y_par}

    def coef_names(self, role: str) -> tuple[str, ...]:
        pre = _PREFIX[role]
        zs = tuple(f"{pre}_Z{j + 1}" for j in range(self.z_dim))
        if role == "U":
            return (f"{pre}_0",) + ((f"{pre}_A",) if self.u_exposure_induced else ()) + zs
        if role == "M":
            return (f"{pre}_0", f"{pre}_A") + zs + (f"{pre}_U",)
        if role == "Y":
            am = (f"{pre}_AM",) if self.include_am_interaction else ()
            return (f"{pre}_0", f"{pre}_A") + zs + (f"{pre}_M",) + am + (f"{pre}_U",)
        raise ValueError(f"unknown role {role!r}")

    def block_sizes(self) -> dict[str, int]:
        return {r: len(self.coef_names(r)) for r in ROLES}

    def block_slices(self) -> dict[str, slice]:
        out, start = {}, 0
        for r in ROLES:
            k = len(self.coef_names(r))
            out[r] = slice(start, start + k)
            start += k
        return out

    @property
    def dim(self) -> int:
        return sum(self.block_sizes().values())

    def names(self) -> list[str]:
        return [n for r in ROLES for n in self.coef_names(r)]

    def bias_indices(self) -> list[int]:
        """Flat indices of coefficients that cannot be learned without U."""
        sl = self.block_slices()
        return list(range(sl["U"].start, sl["U"].stop)) + [sl["M"].stop - 1, sl["Y"].stop - 1]

    def unflatten(self, flat) -> "ParamVector":
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (self.dim,):
            raise ValueError(f"expected {self.dim} coefficients, got shape {flat.shape}")
        sl = self.block_slices()
        return ParamVector(flat[sl["U"]].copy(), flat[sl["M"]].copy(), flat[sl["Y"]].copy())

    def design(self, role: str, z, a, m=None, u=None) -> np.ndarray:
        """Design matrix for ``role`` with columns in coefficient order.

        ``m`` holds the second-stage node (M, or A2 for the tvc structure).
        """
        z = np.atleast_2d(np.asarray(z, dtype=float))
        if z.shape[1] != self.z_dim:
            raise StructuralError(f"z has {z.shape[1]} columns, spec expects {self.z_dim}")
        n = z.shape[0]
        a = np.broadcast_to(np.asarray(a, dtype=float), (n,))
        ones = np.ones(n)
        if role == "U":
            cols = [ones] + ([a] if self.u_exposure_induced else []) + list(z.T)
            return np.column_stack(cols)
        if u is None:
            raise StructuralError(f"role {role} needs a value for u")
        u = np.broadcast_to(np.asarray(u, dtype=float), (n,))
        if role == "M":
            return np.column_stack([ones, a] + list(z.T) + [u])
        if role == "Y":
            if m is None:
                raise StructuralError(f"role Y needs a value for {self.stage2}")
            m = np.broadcast_to(np.asarray(m, dtype=float), (n,))
            am = [a * m] if self.include_am_interaction else []
            return np.column_stack([ones, a] + list(z.T) + [m] + am + [u])
        raise ValueError(f"unknown role {role!r}")


@dataclass(frozen=True)
class ParamVector:
    """Coefficient blocks (theta_U, theta_M, theta_Y) on the log-odds scale."""

    theta_u: np.ndarray
    theta_m: np.ndarray
    theta_y: np.ndarray

    def block(self, role: str) -> np.ndarray:
        return {"U": self.theta_u, "M": self.theta_m, "Y": self.theta_y}[role]

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.theta_u, self.theta_m, self.theta_y]).astype(float)

    @classmethod
    def from_named(cls, spec: ModelSpec, values: Mapping[str, float]) -> "ParamVector":
        """Build from a name -> value mapping; unnamed coefficients are zero."""
        unknown = set(values) - set(spec.names())
        if unknown:
            raise KeyError(f"unknown coefficient names: {sorted(unknown)}")
        flat = np.array([float(values.get(n, 0.0)) for n in spec.names()])
        return spec.unflatten(flat)


def linear_predictor(role: str, row: Mapping, theta: ParamVector, spec: ModelSpec) -> float:
    """Linear predictor of one row for the U, M or Y model.

    ``row`` maps ``"z"`` to the covariate vector and ``"a"``, ``"m"`` (or
    ``"a2"``), ``"u"`` to scalars. Missing parents raise StructuralError.
    """
    needed = {"U": ("z", "a"), "M": ("z", "a", "u"), "Y": ("z", "a", spec.stage2, "u")}[role]
    if role == "U" and not spec.u_exposure_induced:
        needed = ("z",)
    missing = [k for k in needed if row.get(k) is None]
    if missing:
        raise StructuralError(f"row lacks parent(s) {missing} required by role {role}")
    x = spec.design(role, [row["z"]], row.get("a", 0), m=row.get(spec.stage2), u=row.get("u"))[0]
    return float(x @ theta.block(role))


@dataclass(frozen=True, eq=False)
class Dataset:
    """Rectangular binary data: covariates z (n x p), exposure a, outcome y.

    ``m`` is the mediator; ``u`` is present only in external data; ``a2`` is
    the second exposure of the time-varying structure.
    """

    z: np.ndarray
    a: np.ndarray
    y: np.ndarray
    m: np.ndarray | None = None
    u: np.ndarray | None = None
    a2: np.ndarray | None = None

    def __post_init__(self):
        z = np.asarray(self.z, dtype=np.int64)
        if z.ndim == 1:
            z = z.reshape(-1, 1)
        object.__setattr__(self, "z", z)
        n = z.shape[0]
        if n < 1:
            raise ValueError("dataset needs at least one row")
        for name in ("a", "y", "m", "u", "a2"):
            col = getattr(self, name)
            if col is None:
                continue
            col = np.asarray(col, dtype=np.int64).reshape(-1)
            if col.shape[0] != n:
                raise ValueError(f"column {name} has length {col.shape[0]}, expected {n}")
            if not np.all((col == 0) | (col == 1)):
                raise ValueError(f"column {name} must be binary 0/1")
            object.__setattr__(self, name, col)
        if self.m is None and self.a2 is None:
            raise ValueError("dataset needs an m or a2 column")

    @property
    def n(self) -> int:
        return self.z.shape[0]

    @property
    def z_dim(self) -> int:
        return self.z.shape[1]

    def stage2(self, spec: ModelSpec) -> np.ndarray:
        col = self.a2 if spec.structure == "tvc" else self.m
        if col is None:
            raise StructuralError(f"dataset lacks the {spec.stage2} column")
        return col

    def drop_u(self) -> "Dataset":
        return Dataset(self.z, self.a, self.y, m=self.m, u=None, a2=self.a2)

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        pick = lambda c: None if c is None else c[idx]
        return Dataset(self.z[idx], self.a[idx], self.y[idx], m=pick(self.m), u=pick(self.u), a2=pick(self.a2))

    def columns(self) -> dict[str, np.ndarray]:
        out = {f"z{j + 1}": self.z[:, j] for j in range(self.z_dim)}
        for name in ("a", "m", "y", "u", "a2"):
            col = getattr(self, name)
            if col is not None:
                out[name] = col
        return out

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        a, b = self.columns(), other.columns()
        return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


@dataclass(frozen=True, eq=False)
class CovariatePatternTable:
    """Distinct covariate patterns with their counts ``xi``.

    ``index[i]`` is the pattern of row ``i`` of the source dataset.
    """

    patterns: np.ndarray
    xi: np.ndarray
    index: np.ndarray

    @classmethod
    def from_dataset(cls, data: Dataset) -> "CovariatePatternTable":
        patterns, index, xi = np.unique(data.z, axis=0, return_inverse=True, return_counts=True)
        return cls(patterns, xi.astype(np.int64), index.reshape(-1))

    @property
    def k(self) -> int:
        return self.patterns.shape[0]

    @property
    def n(self) -> int:
        return int(self.xi.sum())


_REGIME_KINDS = ("set_A", "set_A_and_M", "randomized_M", "set_A1_A2")


@dataclass(frozen=True)
class Regime:
    """An intervention rule.

    * ``set_A``: A := a, mediator follows its natural course under a.
    * ``set_A_and_M``: A := a, M := m (``levels = (a, m)``).
    * ``randomized_M``: A := a, M drawn from its distribution given Z under
      exposure ``mediator_law``.
    * ``set_A1_A2``: both exposures of the time-varying structure fixed.
    """

    kind: str
    levels: tuple[int, ...]
    mediator_law: int | None = None

    def __post_init__(self):
        if self.kind not in _REGIME_KINDS:
            raise ValueError(f"unsupported regime kind {self.kind!r}")
        want = {"set_A": 1, "set_A_and_M": 2, "randomized_M": 1, "set_A1_A2": 2}[self.kind]
        levels = tuple(int(v) for v in self.levels)
        if len(levels) != want or any(v not in (0, 1) for v in levels):
            raise ValueError(f"{self.kind} needs {want} binary level(s), got {self.levels}")
        object.__setattr__(self, "levels", levels)
        if self.kind == "randomized_M":
            if self.mediator_law not in (0, 1):
                raise ValueError("randomized_M needs exactly one mediator-law exposure level")
        elif self.mediator_law is not None:
            raise ValueError(f"{self.kind} takes no mediator law")

    @classmethod
    def set_a(cls, a):
        return cls("set_A", (a,))

    @classmethod
    def set_a_and_m(cls, a, m):
        return cls("set_A_and_M", (a, m))

    @classmethod
    def randomized_m(cls, a, law):
        return cls("randomized_M", (a,), mediator_law=law)

    @classmethod
    def set_a1_a2(cls, a1, a2):
        return cls("set_A1_A2", (a1, a2))

    def key(self) -> int:
        """Stable integer identifying the regime, used to derive RNG streams."""
        k = _REGIME_KINDS.index(self.kind)
        law = 0 if self.mediator_law is None else self.mediator_law + 1
        lv = self.levels + (0,) * (2 - len(self.levels))
        return 1000 + 100 * k + 10 * law + 2 * lv[0] + lv[1]
