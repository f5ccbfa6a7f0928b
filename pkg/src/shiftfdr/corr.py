"""Correlation structures, shift profiles and multivariate normal sampling."""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from functools import cached_property

import numpy as np

__all__ = [
    "CorrelationMatrix",
    "ShiftProfile",
    "StructureSpec",
    "TauRule",
    "make_correlation",
    "normalize_to_correlation",
    "tau_profile",
    "select_tau",
    "sample_mvn",
    "STRUCTURE_KINDS",
]

STRUCTURE_KINDS = ("identity", "equi", "ar1", "iar1", "block", "sparse", "prefixed")
_SYM_TOL = 1e-12
_COND_LIMIT = 1e12
# smallest eigenvalue the random generators are repaired up to
_REPAIR_FLOOR = 0.05


class CorrelationMatrix:
    """Symmetric positive definite matrix with unit diagonal.

    The lower Cholesky factor is computed once and cached.
    """

    def __init__(self, values, check=True):
        arr = np.array(values, dtype=float)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ValueError("correlation matrix must be square")
        self.values = arr
        self.values.setflags(write=False)
        if check:
            self._validate()

    def _validate(self):
        a = self.values
        if not np.all(np.diag(a) == 1.0):
            raise ValueError("correlation matrix must have unit diagonal")
        if np.max(np.abs(a - a.T), initial=0.0) > _SYM_TOL:
            raise ValueError("correlation matrix must be symmetric")
        if self.lambda_min <= 0:
            raise ValueError(f"correlation matrix is not positive definite (lambda_min={self.lambda_min:.3g})")

    @property
    def d(self) -> int:
        return self.values.shape[0]

    @cached_property
    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.values)

    @property
    def lambda_min(self) -> float:
        return float(self.eigenvalues[0])

    @cached_property
    def cholesky(self) -> np.ndarray:
        try:
            return np.linalg.cholesky(self.values)
        except np.linalg.LinAlgError as exc:
            raise ValueError("correlation matrix is not positive definite") from exc

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    def __repr__(self):
        return f"CorrelationMatrix(d={self.d}, lambda_min={self.lambda_min:.4g})"


@dataclass(frozen=True)
class ShiftProfile:
    """Per-coordinate shrinkage factors ``tau_i = 1 - R_i**2`` and ``lambda_min``."""

    tau: np.ndarray
    lambda_min: float

    def __post_init__(self):
        tau = np.asarray(self.tau, dtype=float)
        if tau.ndim != 1 or tau.size == 0:
            raise ValueError("tau must be a nonempty vector")
        if np.any(~((tau > 0) & (tau <= 1))):
            raise ValueError("tau entries must lie in (0, 1]")
        if not self.lambda_min > 0:
            raise ValueError("lambda_min must be positive")
        tau = tau.copy()
        tau.setflags(write=False)
        object.__setattr__(self, "tau", tau)

    @property
    def d(self) -> int:
        return self.tau.size

    @classmethod
    def independent(cls, d: int) -> "ShiftProfile":
        return cls(np.ones(d), 1.0)

    def key(self) -> tuple:
        return (tuple(self.tau.tolist()), self.lambda_min)


@dataclass(frozen=True)
class StructureSpec:
    """Recipe for one of the simulation correlation structures.

    ``rho`` is the correlation parameter of ``equi``/``ar1``/``iar1`` and the
    within-block correlation of ``block``. ``density`` and ``fraction`` drive
    the random ``sparse`` and ``prefixed`` generators, which also need a seed.
    """

    kind: str
    d: int
    rho: float | None = None
    block_size: int = 4
    density: float = 0.2
    fraction: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.kind not in STRUCTURE_KINDS:
            raise ValueError(f"unknown structure kind {self.kind!r}; expected one of {STRUCTURE_KINDS}")
        if int(self.d) != self.d or self.d < 2:
            raise ValueError("structure dimension d must be an integer >= 2")
        if self.kind in ("equi", "ar1", "iar1", "block"):
            if self.rho is None:
                object.__setattr__(self, "rho", 0.5 if self.kind == "block" else None)
            if self.rho is None or not -1 < self.rho < 1:
                raise ValueError(f"structure {self.kind!r} needs rho in (-1, 1)")

    @property
    def label(self) -> str:
        return self.kind

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "d": self.d}
        if self.kind in ("equi", "ar1", "iar1", "block"):
            out["rho"] = self.rho
        if self.kind == "block":
            out["block_size"] = self.block_size
        if self.kind == "sparse":
            out["density"] = self.density
            out["seed"] = self.seed
        if self.kind == "prefixed":
            out["fraction"] = self.fraction
            out["seed"] = self.seed
        return out


def normalize_to_correlation(m) -> np.ndarray:
    """Rescale a covariance-like matrix to unit diagonal, ``D^-1/2 M D^-1/2``."""
    m = np.asarray(m, dtype=float)
    scale = 1.0 / np.sqrt(np.diag(m))
    out = m * scale[:, None] * scale[None, :]
    out = 0.5 * (out + out.T)
    np.fill_diagonal(out, 1.0)
    return out


def _equi(d, rho):
    out = np.full((d, d), float(rho))
    np.fill_diagonal(out, 1.0)
    return out


def _ar1(d, rho):
    idx = np.arange(d)
    return float(rho) ** np.abs(idx[:, None] - idx[None, :])


def _repair(raw):
    lam = np.linalg.eigvalsh(raw)[0]
    delta = max(0.0, _REPAIR_FLOOR - lam)
    return normalize_to_correlation(raw + delta * np.eye(raw.shape[0]))


def _sparse(d, density, rng):
    iu = np.triu_indices(d, k=1)
    n_pairs = iu[0].size
    n_nonzero = max(1, int(round(density * n_pairs)))
    chosen = rng.choice(n_pairs, size=n_nonzero, replace=False)
    raw = np.eye(d)
    vals = rng.uniform(-0.5, 0.5, size=n_nonzero)
    raw[iu[0][chosen], iu[1][chosen]] = vals
    raw[iu[1][chosen], iu[0][chosen]] = vals
    return _repair(raw)


def _prefixed(d, fraction, rng):
    k = max(1, math.ceil(fraction * d))
    rows = np.sort(rng.choice(d, size=k, replace=False))
    raw = np.zeros((d, d))
    raw[rows, :] = rng.uniform(-0.5, 0.5, size=(k, d))
    raw = np.where(raw != 0, raw, raw.T)
    # both rows chosen: keep the upper-triangle draw
    both = np.zeros((d, d), dtype=bool)
    both[np.ix_(rows, rows)] = True
    upper = np.triu(raw)
    raw = np.where(both, upper + upper.T, raw)
    np.fill_diagonal(raw, 1.0)
    return _repair(raw)


def make_correlation(spec: StructureSpec) -> CorrelationMatrix:
    d = spec.d
    if spec.kind == "identity":
        raw = np.eye(d)
    elif spec.kind == "equi":
        raw = _equi(d, spec.rho)
    elif spec.kind == "ar1":
        raw = _ar1(d, spec.rho)
    elif spec.kind == "iar1":
        raw = normalize_to_correlation(np.linalg.inv(_ar1(d, spec.rho)))
    elif spec.kind == "block":
        raw = np.eye(d)
        for start in range(0, d, spec.block_size):
            stop = min(d, start + spec.block_size)
            raw[start:stop, start:stop] = _equi(stop - start, spec.rho)
    elif spec.kind == "sparse":
        raw = _sparse(d, spec.density, np.random.default_rng(spec.seed))
    else:
        raw = _prefixed(d, spec.fraction, np.random.default_rng(spec.seed))
    return CorrelationMatrix(raw)


def tau_profile(sigma) -> ShiftProfile:
    """``tau_i = 1 / (Sigma^-1)_ii``, i.e. one minus the squared multiple correlation."""
    if not isinstance(sigma, CorrelationMatrix):
        sigma = CorrelationMatrix(sigma)
    eig = sigma.eigenvalues
    if eig[-1] / eig[0] > _COND_LIMIT:
        raise np.linalg.LinAlgError(f"correlation matrix is numerically singular (condition {eig[-1] / eig[0]:.3g})")
    precision = np.linalg.inv(sigma.values)
    tau = np.minimum(1.0 / np.diag(precision), 1.0)
    return ShiftProfile(tau, float(eig[0]))


class TauRule(str, Enum):
    MIN = "min"
    MAX = "max"
    MEDIAN = "median"
    ARITH_MEAN = "mean"
    GEO_MEAN = "geomean"
    HARM_MEAN = "harmean"
    LAMBDA_MIN = "lambda_min"
    LAMBDA_MIN_FRACTION = "lambda_min_fraction"


def select_tau(profile: ShiftProfile, rule: TauRule | str, fraction: float = 0.9) -> float:
    """Global shift chosen from the profile.

    ``fraction`` is only used by ``LAMBDA_MIN_FRACTION`` (returns
    ``fraction * lambda_min``).
    """
    rule = TauRule(rule)
    tau = profile.tau
    if rule is TauRule.LAMBDA_MIN:
        return min(1.0, profile.lambda_min)
    if rule is TauRule.LAMBDA_MIN_FRACTION:
        if not 0 < fraction < 1:
            raise ValueError("fraction must lie in (0, 1)")
        return fraction * min(1.0, profile.lambda_min)
    lo, hi = float(tau.min()), float(tau.max())
    if lo == hi:
        return lo
    if rule is TauRule.MIN:
        return lo
    if rule is TauRule.MAX:
        return hi
    if rule is TauRule.MEDIAN:
        value = float(np.median(tau))
    elif rule is TauRule.ARITH_MEAN:
        value = float(np.mean(tau))
    elif rule is TauRule.GEO_MEAN:
        value = float(np.exp(np.mean(np.log(tau))))
    else:
        value = float(tau.size / np.sum(1.0 / tau))
    return min(max(value, lo), hi)


def sample_mvn(sigma: CorrelationMatrix, mu, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Draw ``mu + L z`` with ``L`` the cached lower Cholesky factor.

    With ``size`` given, returns a ``(size, d)`` array of independent rows.
    """
    mu = np.asarray(mu, dtype=float)
    if mu.shape != (sigma.d,):
        raise ValueError(f"mean vector must have length {sigma.d}")
    chol = sigma.cholesky
    if size is None:
        return mu + chol @ rng.standard_normal(sigma.d)
    z = rng.standard_normal((size, sigma.d))
    return mu + z @ chol.T
