"""Step-up engine and the mean-testing procedure catalog."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corr import CorrelationMatrix, ShiftProfile, TauRule, select_tau, tau_profile
from .dist import CHISQ1, DistributionKind
from .shift import CriticalConstants, calibrate, linear_constants, log_shift_pvalues, shift_pvalues

__all__ = [
    "StepUpResult",
    "step_up",
    "shifted_step_up",
    "bh",
    "by",
    "gsbh",
    "sbh1",
    "sbh2",
    "storey_pi0",
    "z_pvalues",
    "t_pvalues",
    "GSBH_RULES",
    "MEAN_PROCEDURES",
    "run_procedure",
]

GSBH_RULES = {
    "gsbh1": TauRule.MIN,
    "gsbh2": TauRule.MAX,
    "gsbh3": TauRule.MEDIAN,
    "gsbh4": TauRule.ARITH_MEAN,
    "gsbh5": TauRule.GEO_MEAN,
    "gsbh6": TauRule.HARM_MEAN,
}
MEAN_PROCEDURES = ("bh", "by", *GSBH_RULES, "sbh1", "sbh2", "sbh2new")
SBH2_FRACTION = 0.9


@dataclass(frozen=True)
class StepUpResult:
    R: int
    rejected: np.ndarray
    threshold: float

    def __post_init__(self):
        self.rejected.setflags(write=False)

    def as_set(self) -> frozenset:
        return frozenset(int(i) for i in self.rejected)


def step_up(values, constants) -> StepUpResult:
    """Reject every hypothesis whose value is at most ``value_(R)`` where
    ``R = max{i : value_(i) <= alpha_i}``.

    ``constants`` is a :class:`CriticalConstants` or a nondecreasing array.
    """
    values = np.asarray(values, dtype=float)
    alphas = constants.alphas if isinstance(constants, CriticalConstants) else np.asarray(constants, dtype=float)
    if values.ndim != 1 or values.shape != alphas.shape:
        raise ValueError(f"got {values.size} values for {alphas.size} critical constants")
    if np.any(np.diff(alphas) < 0):
        raise ValueError("critical constants must be nondecreasing")
    ordered = np.sort(values)
    hits = np.flatnonzero(ordered <= alphas)
    if hits.size == 0:
        return StepUpResult(0, np.empty(0, dtype=int), 0.0)
    R = int(hits[-1]) + 1
    threshold = float(ordered[R - 1])
    rejected = np.flatnonzero(values <= threshold)
    return StepUpResult(int(rejected.size), rejected, threshold)


def shifted_step_up(p, tau, constants: CriticalConstants, dist: DistributionKind = CHISQ1,
                    keep=None) -> StepUpResult:
    """Step-up of the shifted p-values ``sf(isf(p) / tau)`` against ``constants``.

    ``tau`` is a scalar or per-coordinate vector. Coordinates with
    ``keep == False`` are set to one before the step-up. When the constants
    underflow the comparison runs on logarithms; the reported threshold is
    then ``exp`` of the log threshold and may be zero.
    """
    p = np.asarray(p, dtype=float)
    if not constants.needs_log:
        values = shift_pvalues(p, tau, dist)
        if keep is not None:
            values = np.where(keep, values, 1.0)
        return step_up(values, constants)
    values = log_shift_pvalues(p, tau, dist)
    if keep is not None:
        values = np.where(keep, values, 0.0)
    res = step_up(values, constants.log_alphas)
    if res.R == 0:
        return res
    return StepUpResult(res.R, res.rejected, float(np.exp(res.threshold)))


def bh(p, alpha: float) -> StepUpResult:
    p = np.asarray(p, dtype=float)
    d = p.size
    return step_up(p, linear_constants(alpha / d, d, alpha))


def by(p, alpha: float) -> StepUpResult:
    p = np.asarray(p, dtype=float)
    d = p.size
    harmonic = float(np.sum(1.0 / np.arange(1, d + 1)))
    return step_up(p, linear_constants(alpha / (d * harmonic), d, alpha))


def _as_profile(sigma) -> ShiftProfile:
    if isinstance(sigma, ShiftProfile):
        return sigma
    if not isinstance(sigma, CorrelationMatrix):
        sigma = CorrelationMatrix(sigma)
    return tau_profile(sigma)


def gsbh(p, sigma, alpha: float, rule: TauRule | str = TauRule.MEDIAN,
         dist: DistributionKind = CHISQ1, fraction: float = SBH2_FRACTION) -> StepUpResult:
    """Generalized shifted BH on raw two-sided p-values.

    ``sigma`` is the correlation matrix of the test statistics (or its
    precomputed :class:`ShiftProfile`). The global shift comes from ``rule``;
    p-values are shifted by it and compared with ``i * H^-1(alpha/d)``.
    """
    profile = _as_profile(sigma)
    p = np.asarray(p, dtype=float)
    if p.size != profile.d:
        raise ValueError("p-value vector and correlation matrix differ in dimension")
    tau = select_tau(profile, rule, fraction)
    constants = calibrate(alpha, profile, tau, dist, "gsbh")
    return shifted_step_up(p, tau, constants, dist)


def sbh1(p, sigma, alpha: float, dist: DistributionKind = CHISQ1) -> StepUpResult:
    """Each p-value shifted by its own ``tau_i``; constants from the averaged bound."""
    profile = _as_profile(sigma)
    p = np.asarray(p, dtype=float)
    if p.size != profile.d:
        raise ValueError("p-value vector and correlation matrix differ in dimension")
    constants = calibrate(alpha, profile, None, dist, "sbh1")
    return shifted_step_up(p, profile.tau, constants, dist)


def sbh2(p, sigma, alpha: float, variant: str = "new", dist: DistributionKind = CHISQ1,
         fraction: float = SBH2_FRACTION) -> StepUpResult:
    """``variant="new"`` shifts by ``lambda_min``; ``"orig"`` by ``fraction * lambda_min``."""
    if variant == "new":
        return gsbh(p, sigma, alpha, TauRule.LAMBDA_MIN, dist)
    if variant == "orig":
        return gsbh(p, sigma, alpha, TauRule.LAMBDA_MIN_FRACTION, dist, fraction)
    raise ValueError(f"unknown SBH2 variant {variant!r}")


def storey_pi0(p, lam: float = 0.5) -> float:
    """Storey's null-proportion estimate ``min(1, (1 + #{p > lam}) / (d (1 - lam)))``."""
    if not 0 < lam < 1:
        raise ValueError("lambda must lie in (0, 1)")
    p = np.asarray(p, dtype=float)
    return min(1.0, (1.0 + np.count_nonzero(p > lam)) / (p.size * (1.0 - lam)))


def z_pvalues(x) -> np.ndarray:
    """Two-sided z-test p-values ``Pr(chi2_1 >= x_i**2)``."""
    return CHISQ1.sf(np.asarray(x, dtype=float) ** 2)


def t_pvalues(x, V: float, nu: int) -> np.ndarray:
    """Two-sided t-test p-values with ``V ~ chi2_nu`` independent of ``x``."""
    if not V > 0:
        raise ValueError("V must be positive")
    return DistributionKind(int(nu)).sf(np.asarray(x, dtype=float) ** 2 / V)


def run_procedure(name: str, p, profile: ShiftProfile | None, alpha: float,
                  dist: DistributionKind = CHISQ1, fraction: float = SBH2_FRACTION) -> StepUpResult:
    """Dispatch by catalog name (``bh``, ``by``, ``gsbh1``..``gsbh6``,
    ``sbh1``, ``sbh2``, ``sbh2new``)."""
    name = name.lower()
    if name == "bh":
        return bh(p, alpha)
    if name == "by":
        return by(p, alpha)
    if profile is None:
        raise ValueError(f"procedure {name!r} needs a correlation profile")
    if name in GSBH_RULES:
        return gsbh(p, profile, alpha, GSBH_RULES[name], dist)
    if name == "sbh1":
        return sbh1(p, profile, alpha, dist)
    if name == "sbh2":
        return sbh2(p, profile, alpha, "orig", dist, fraction)
    if name == "sbh2new":
        return sbh2(p, profile, alpha, "new", dist)
    raise ValueError(f"unknown procedure {name!r}; expected one of {MEAN_PROCEDURES}")
