"""Variable selection in the Gaussian linear model.

OLS inference, equi-correlated fixed-design knockoffs, the split of the OLS
estimator into two independent parts, the paired p-values built from them,
and the selection procedures that combine the two sets.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corr import ShiftProfile, TauRule, normalize_to_correlation, select_tau, tau_profile
from .dist import CHISQ1, DistributionKind
from .procedures import SBH2_FRACTION, StepUpResult, bh, by, shifted_step_up, storey_pi0
from .shift import calibrate

__all__ = [
    "RankDeficientError",
    "RegressionData",
    "KnockoffAugmentation",
    "FissionPair",
    "PairedPValues",
    "standardize_columns",
    "ols_fit",
    "coefficient_pvalues",
    "construct_knockoffs",
    "fission",
    "paired_pvalues",
    "beta1_profile",
    "bbh",
    "adapt_bbh",
    "sbbh",
    "rev_bbh",
    "bby",
    "bh_independent",
    "knockoff_statistics",
    "knockoff_filter",
    "SBBH_VARIANTS",
    "PAIRED_PROCEDURES",
    "run_paired_procedure",
]

_GRAM_TOL = 1e-8
_RANK_TOL = 1e-10

SBBH_VARIANTS = {
    "sbbh1": "per_i",
    "sbbh2": TauRule.LAMBDA_MIN_FRACTION,
    "sbbh3": TauRule.MIN,
    "sbbh4": TauRule.MEDIAN,
    "sbbh5": TauRule.HARM_MEAN,
}
PAIRED_PROCEDURES = (
    "bh_indep", "bbh", "adapt_bbh", *SBBH_VARIANTS, "knockoff", "knockoff_plus", "rev_bbh", "bby",
)


class RankDeficientError(np.linalg.LinAlgError):
    pass


def standardize_columns(X) -> np.ndarray:
    """Scale every column to unit Euclidean norm."""
    X = np.asarray(X, dtype=float)
    norms = np.linalg.norm(X, axis=0)
    if np.any(norms == 0):
        raise RankDeficientError("design has an all-zero column")
    return X / norms


@dataclass(frozen=True)
class RegressionData:
    X: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        Y = np.asarray(self.Y, dtype=float)
        if X.ndim != 2 or Y.shape != (X.shape[0],):
            raise ValueError("X must be n x d and Y an n-vector")
        n, d = X.shape
        if n <= d:
            raise RankDeficientError(f"need n > d, got n={n}, d={d}")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @classmethod
    def standardized(cls, X, Y) -> "RegressionData":
        return cls(standardize_columns(X), Y)

    def gram(self) -> np.ndarray:
        return self.X.T @ self.X


def _solve_spd(A, B):
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        raise RankDeficientError("Gram matrix is not positive definite (rank deficient design)") from exc
    return np.linalg.solve(L.T, np.linalg.solve(L, B))


def _check_rank(X):
    s = np.linalg.svd(X, compute_uv=False)
    if s[-1] <= _RANK_TOL * s[0]:
        raise RankDeficientError(f"design matrix is rank deficient (rank < {X.shape[1]})")


def ols_fit(data: RegressionData):
    """Return ``(beta_hat, eta2_hat, nu)`` with ``nu = n - d``."""
    X, Y = data.X, data.Y
    _check_rank(X)
    # QR keeps the residual accurate when Y lies (almost) in col(X)
    Q, R = np.linalg.qr(X)
    qy = Q.T @ Y
    beta = np.linalg.solve(R, qy)
    nu = data.n - data.d
    rss = max(0.0, float(Y @ Y - qy @ qy))
    return beta, rss / nu, nu


def coefficient_pvalues(beta_hat, A, eta2_hat: float | None = None, nu: int | None = None) -> np.ndarray:
    """Two-sided p-values of the OLS coefficients.

    With ``eta2_hat=None`` the noise variance is taken as known and equal to one.
    """
    beta_hat = np.asarray(beta_hat, dtype=float)
    diag = np.diag(np.linalg.inv(A))
    if eta2_hat is None:
        return CHISQ1.sf(beta_hat ** 2 / diag)
    return DistributionKind(int(nu)).sf(beta_hat ** 2 / (diag * nu * eta2_hat))


@dataclass(frozen=True)
class KnockoffAugmentation:
    X_tilde: np.ndarray
    s: np.ndarray

    @property
    def D(self) -> np.ndarray:
        return np.diag(self.s)

    def residuals(self, X) -> tuple[float, float]:
        """Frobenius residuals of ``Xt'Xt = A`` and ``X'Xt = A - D``."""
        A = X.T @ X
        Xt = self.X_tilde
        return (float(np.linalg.norm(Xt.T @ Xt - A)), float(np.linalg.norm(X.T @ Xt - (A - self.D))))


def equi_s(A) -> np.ndarray:
    lam = float(np.linalg.eigvalsh(A)[0])
    return np.full(A.shape[0], min(2.0 * lam, 1.0) * 0.999)


def construct_knockoffs(data: RegressionData, s=None) -> KnockoffAugmentation:
    """Fixed-design knockoffs ``X A^-1 (A - D) + U C``.

    ``U`` spans ``d`` directions orthogonal to ``col(X)`` and ``C'C = 2D - D A^-1 D``.
    ``s=None`` uses the equi-correlated choice ``min(2 lambda_min(A), 1) * 0.999``.
    """
    X = data.X
    n, d = X.shape
    if n < 2 * d:
        raise ValueError(f"knockoff construction needs n >= 2d, got n={n}, d={d}")
    _check_rank(X)
    A = X.T @ X
    s = equi_s(A) if s is None else np.broadcast_to(np.asarray(s, dtype=float), (d,)).copy()
    if np.any(s <= 0):
        raise ValueError("knockoff s-vector must be positive")
    D = np.diag(s)
    A_inv_D = _solve_spd(A, D)
    G = 2.0 * D - D @ A_inv_D
    G = 0.5 * (G + G.T)
    try:
        C = np.linalg.cholesky(G).T
    except np.linalg.LinAlgError as exc:
        raise ValueError("2D - D A^-1 D is not positive definite; s is too large") from exc
    Q, _ = np.linalg.qr(X, mode="complete")
    U = Q[:, d:2 * d]
    X_tilde = X - X @ A_inv_D + U @ C
    aug = KnockoffAugmentation(X_tilde, s)
    r1, r2 = aug.residuals(X)
    if r1 > _GRAM_TOL or r2 > _GRAM_TOL:
        raise ArithmeticError(f"knockoff Gram identities violated ({r1:.3g}, {r2:.3g})")
    return aug


@dataclass(frozen=True)
class FissionPair:
    beta1: np.ndarray
    beta2: np.ndarray
    cov1: np.ndarray  # (2A - D)^-1; Cov(beta1) = 2 eta^2 cov1
    eta2_hat: float
    nu: int


def fission(data: RegressionData, aug: KnockoffAugmentation) -> FissionPair:
    """Split OLS into ``(2A - D)^-1 (X + Xt)'Y`` and ``D^-1 (X - Xt)'Y``."""
    X, Y, Xt = data.X, data.Y, aug.X_tilde
    plus, minus = X + Xt, X - Xt
    cert = float(np.linalg.norm(plus.T @ minus))
    if cert > _GRAM_TOL:
        raise ArithmeticError(f"fission independence certificate failed ({cert:.3g})")
    A = X.T @ X
    M = 2.0 * A - np.diag(aug.s)
    cov1 = _solve_spd(M, np.eye(data.d))
    beta1 = cov1 @ (plus.T @ Y)
    beta2 = (minus.T @ Y) / aug.s
    _, eta2, nu = ols_fit(data)
    return FissionPair(beta1, beta2, cov1, eta2, nu)


@dataclass(frozen=True)
class PairedPValues:
    """``p1`` from the dependent half, ``p2`` from the independent half.

    ``dist`` is the reference law of ``p1`` (and of ``p2`` unless the
    chi-square form was requested for it).
    """

    p1: np.ndarray
    p2: np.ndarray
    dist: DistributionKind


def paired_pvalues(pair: FissionPair, aug: KnockoffAugmentation, variance: str = "known",
                   p2_law: str = "scaledF") -> PairedPValues:
    """``variance="known"`` takes ``eta^2 = 1``; ``"estimated"`` plugs in the OLS
    residual variance. ``p2_law="chisq"`` evaluates the estimated-variance
    ``p2`` against chi-square(1) instead of the scaled F law."""
    z1 = pair.beta1 ** 2 / (2.0 * np.diag(pair.cov1))
    z2 = aug.s * pair.beta2 ** 2 / 2.0
    if variance == "known":
        return PairedPValues(CHISQ1.sf(z1), CHISQ1.sf(z2), CHISQ1)
    if variance != "estimated":
        raise ValueError(f"unknown variance mode {variance!r}")
    dist = DistributionKind(pair.nu)
    scale = pair.nu * pair.eta2_hat
    p1 = dist.sf(z1 / scale)
    if p2_law == "scaledF":
        p2 = dist.sf(z2 / scale)
    elif p2_law == "chisq":
        p2 = CHISQ1.sf(z2 / scale)
    else:
        raise ValueError(f"unknown p2 law {p2_law!r}")
    return PairedPValues(p1, p2, dist)


def beta1_profile(pair: FissionPair) -> ShiftProfile:
    """Shift profile of the correlation matrix of the dependent half."""
    return tau_profile(normalize_to_correlation(pair.cov1))


def _screened(screen, test, alpha):
    cut = np.sqrt(alpha)
    return np.where(screen <= cut, test, 1.0)


def bbh(pp: PairedPValues, alpha: float) -> StepUpResult:
    """Bonferroni screen on ``p1`` at sqrt(alpha), BH on ``p2`` at sqrt(alpha)."""
    return bh(_screened(pp.p1, pp.p2, alpha), np.sqrt(alpha))


def adapt_bbh(pp: PairedPValues, alpha: float, lam: float = 0.5) -> StepUpResult:
    pi0 = storey_pi0(pp.p2, lam)
    return bh(_screened(pp.p1, pi0 * pp.p2, alpha), np.sqrt(alpha))


def rev_bbh(pp: PairedPValues, alpha: float, mirrored: bool = False) -> StepUpResult:
    """Screen on ``p2``, BH on ``p1`` (``mirrored=True`` gives plain BBH roles)."""
    if mirrored:
        return bbh(pp, alpha)
    return bh(_screened(pp.p2, pp.p1, alpha), np.sqrt(alpha))


def bby(pp: PairedPValues, alpha: float) -> StepUpResult:
    """Bonferroni screen on ``p1``, BY on ``p2``, both at sqrt(alpha)."""
    return by(_screened(pp.p1, pp.p2, alpha), np.sqrt(alpha))


def bh_independent(pp: PairedPValues, alpha: float) -> StepUpResult:
    return bh(pp.p2, alpha)


def sbbh(pp: PairedPValues, alpha: float, profile: ShiftProfile, rule="median",
         fraction: float = SBH2_FRACTION) -> StepUpResult:
    """Shifted BBH: screen on ``p2`` at sqrt(alpha), then shifted step-up on ``p1``.

    ``rule`` is a :class:`TauRule` for a global shift, or ``"per_i"`` to
    shift each coordinate by its own ``tau_i`` (SBH1 style). ``profile``
    comes from the correlation of the dependent half, see :func:`beta1_profile`.
    """
    level = float(np.sqrt(alpha))
    if rule == "per_i":
        tau = profile.tau
        constants = calibrate(level, profile, None, pp.dist, "sbh1")
    else:
        tau = select_tau(profile, rule, fraction)
        constants = calibrate(level, profile, tau, pp.dist, "gsbh")
    return shifted_step_up(pp.p1, tau, constants, pp.dist, keep=pp.p2 <= level)


def knockoff_statistics(data: RegressionData, aug: KnockoffAugmentation) -> np.ndarray:
    """Marginal-correlation difference ``|X_j'Y| - |Xt_j'Y|``."""
    return np.abs(data.X.T @ data.Y) - np.abs(aug.X_tilde.T @ data.Y)


def knockoff_filter(W, alpha: float, plus: bool = True) -> np.ndarray:
    """Select ``{j : W_j >= T}`` with the data-dependent knockoff threshold.

    ``T`` is the smallest ``t`` among the nonzero ``|W_j|`` with
    ``(plus + #{W_j <= -t}) / max(1, #{W_j >= t}) <= alpha``.
    """
    W = np.asarray(W, dtype=float)
    offset = 1.0 if plus else 0.0
    for t in np.unique(np.abs(W[W != 0])):
        ratio = (offset + np.count_nonzero(W <= -t)) / max(1, np.count_nonzero(W >= t))
        if ratio <= alpha:
            return np.flatnonzero(W >= t)
    return np.empty(0, dtype=int)


def run_paired_procedure(name: str, pp: PairedPValues, alpha: float, profile: ShiftProfile | None = None,
                         W=None) -> np.ndarray:
    """Selected indices for a paired-procedure catalog name."""
    name = name.lower()
    if name == "bh_indep":
        return bh_independent(pp, alpha).rejected
    if name == "bbh":
        return bbh(pp, alpha).rejected
    if name == "adapt_bbh":
        return adapt_bbh(pp, alpha).rejected
    if name == "rev_bbh":
        return rev_bbh(pp, alpha).rejected
    if name == "bby":
        return bby(pp, alpha).rejected
    if name in SBBH_VARIANTS:
        if profile is None:
            raise ValueError(f"{name} needs the shift profile of the dependent half")
        return sbbh(pp, alpha, profile, SBBH_VARIANTS[name]).rejected
    if name in ("knockoff", "knockoff_plus"):
        if W is None:
            raise ValueError("knockoff filter needs the W statistics")
        return knockoff_filter(W, alpha, plus=name == "knockoff_plus")
    raise ValueError(f"unknown paired procedure {name!r}; expected one of {PAIRED_PROCEDURES}")
