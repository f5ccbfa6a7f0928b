"""Shifted p-values and the calibration of shifted step-up constants.

Notation used below: ``sf`` is the survival function of the reference law
(chi-square(1) or scaled F, see :class:`shiftfdr.dist.DistributionKind`) and
``isf`` its inverse. For a shift factor ``t``

    H_t(u) = sf(t * isf(u))

is the null CDF of a p-value whose statistic was shrunk by ``t``; ``t <= 1``
gives a concave map above the diagonal.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import optimize

from .corr import ShiftProfile
from .dist import CHISQ1, DistributionKind

__all__ = [
    "CalibrationError",
    "CriticalConstants",
    "ShiftedPValues",
    "h_tau",
    "shift_pvalue",
    "shift_pvalues",
    "per_i_shifted",
    "log_shift_pvalues",
    "h_mixture",
    "h_sbh1",
    "h_inverse",
    "log_h_inverse",
    "LINEAR_FLOOR",
    "calibrate",
    "minorant_pvalue",
]

METHODS = ("gsbh", "sbh1")


class CalibrationError(ArithmeticError):
    """The requested FDR level cannot be reached by the calibration map."""


def _out(arr, like):
    return float(arr) if np.ndim(like) == 0 else arr


def _check_open_unit(u, name="u"):
    arr = np.asarray(u, dtype=float)
    if np.any(~((arr > 0) & (arr < 1))):
        raise ValueError(f"{name} must lie strictly inside (0, 1)")
    return arr


def _check_tau(tau):
    tau = float(tau)
    if not tau > 0:
        raise ValueError("shift factor tau must be positive")
    return tau


def _h(u, t, dist):
    # unvalidated H_t on the closed unit interval
    if t == 1.0:
        return np.asarray(u, dtype=float)
    return dist.sf(t * dist.isf(u))


def h_tau(u, tau, dist: DistributionKind = CHISQ1):
    """``sf(tau * isf(u))``; identity at ``tau == 1``, above ``u`` for ``tau < 1``.

    ``tau > 1`` is accepted as well (the mixture function needs ratios above one).
    """
    arr = _check_open_unit(u)
    return _out(_h(arr, _check_tau(tau), dist), u)


def shift_pvalue(p, tau, dist: DistributionKind = CHISQ1):
    """Move a two-sided p-value left: ``sf(isf(p) / tau)``.

    Exact zeros and ones are fixed points.
    """
    tau = _check_tau(tau)
    arr = np.asarray(p, dtype=float)
    if np.any(np.isnan(arr)) or np.any((arr < 0) | (arr > 1)):
        raise ValueError("p-values must lie in [0, 1]")
    if tau == 1.0:
        return _out(arr.copy(), p)
    out = dist.sf(dist.isf(arr) / tau)
    if tau < 1.0:
        # rounding in the sf/isf pair must not push the value right
        out = np.minimum(out, arr)
    return _out(out, p)


def shift_pvalues(p, tau, dist: DistributionKind = CHISQ1) -> np.ndarray:
    """Elementwise shift with a scalar or per-coordinate ``tau``."""
    p = np.asarray(p, dtype=float)
    tau = np.broadcast_to(np.asarray(tau, dtype=float), p.shape)
    if np.any(~(tau > 0)):
        raise ValueError("shift factors must be positive")
    if np.any(np.isnan(p)) or np.any((p < 0) | (p > 1)):
        raise ValueError("p-values must lie in [0, 1]")
    out = p.copy()
    moved = tau != 1.0
    if moved.any():
        out[moved] = dist.sf(dist.isf(p[moved]) / tau[moved])
    return np.where(tau < 1.0, np.minimum(out, p), out)


def per_i_shifted(p, profile: ShiftProfile, dist: DistributionKind = CHISQ1) -> np.ndarray:
    """Shift every coordinate by its own ``tau_i``."""
    p = np.asarray(p, dtype=float)
    if p.shape != profile.tau.shape:
        raise ValueError("p-value vector and profile differ in length")
    return shift_pvalues(p, profile.tau, dist)


@dataclass(frozen=True)
class ShiftedPValues:
    raw: np.ndarray
    shifted: np.ndarray
    tau_used: float | None
    dist: DistributionKind
    profile: ShiftProfile | None = None


def log_shift_pvalues(p, tau, dist: DistributionKind = CHISQ1) -> np.ndarray:
    """``log`` of :func:`shift_pvalues`, finite even where the shifted values underflow."""
    p = np.asarray(p, dtype=float)
    tau = np.broadcast_to(np.asarray(tau, dtype=float), p.shape)
    if np.any(~(tau > 0)):
        raise ValueError("shift factors must be positive")
    if np.any(np.isnan(p)) or np.any((p < 0) | (p > 1)):
        raise ValueError("p-values must lie in [0, 1]")
    with np.errstate(divide="ignore"):
        out = np.log(p)
    moved = tau != 1.0
    if moved.any():
        logp = out[moved]
        shifted = dist.logsf(dist.isf_log(logp) / tau[moved])
        out[moved] = np.where(tau[moved] < 1.0, np.minimum(shifted, logp), shifted)
    return out


def _log_h(logu, t, dist):
    # log H_t on log-probabilities; t may be a vector
    t = np.asarray(t, dtype=float)
    if t.ndim == 0 and t == 1.0:
        return np.asarray(logu, dtype=float)
    out = dist.logsf(t * dist.isf_log(logu))
    return np.where(t == 1.0, logu, out)


def _logsumexp(a):
    # scipy's version carries array-API overhead that dominates on short vectors
    top = np.max(a)
    if not np.isfinite(top):
        return float(top)
    return float(top + np.log(np.sum(np.exp(a - top))))


def _log_h_mixture(v, tau_i, tau, dist):
    d = tau_i.size
    strong = tau_i >= tau
    n_strong = int(strong.sum())
    parts = []
    if n_strong:
        parts.append([np.log(n_strong) + float(_log_h(v, tau, dist))])
    if n_strong < d:
        weak = tau_i[~strong]
        ldu = min(0.0, np.log(d) + v)
        inner = _log_h(ldu, tau / weak, dist) - np.log(d)
        parts.append(_log_h(inner, weak, dist))
    return _logsumexp(np.concatenate(parts)) - np.log(d)


def _log_h_sbh1(v, tau_i, dist):
    return _logsumexp(_log_h(v, tau_i, dist)) - np.log(tau_i.size)


def _log_args(u, upper):
    arr = np.asarray(u, dtype=float)
    if np.any(~(arr > 0)) or np.any(arr > upper * (1.0 + 1e-15)):
        raise ValueError(f"u must lie in (0, {upper:.6g}]")
    return arr, np.log(np.atleast_1d(arr).ravel())


def h_mixture(u, profile: ShiftProfile, tau: float, dist: DistributionKind = CHISQ1):
    """Calibration function of the generalized shifted BH procedure.

    Coordinates with ``tau_i >= tau`` contribute ``H_tau(u)``; the others
    contribute ``H_{tau_i}(H_{tau/tau_i}(d u) / d)``. The result is averaged
    over the ``d`` coordinates. Defined for ``u`` in ``(0, 1/d]``.
    """
    tau = _check_tau(tau)
    arr, logs = _log_args(u, 1.0 / profile.d)
    res = np.exp([_log_h_mixture(v, profile.tau, tau, dist) for v in logs])
    return _out(res.reshape(np.shape(arr)), u)


def h_sbh1(u, profile: ShiftProfile, dist: DistributionKind = CHISQ1):
    """Average of ``H_{tau_i}(u)``: the null rejection bound when each
    coordinate is shifted by its own ``tau_i``."""
    arr, logs = _log_args(u, 1.0)
    res = np.exp([_log_h_sbh1(v, profile.tau, dist) for v in logs])
    return _out(res.reshape(np.shape(arr)), u)


# residual allowed on log H at the root, i.e. a relative error on H
_ROOT_TOL = 1e-11
_LOG_FLOOR = -1e7


def h_inverse(target: float, profile: ShiftProfile, tau: float | None,
              dist: DistributionKind = CHISQ1, method: str = "gsbh") -> float:
    """Solve ``H(u) = target`` for ``u`` in ``(0, 1/d]``.

    Returns 0.0 when the root lies below the smallest positive double; use
    :func:`log_h_inverse` for the exact log value.
    """
    return float(np.exp(log_h_inverse(target, profile, tau, dist, method)))


def log_h_inverse(target: float, profile: ShiftProfile, tau: float | None,
                  dist: DistributionKind = CHISQ1, method: str = "gsbh") -> float:
    """``log`` of the root of ``H(u) = target``.

    Closed forms are used when ``H`` reduces to a single ``H_t`` (all
    coordinates on one side of the shift); otherwise Brent's method runs on
    ``log H`` as a function of ``log u``, which stays finite for very small
    shift factors.
    """
    if method not in METHODS:
        raise ValueError(f"unknown calibration method {method!r}")
    target = float(target)
    if not 0 < target < 1:
        raise ValueError("target must lie in (0, 1)")
    if method == "gsbh":
        tau = _check_tau(tau)
    return _log_h_inverse_cached(target, profile.key(), tau, dist, method)


@lru_cache(maxsize=8192)
def _log_h_inverse_cached(target, key, tau, dist, method):
    tau_i = np.asarray(key[0])
    d = tau_i.size
    log_target = np.log(target)
    if method == "gsbh":
        if np.all(tau_i >= tau):
            return _log_h_inverse_single(log_target, tau, dist)

        def fn(v):
            return _log_h_mixture(v, tau_i, tau, dist) - log_target
    else:
        if np.all(tau_i == tau_i[0]):
            return _log_h_inverse_single(log_target, float(tau_i[0]), dist)

        def fn(v):
            return _log_h_sbh1(v, tau_i, dist) - log_target

    hi = -np.log(d)
    if fn(hi) <= 0:
        raise CalibrationError(f"target {target:.6g} is not below H(1/d) = {np.exp(fn(hi) + log_target):.6g}")
    lo = min(log_target, hi)
    while fn(lo) > 0:
        lo *= 2.0
        if lo < _LOG_FLOOR:
            raise CalibrationError("could not bracket the calibration root")
    if fn(lo) == 0:
        return float(lo)
    root = optimize.brentq(fn, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)
    if abs(fn(root)) > _ROOT_TOL:
        raise CalibrationError(f"calibration root did not converge (residual {abs(fn(root)):.3g})")
    return float(root)


def _log_h_inverse_single(log_target, t, dist):
    if t == 1.0:
        return float(log_target)
    return float(dist.logsf(dist.isf_log(log_target) / t))


# below this first constant the step-up is carried out on log values
LINEAR_FLOOR = 1e-250


@dataclass(frozen=True)
class CriticalConstants:
    """Linear step-up constants ``alpha_i = i * alphas[0]``.

    ``log_step`` is ``log(alphas[0])`` and stays exact when ``alphas`` underflows.
    """

    alphas: np.ndarray
    alpha_target: float
    tilde_alpha: float
    log_step: float

    @property
    def d(self) -> int:
        return self.alphas.size

    @property
    def log_alphas(self) -> np.ndarray:
        return np.log(np.arange(1, self.d + 1)) + self.log_step

    @property
    def needs_log(self) -> bool:
        return not self.alphas[0] >= LINEAR_FLOOR


def linear_constants(step: float, d: int, alpha_target: float, log_step: float | None = None) -> CriticalConstants:
    alphas = np.arange(1, d + 1) * step
    alphas.setflags(write=False)
    if log_step is None:
        with np.errstate(divide="ignore"):
            log_step = float(np.log(step))
    return CriticalConstants(alphas, float(alpha_target), float(d * step), float(log_step))


def calibrate(alpha: float, profile: ShiftProfile, tau: float | None = None,
              dist: DistributionKind = CHISQ1, method: str = "gsbh") -> CriticalConstants:
    """Critical constants ``i * H^-1(alpha / d)``.

    ``method="gsbh"`` uses :func:`h_mixture` with global shift ``tau``;
    ``method="sbh1"`` uses :func:`h_sbh1` (per-coordinate shifts, ``tau`` ignored).
    """
    alpha = float(alpha)
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    d = profile.d
    target = alpha / d
    log_step = log_h_inverse(target, profile, tau, dist, method)
    # unshifted closed form: keep the exact BH step
    step = target if log_step == np.log(target) else float(np.exp(log_step))
    return linear_constants(step, d, alpha, log_step)


def minorant_pvalue(p_dd, tau_i: float, tau: float, tilde_alpha: float, dist: DistributionKind = CHISQ1):
    """Linear stochastic minorant of a shifted p-value for a coordinate with
    ``tau_i < tau``: ``tilde_alpha * p_dd / sf((tau / tau_i) * isf(tilde_alpha))``.

    ``p_dd`` is the p-value already shifted by the coordinate's own ``tau_i``.
    """
    tau_i = _check_tau(tau_i)
    tau = _check_tau(tau)
    if tau_i > tau:
        raise ValueError("the minorant applies to coordinates with tau_i <= tau")
    if not 0 < tilde_alpha < 1:
        raise ValueError("tilde_alpha must lie in (0, 1)")
    arr = np.asarray(p_dd, dtype=float)
    scale = tilde_alpha / float(_h(tilde_alpha, tau / tau_i, dist))
    return _out(arr * scale, p_dd)
