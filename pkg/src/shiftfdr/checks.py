"""Numeric invariant suite behind ``shiftfdr check``.

Every check reduces to a nonnegative violation compared with a tolerance.
``SHIFTFDR_TOL_SCALE`` multiplies all tolerances; a negative value makes
every check fail, which is handy for exercising the failure path.
"""
from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .corr import StructureSpec, TauRule, make_correlation, select_tau, tau_profile
from .dist import (
    CHISQ1,
    chi2_quantile_upper,
    chi2_survival,
    noncentral_chi2_survival,
    scaled_f,
    scaledF_quantile_upper,
    scaledF_survival,
)
from .regression import RegressionData, construct_knockoffs
from .shift import calibrate, h_mixture, h_sbh1

__all__ = ["CheckResult", "run_checks", "format_table", "tolerance_scale"]


@dataclass(frozen=True)
class CheckResult:
    name: str
    violation: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(self.violation <= self.tolerance)


def tolerance_scale() -> float:
    raw = os.environ.get("SHIFTFDR_TOL_SCALE", "1")
    try:
        return float(raw)
    except ValueError:
        return 1.0


def _grid(n):
    return (np.arange(1, n + 1) - 0.5) / n


def _rel(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-300)))


def _chi2_kernels(n):
    x = np.linspace(0.0, 60.0, n)
    worst = _rel(chi2_survival(x, 1), [math.erfc(math.sqrt(v / 2)) for v in x])
    worst = max(worst, _rel(chi2_survival(x, 2), np.exp(-x / 2)))
    three = [math.erfc(math.sqrt(v / 2)) + math.sqrt(2 * v / math.pi) * math.exp(-v / 2) for v in x]
    return max(worst, _rel(chi2_survival(x, 3), three))


def _scaledf_kernels(n):
    x = np.geomspace(1e-4, 1e4, n)
    # chi2_1 / chi2_1 is a squared Cauchy; exponential ratio for m = nu = 2
    worst = _rel(scaledF_survival(x, 1, 1), 1 - 2 / math.pi * np.arctan(np.sqrt(x)))
    worst = max(worst, _rel(scaledF_survival(x, 2, 2), 1 / (1 + x)))
    for nu in (10, 60):
        worst = max(worst, _rel(scaledF_survival(x, 1, nu), stats.f.sf(x * nu, 1, nu)))
    return worst


def _roundtrips(n):
    u = _grid(n)
    worst = 0.0
    for m in (1, 3, 7):
        worst = max(worst, float(np.max(np.abs(chi2_survival(chi2_quantile_upper(u, m), m) - u))))
    for nu in (10, 60):
        worst = max(worst, float(np.max(np.abs(scaledF_survival(scaledF_quantile_upper(u, 1, nu), 1, nu) - u))))
    return worst


def _second_diff_violation(values, sign):
    # sign=+1: concave (second differences <= 0); sign=-1: convex
    d2 = sign * np.diff(values, 2)
    return max(0.0, float(np.max(d2)))


def _concavity_chi2(n):
    u = _grid(n)
    worst = 0.0
    for m in (1, 3):
        q = chi2_quantile_upper(u, m)
        for h in (0, 2):
            for theta in (0.2, 0.5, 0.9, 1.0):
                worst = max(worst, _second_diff_violation(chi2_survival(theta * q, m + h), +1))
        for theta in (1.5, 3.0):
            worst = max(worst, _second_diff_violation(chi2_survival(theta * q, m), -1))
    return worst


def _concavity_scaledf(n):
    u = _grid(n)
    worst = 0.0
    for nu in (10, 60):
        q = scaledF_quantile_upper(u, 1, nu)
        for h in (0, 2):
            for theta in (0.2, 0.5, 0.9):
                worst = max(worst, _second_diff_violation(scaledF_survival(theta * q, 1 + h, nu), +1))
        for theta in (1.5, 3.0):
            worst = max(worst, _second_diff_violation(scaledF_survival(theta * q, 1, nu), -1))
    return worst


def _tp2_ratio(n):
    """``sf(x q(u')) / sf(x q(u))`` is nondecreasing in ``x`` for ``u < u'``."""
    x = np.linspace(0.01, 5.0, n)
    worst = 0.0
    for dist in (CHISQ1, scaled_f(20)):
        for u, u2 in ((0.01, 0.05), (0.05, 0.5), (0.2, 0.9)):
            q, q2 = dist.isf(u), dist.isf(u2)
            log_ratio = dist.logsf(x * q2) - dist.logsf(x * q)
            worst = max(worst, max(0.0, float(-np.min(np.diff(log_ratio)))))
    return worst


def _pltdn(n):
    """``Pr(P1'' <= u | X2 = x) / u`` nonincreasing in ``u`` for a bivariate normal null."""
    u = _grid(n)
    q = chi2_quantile_upper(u, 1)
    worst = 0.0
    for rho in (0.3, 0.7):
        for x in (0.0, 1.0, 2.0):
            lam = (rho * x) ** 2 / (1 - rho ** 2)
            ratio = noncentral_chi2_survival(q, 1, lam) / u
            worst = max(worst, max(0.0, float(np.max(np.diff(ratio)))))
    return worst


def _knockoff_algebra(n_designs):
    rng = np.random.default_rng(20240611)
    sigma = make_correlation(StructureSpec("ar1", 40, 0.5)).cholesky
    worst = 0.0
    for _ in range(n_designs):
        X = rng.standard_normal((100, 40)) @ sigma.T
        data = RegressionData.standardized(X, rng.standard_normal(100))
        aug = construct_knockoffs(data)
        r1, r2 = aug.residuals(data.X)
        cert = float(np.linalg.norm((data.X + aug.X_tilde).T @ (data.X - aug.X_tilde)))
        worst = max(worst, r1, r2, cert)
    return worst


def _h_roundtrips(n_targets):
    worst = 0.0
    targets = np.geomspace(1e-4, 0.2, n_targets)
    for kind, rho in (("equi", 0.3), ("ar1", 0.7), ("iar1", 0.7), ("sparse", None), ("prefixed", None)):
        profile = tau_profile(make_correlation(StructureSpec(kind, 40, rho)))
        d = profile.d
        for alpha in targets:
            for rule in (TauRule.MIN, TauRule.MEDIAN, TauRule.HARM_MEAN, TauRule.MAX):
                tau = select_tau(profile, rule)
                step = calibrate(alpha, profile, tau).alphas[0]
                worst = max(worst, abs(float(h_mixture(step, profile, tau)) - alpha / d))
            step = calibrate(alpha, profile, None, method="sbh1").alphas[0]
            worst = max(worst, abs(float(h_sbh1(step, profile)) - alpha / d))
    return worst


_CHECKS = (
    ("chi2 survival vs closed forms", _chi2_kernels, 1e-9, 1000, 200),
    ("scaled-F survival vs closed forms", _scaledf_kernels, 1e-9, 1000, 200),
    ("quantile roundtrips", _roundtrips, 1e-10, 999, 199),
    ("concavity, chi-square pair", _concavity_chi2, 1e-9, 1000, 200),
    ("concavity, scaled-F pair", _concavity_scaledf, 1e-9, 1000, 200),
    ("monotone ratio (TP2)", _tp2_ratio, 1e-9, 1000, 200),
    ("left-tail dependence ratio", _pltdn, 1e-9, 200, 200),
    ("knockoff Gram and fission identities", _knockoff_algebra, 1e-8, 100, 10),
    ("calibration roundtrips H(H^-1(x))", _h_roundtrips, 1e-10, 12, 4),
)


def run_checks(quick: bool = False) -> list[CheckResult]:
    scale = tolerance_scale()
    out = []
    for name, fn, tol, size, quick_size in _CHECKS:
        start = time.perf_counter()
        violation = fn(quick_size if quick else size)
        out.append(CheckResult(name, violation, tol * scale, time.perf_counter() - start))
    return out


def format_table(results) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  status  violation   tolerance   seconds"]
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{r.name:<{width}}  {status:<6}  {r.violation:<10.3g}  {r.tolerance:<10.3g}  {r.seconds:.2f}")
    failed = sum(not r.passed for r in results)
    lines.append(f"{len(results) - failed} passed, {failed} failed")
    return "\n".join(lines)
