"""Survival and inverse-survival kernels for the chi-square family.

Two reference laws are used throughout the package:

* ``chi2``: ``Pr(chi2_m >= x)``, the two-sided z-test law when ``m = 1``.
* ``scaled F``: ``Pr(chi2_m / chi2_nu >= x)`` with independent numerator and
  denominator. For ``m = 1`` this is ``Pr(F_{1,nu} / nu >= x)``, the law of a
  squared t statistic ``X**2 / V`` with ``V ~ chi2_nu``.

All functions accept scalars or numpy arrays and return the same shape.
"""
from __future__ import annotations

from dataclasses import dataclass
from numbers import Integral

import numpy as np
from scipy import special

__all__ = [
    "DistributionKind",
    "CHISQ1",
    "scaled_f",
    "chi2_survival",
    "chi2_quantile_upper",
    "scaledF_survival",
    "scaledF_quantile_upper",
    "noncentral_chi2_survival",
]

_UPPER_BRACKET = 1e3
_MAX_POLISH = 60
# relative tolerance on the survival value; far below the 1e-10 roundtrip contract
_LOG_TOL = 1e-13
_POISSON_TAIL = 1e-14
_POISSON_MAX_TERMS = 10_000


def _check_df(m, name="m"):
    if isinstance(m, bool) or not isinstance(m, Integral) or m < 1:
        raise ValueError(f"{name} must be a positive integer, got {m!r}")
    return int(m)


def _check_x(x):
    arr = np.asarray(x, dtype=float)
    if np.any(np.isnan(arr)) or np.any(arr < 0):
        raise ValueError("x must be nonnegative")
    return arr


def _check_u(u):
    arr = np.asarray(u, dtype=float)
    if np.any(~((arr > 0) & (arr < 1))):
        raise ValueError("u must lie strictly inside (0, 1)")
    return arr


def _out(arr, like):
    return float(arr) if np.ndim(like) == 0 else arr


# --- raw kernels (no validation, arrays in / arrays out) --------------------

# below this the direct survival value is replaced by its log-space asymptotics
_TINY = 1e-280


def _chi2_sf(x, m):
    if m == 1:
        return special.erfc(np.sqrt(0.5 * x))
    return special.gammaincc(0.5 * m, 0.5 * x)


def _chi2_logsf(x, m):
    x = np.asarray(x, dtype=float)
    if m == 1:
        return np.log(2.0) + special.log_ndtr(-np.sqrt(x))
    a, z = 0.5 * m, np.atleast_1d(0.5 * x)
    s = special.gammaincc(a, z)
    with np.errstate(divide="ignore"):
        out = np.log(s)
    deep = s < _TINY
    if deep.any():
        # Q(a, z) = z^a e^-z U(1, 1 + a, z) / Gamma(a)
        zd = z[deep]
        out[deep] = a * np.log(zd) - zd - special.gammaln(a) + np.log(special.hyperu(1.0, 1.0 + a, zd))
    return out.reshape(x.shape)


def _chi2_logpdf(x, m):
    a = 0.5 * m
    with np.errstate(divide="ignore", invalid="ignore"):
        return (a - 1.0) * np.log(x) - 0.5 * x - a * np.log(2.0) - special.gammaln(a)


def _ratio_sf(x, m, nu):
    # chi2_m / chi2_nu >= x  <=>  Beta(nu/2, m/2) <= 1 / (1 + x); where the
    # survival exceeds 1/2 the complement in x / (1 + x) keeps tiny x from
    # rounding y to 1 without cancellation
    x = np.asarray(x, dtype=float)
    a, b = 0.5 * nu, 0.5 * m
    direct = special.betainc(a, b, 1.0 / (1.0 + x))
    with np.errstate(invalid="ignore"):
        comp = 1.0 - special.betainc(b, a, x / (1.0 + x))
    return np.where(direct > 0.5, comp, direct)


def _ratio_logsf(x, m, nu):
    x = np.asarray(x, dtype=float)
    a, b = 0.5 * nu, 0.5 * m
    y = np.atleast_1d(1.0 / (1.0 + x))
    s = special.betainc(a, b, y)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(s)
        xs = np.atleast_1d(x)
        small = s > 0.5
        out[small] = np.log1p(-special.betainc(b, a, xs[small] / (1.0 + xs[small])))
    deep = (s < _TINY) & (y > 0)
    if deep.any():
        # I_y(a, b) = y^a (1 - y)^b 2F1(a + b, 1; a + 1; y) / (a B(a, b))
        yd = y[deep]
        out[deep] = (a * np.log(yd) + b * np.log1p(-yd) - np.log(a) - special.betaln(a, b)
                     + np.log(special.hyp2f1(a + b, 1.0, a + 1.0, yd)))
    return out.reshape(x.shape)


def _ratio_logpdf(x, m, nu):
    a, b = 0.5 * m, 0.5 * nu
    with np.errstate(divide="ignore", invalid="ignore"):
        return (a - 1.0) * np.log(x) - (a + b) * np.log1p(x) - special.betaln(a, b)


def _invert(logu, logsf, logpdf, x0):
    """Safeguarded Newton on ``logsf(x) = logu`` inside a maintained bracket.

    The bracket starts at ``[0, 1e3]`` and is widened geometrically until
    ``logsf(hi) <= logu``; roots beyond ``1e300`` are reported as ``inf``.
    Newton steps leaving the bracket are replaced by bisection, geometric
    once the bracket spans more than a factor of four.
    """
    logu = np.atleast_1d(np.asarray(logu, dtype=float))
    lo = np.zeros_like(logu)
    hi = np.full_like(logu, _UPPER_BRACKET)
    while True:
        short = (logsf(hi) > logu) & (hi < 1e300)
        if not short.any():
            break
        hi = np.where(short, hi * 10.0, hi)
    beyond = logsf(hi) > logu
    x = np.asarray(x0, dtype=float).copy()
    x = np.where(np.isfinite(x) & (x > lo) & (x < hi), x, 0.5 * (lo + hi))
    active = ~beyond
    tol = _LOG_TOL * np.minimum(1.0, np.abs(logu))
    for _ in range(_MAX_POLISH):
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            ls = logsf(x)
            f = ls - logu
            lo = np.where(active & (f > 0), x, lo)
            hi = np.where(active & (f < 0), x, hi)
            xn = x + f * np.exp(ls - logpdf(x))
            mid = np.where(hi > 4.0 * lo, np.sqrt(lo * hi), 0.5 * (lo + hi))
            mid = np.where(lo > 0, mid, 0.5 * (lo + hi))
        done = (np.abs(f) <= tol) | (xn == x) | (hi - lo <= 4e-16 * hi)
        bad = ~np.isfinite(xn) | (xn <= lo) | (xn >= hi)
        xn = np.where(bad, mid, xn)
        x = np.where(active & ~done, xn, x)
        active &= ~done
        if not active.any():
            break
    return np.where(beyond, np.inf, x)


def _edges(logu):
    """Split log-probabilities into the trivial ends and the interior."""
    logu = np.atleast_1d(np.asarray(logu, dtype=float))
    x = np.empty_like(logu)
    x[logu >= 0] = 0.0
    x[logu == -np.inf] = np.inf
    return logu, x, (logu < 0) & (logu > -np.inf)


def _chi2_1_isf_log(li):
    # log sf = log 2 + log Phi(-sqrt(x)); ndtri_exp inverts log Phi to ~1e-7
    # relative in the far tail, two Newton steps bring it to rounding level
    x = special.ndtri_exp(li - np.log(2.0)) ** 2
    for _ in range(2):
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            ls = _chi2_logsf(x, 1)
            step = (ls - li) * np.exp(ls - _chi2_logpdf(x, 1))
        x = np.where(np.isfinite(step) & (x + step > 0), x + step, x)
    return x


def _chi2_isf_log(logu, m):
    """Inverse of :func:`_chi2_logsf`; ``0 -> 0`` and ``-inf -> inf``."""
    logu, x, inner = _edges(logu)
    if inner.any() and m == 1:
        x[inner] = _chi2_1_isf_log(logu[inner])
    elif inner.any():
        li = logu[inner]
        ui = np.exp(li)
        with np.errstate(invalid="ignore"):
            guess = 2.0 * special.gammainccinv(0.5 * m, ui)
        guess = np.where(ui > _TINY, guess, -2.0 * li)
        x[inner] = _invert(li, lambda t: _chi2_logsf(t, m), lambda t: _chi2_logpdf(t, m), guess)
    return x


def _ratio_isf_log(logu, m, nu):
    logu, x, inner = _edges(logu)
    if inner.any():
        li = logu[inner]
        ui = np.exp(li)
        a, b = 0.5 * nu, 0.5 * m
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            guess = 1.0 / special.betaincinv(a, b, ui) - 1.0
            tail = np.exp((-np.log(a) - special.betaln(a, b) - li) / a)
            # near u = 1: 1 - sf ~ x^b / (b B(a, b))
            head = np.exp((np.log(-np.expm1(li)) + np.log(b) + special.betaln(a, b)) / b)
        guess = np.where(ui > _TINY, guess, tail)
        guess = np.where(li > -1e-6, head, guess)
        x[inner] = _invert(li, lambda t: _ratio_logsf(t, m, nu), lambda t: _ratio_logpdf(t, m, nu), guess)
    return x


def _log(u):
    with np.errstate(divide="ignore"):
        return np.log(np.clip(np.asarray(u, dtype=float), 0.0, 1.0))


def _chi2_isf(u, m):
    """Inverse survival; ``u == 1`` maps to 0 and ``u == 0`` to ``inf``."""
    return _chi2_isf_log(_log(u), m)


def _ratio_isf(u, m, nu):
    return _ratio_isf_log(_log(u), m, nu)


# --- public API --------------------------------------------------------------

def chi2_survival(x, m=1):
    """``Pr(chi2_m >= x)`` via the regularized upper incomplete gamma function."""
    m = _check_df(m)
    arr = _check_x(x)
    return _out(_chi2_sf(arr, m), x)


def chi2_quantile_upper(u, m=1):
    """Return ``x`` with ``chi2_survival(x, m) == u`` for ``u`` in (0, 1)."""
    m = _check_df(m)
    arr = _check_u(u)
    return _out(_chi2_isf(arr, m).reshape(arr.shape), u)


def scaledF_survival(x, m=1, nu=1):
    """``Pr(chi2_m / chi2_nu >= x)``; equals ``Pr(F_{1,nu}/nu >= x)`` at ``m = 1``."""
    m = _check_df(m)
    nu = _check_df(nu, "nu")
    arr = _check_x(x)
    return _out(_ratio_sf(arr, m, nu), x)


def scaledF_quantile_upper(u, m=1, nu=1):
    m = _check_df(m)
    nu = _check_df(nu, "nu")
    arr = _check_u(u)
    return _out(_ratio_isf(arr, m, nu).reshape(arr.shape), u)


def noncentral_chi2_survival(x, m=1, lam=0.0):
    """``Pr(chi2'_m(lam) >= x)`` as the Poisson(lam/2) mixture of central laws.

    The series is summed until the accumulated Poisson mass reaches
    ``1 - 1e-14`` (at most 10**4 terms).
    """
    m = _check_df(m)
    arr = _check_x(x)
    lam = float(lam)
    if not lam >= 0:
        raise ValueError("noncentrality must be nonnegative")
    if lam == 0:
        return _out(_chi2_sf(arr, m), x)
    half = 0.5 * lam
    # Poisson weights in log space so large lam does not underflow term 0
    n_terms = int(min(_POISSON_MAX_TERMS, max(50, half + 40.0 * np.sqrt(half) + 50)))
    j = np.arange(n_terms)
    weights = np.exp(j * np.log(half) - half - special.gammaln(j + 1.0))
    cum = np.cumsum(weights)
    hit = np.nonzero(cum >= 1.0 - _POISSON_TAIL)[0]
    if hit.size:
        n_terms = int(hit[0]) + 1
        weights = weights[:n_terms]
        j = j[:n_terms]
    flat = np.atleast_1d(arr).ravel()
    terms = special.gammaincc(0.5 * (m + 2 * j)[None, :], 0.5 * flat[:, None])
    out = terms @ weights
    return _out(out.reshape(np.shape(arr)), x)


@dataclass(frozen=True)
class DistributionKind:
    """Reference law of the two-sided p-values.

    ``nu=None`` is the chi-square(1) law (known variance); an integer ``nu``
    selects the scaled-F law with ``nu`` denominator degrees of freedom.
    """

    nu: int | None = None

    def __post_init__(self):
        if self.nu is not None:
            _check_df(self.nu, "nu")

    @property
    def is_chisq(self) -> bool:
        return self.nu is None

    def sf(self, x, m=1):
        arr = np.asarray(x, dtype=float)
        res = _chi2_sf(arr, m) if self.nu is None else _ratio_sf(arr, m, self.nu)
        return _out(res, x)

    def isf(self, u, m=1):
        """Inverse survival extended to the closed interval: 1 -> 0, 0 -> inf."""
        arr = np.asarray(u, dtype=float)
        res = _chi2_isf(arr, m) if self.nu is None else _ratio_isf(arr, m, self.nu)
        return _out(res.reshape(arr.shape), u)

    def logsf(self, x, m=1):
        """Log survival, accurate far beyond the underflow point of :meth:`sf`."""
        arr = np.asarray(x, dtype=float)
        res = _chi2_logsf(arr, m) if self.nu is None else _ratio_logsf(arr, m, self.nu)
        return _out(res, x)

    def isf_log(self, logu, m=1):
        """Inverse of :meth:`logsf`: ``0 -> 0``, ``-inf -> inf``."""
        arr = np.asarray(logu, dtype=float)
        res = _chi2_isf_log(arr, m) if self.nu is None else _ratio_isf_log(arr, m, self.nu)
        return _out(res.reshape(arr.shape), logu)

    def __str__(self):
        return "chisq1" if self.nu is None else f"scaledF({self.nu})"


CHISQ1 = DistributionKind()


def scaled_f(nu: int) -> DistributionKind:
    return DistributionKind(nu=int(nu))
