"""Monte Carlo experiments: FDR and power of the procedures on simulated data.

Every replication draws from its own generator, seeded from
``(master_seed, regime index, replication index)``, so results do not depend
on the number of workers or the order in which replications finish.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .corr import (
    CorrelationMatrix,
    StructureSpec,
    make_correlation,
    normalize_to_correlation,
    sample_mvn,
    select_tau,
    tau_profile,
)
from .dist import CHISQ1, DistributionKind
from .procedures import GSBH_RULES, MEAN_PROCEDURES, SBH2_FRACTION, run_procedure, t_pvalues, z_pvalues
from .regression import (
    PAIRED_PROCEDURES,
    RegressionData,
    beta1_profile,
    coefficient_pvalues,
    construct_knockoffs,
    fission,
    knockoff_statistics,
    ols_fit,
    paired_pvalues,
    run_paired_procedure,
)
from .shift import calibrate

__all__ = [
    "Regime",
    "ExperimentConfig",
    "CellRecord",
    "ExperimentSummary",
    "NumericalFailure",
    "estimate_cell",
    "run_means",
    "run_varsel",
    "run_knockoff",
    "run_experiment",
    "lemma1_oracle",
    "SCENARIOS",
]

SCENARIOS = ("means", "varsel", "knockoff")
DEFAULT_MU_GRID = (1.0, 2.0, 3.0, 4.0, 5.0)
DEFAULT_NULL_GRID = (0.5, 0.6, 0.7, 0.8, 0.9)


class NumericalFailure(RuntimeError):
    """A numeric routine failed inside one experiment cell."""

    def __init__(self, cell: str, cause: BaseException):
        super().__init__(f"numeric failure in cell {cell}: {cause}")
        self.cell = cell
        self.cause = cause


@dataclass(frozen=True)
class Regime:
    """``fixed_null``: vary the signal size at a fixed null fraction;
    ``fixed_signal``: vary the null fraction at a fixed signal size."""

    kind: str = "fixed_null"
    null_frac: float = 0.75
    mu: float = 2.0
    grid: tuple = DEFAULT_MU_GRID

    def __post_init__(self):
        if self.kind not in ("fixed_null", "fixed_signal"):
            raise ValueError(f"unknown regime {self.kind!r}")
        object.__setattr__(self, "grid", tuple(float(g) for g in self.grid))
        if not self.grid:
            raise ValueError("regime grid must not be empty")
        fracs = self.grid if self.kind == "fixed_signal" else (self.null_frac,)
        if any(not 0 <= f < 1 for f in fracs):
            raise ValueError("null fraction must lie in [0, 1)")

    def points(self):
        """Yield ``(mu, null_frac)`` for each grid point."""
        for g in self.grid:
            yield (g, self.null_frac) if self.kind == "fixed_null" else (self.mu, g)

    @classmethod
    def fixed_null(cls, null_frac=0.75, mu_grid=DEFAULT_MU_GRID):
        return cls("fixed_null", null_frac=null_frac, grid=tuple(mu_grid))

    @classmethod
    def fixed_signal(cls, mu=2.0, null_grid=DEFAULT_NULL_GRID):
        return cls("fixed_signal", mu=mu, grid=tuple(null_grid))


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str
    structure: StructureSpec
    regime: Regime = field(default_factory=Regime)
    procedures: tuple = ("bh", "by", "gsbh3")
    alphas: tuple = (0.05,)
    replications: int = 200
    master_seed: int = 0
    n: int | None = None
    k: int | None = None
    variance: str = "known"
    nu: int | None = None
    random_signs: bool = False
    resample_structure: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        object.__setattr__(self, "procedures", tuple(p.lower() for p in self.procedures))
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        if not self.procedures:
            raise ValueError("at least one procedure is required")
        catalog = MEAN_PROCEDURES if self.scenario != "knockoff" else PAIRED_PROCEDURES
        for p in self.procedures:
            if p not in catalog:
                raise ValueError(f"procedure {p!r} is not available for scenario {self.scenario!r}")
        if not self.alphas or any(not 0 < a < 1 for a in self.alphas):
            raise ValueError("alpha levels must lie in (0, 1)")
        if int(self.replications) != self.replications or self.replications < 1:
            raise ValueError("replications must be a positive integer")
        if self.variance not in ("known", "estimated"):
            raise ValueError("variance must be 'known' or 'estimated'")
        if self.scenario != "means":
            if self.n is None:
                raise ValueError(f"scenario {self.scenario!r} needs n")
            if self.n <= self.d:
                raise ValueError("need n > d")
            if self.scenario == "knockoff" and self.n < 2 * self.d:
                raise ValueError("knockoff scenario needs n >= 2d")
        if self.k is not None and not 0 <= self.k <= self.d:
            raise ValueError("k must lie in [0, d]")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    @property
    def d(self) -> int:
        return self.structure.d

    @property
    def means_nu(self) -> int:
        return self.nu if self.nu is not None else 2 * self.d

    def n_signals(self, null_frac: float) -> int:
        if self.k is not None:
            return self.k
        return max(1, int(round((1.0 - null_frac) * self.d)))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["structure"] = self.structure.to_dict()
        out["regime"] = {
            "kind": self.regime.kind,
            "null_frac": self.regime.null_frac,
            "mu": self.regime.mu,
            "grid": list(self.regime.grid),
        }
        out["procedures"] = list(self.procedures)
        out["alphas"] = list(self.alphas)
        return out


@dataclass(frozen=True)
class CellRecord:
    scenario: str
    procedure: str
    structure: str
    rho: float | None
    d: int
    n: int | None
    mu: float
    null_frac: float
    alpha: float
    fdr_hat: float
    fdr_se: float
    power_hat: float
    power_se: float
    mean_rejections: float
    replications: int
    seed: int
    low_confidence: bool = False


@dataclass(frozen=True)
class ExperimentSummary:
    config: ExperimentConfig
    cells: tuple

    def cell(self, procedure: str, alpha: float | None = None, mu: float | None = None,
             null_frac: float | None = None) -> CellRecord:
        hits = [
            c for c in self.cells
            if c.procedure == procedure
            and (alpha is None or math.isclose(c.alpha, alpha))
            and (mu is None or math.isclose(c.mu, mu))
            and (null_frac is None or math.isclose(c.null_frac, null_frac))
        ]
        if len(hits) != 1:
            raise KeyError(f"{len(hits)} cells match procedure={procedure}, alpha={alpha}, mu={mu}, null_frac={null_frac}")
        return hits[0]


def estimate_cell(fdps, powers, rejections=None) -> dict:
    """Means and standard errors (sample sd / sqrt(reps)); one replication gives se 0."""
    fdps = np.asarray(fdps, dtype=float)
    powers = np.asarray(powers, dtype=float)
    reps = fdps.size
    if reps == 0 or powers.size != reps:
        raise ValueError("need one FDP and one power value per replication")

    def mean_se(x):
        if np.all(np.isnan(x)):
            return math.nan, math.nan
        if reps == 1:
            return float(x[0]), 0.0
        return float(np.mean(x)), float(np.std(x, ddof=1) / math.sqrt(reps))

    fdr_hat, fdr_se = mean_se(fdps)
    power_hat, power_se = mean_se(powers)
    mean_rej = float(np.mean(rejections)) if rejections is not None else math.nan
    return {
        "fdr_hat": fdr_hat,
        "fdr_se": fdr_se,
        "power_hat": power_hat,
        "power_se": power_se,
        "mean_rejections": mean_rej,
        "replications": reps,
        "low_confidence": reps == 1,
    }


def _fdp_power(rejected, signal_mask):
    rejected = np.asarray(rejected, dtype=int)
    R = rejected.size
    true_pos = int(np.count_nonzero(signal_mask[rejected])) if R else 0
    V = R - true_pos
    fdp = V / max(R, 1)
    n_sig = int(np.count_nonzero(signal_mask))
    power = true_pos / n_sig if n_sig else math.nan
    return fdp, power, R


def _rng(config: ExperimentConfig, point: int, rep: int) -> np.random.Generator:
    seq = np.random.SeedSequence(entropy=config.master_seed, spawn_key=(point, rep))
    return np.random.default_rng(seq)


def _signal_vector(config, rng, mu, null_frac):
    d = config.d
    k = config.n_signals(null_frac)
    mask = np.zeros(d, dtype=bool)
    if k:
        mask[rng.choice(d, size=k, replace=False)] = True
    values = np.zeros(d)
    signs = rng.choice((-1.0, 1.0), size=d) if config.random_signs else np.ones(d)
    values[mask] = mu * signs[mask]
    return values, mask


def _structure_for(config, point, rep):
    spec = config.structure
    if config.resample_structure and spec.kind in ("sparse", "prefixed"):
        seed = int(np.random.SeedSequence(entropy=config.master_seed, spawn_key=(point, rep, 1)).generate_state(1)[0])
        spec = replace(spec, seed=seed)
    return make_correlation(spec)


def _means_replication(config, point, rep, mu, null_frac, fixed):
    rng = _rng(config, point, rep)
    if fixed is None:
        sigma = _structure_for(config, point, rep)
        profile = tau_profile(sigma)
    else:
        sigma, profile = fixed
    means, mask = _signal_vector(config, rng, mu, null_frac)
    x = sample_mvn(sigma, means, rng)
    if config.variance == "known":
        p, dist = z_pvalues(x), CHISQ1
    else:
        nu = config.means_nu
        V = float(rng.chisquare(nu))
        p, dist = t_pvalues(x, V, nu), DistributionKind(nu)
    out = {}
    for alpha in config.alphas:
        for proc in config.procedures:
            out[(proc, alpha)] = _fdp_power(run_procedure(proc, p, profile, alpha, dist).rejected, mask)
    return out


def _varsel_replication(config, point, rep, mu, null_frac, fixed):
    rng = _rng(config, point, rep)
    sigma = fixed[0] if fixed is not None else _structure_for(config, point, rep)
    beta, mask = _signal_vector(config, rng, mu, null_frac)
    X = sample_mvn(sigma, np.zeros(config.d), rng, size=config.n)
    data = RegressionData.standardized(X, np.zeros(config.n))
    data = RegressionData(data.X, data.X @ beta + rng.standard_normal(config.n))
    beta_hat, eta2, nu = ols_fit(data)
    A = data.gram()
    if config.variance == "known":
        p, dist = coefficient_pvalues(beta_hat, A), CHISQ1
    else:
        p, dist = coefficient_pvalues(beta_hat, A, eta2, nu), DistributionKind(nu)
    needs_profile = any(proc not in ("bh", "by") for proc in config.procedures)
    profile = tau_profile(normalize_to_correlation(np.linalg.inv(A))) if needs_profile else None
    out = {}
    for alpha in config.alphas:
        for proc in config.procedures:
            out[(proc, alpha)] = _fdp_power(run_procedure(proc, p, profile, alpha, dist).rejected, mask)
    return out


def _knockoff_replication(config, point, rep, mu, null_frac, fixed):
    rng = _rng(config, point, rep)
    sigma = fixed[0] if fixed is not None else _structure_for(config, point, rep)
    beta, mask = _signal_vector(config, rng, mu, null_frac)
    X = sample_mvn(sigma, np.zeros(config.d), rng, size=config.n)
    Xs = RegressionData.standardized(X, np.zeros(config.n)).X
    data = RegressionData(Xs, Xs @ beta + rng.standard_normal(config.n))
    aug = construct_knockoffs(data)
    pair = fission(data, aug)
    pp = paired_pvalues(pair, aug, config.variance)
    profile = beta1_profile(pair) if any(p.startswith("sbbh") for p in config.procedures) else None
    W = knockoff_statistics(data, aug) if any(p.startswith("knockoff") for p in config.procedures) else None
    out = {}
    for alpha in config.alphas:
        for proc in config.procedures:
            sel = run_paired_procedure(proc, pp, alpha, profile, W)
            out[(proc, alpha)] = _fdp_power(sel, mask)
    return out


_REPLICATORS = {
    "means": _means_replication,
    "varsel": _varsel_replication,
    "knockoff": _knockoff_replication,
}


def _run(config: ExperimentConfig) -> ExperimentSummary:
    replicate = _REPLICATORS[config.scenario]
    fixed = None
    if not config.resample_structure or config.structure.kind not in ("sparse", "prefixed"):
        sigma = make_correlation(config.structure)
        fixed = (sigma, tau_profile(sigma))
    spec = config.structure
    cells = []
    for point, (mu, null_frac) in enumerate(config.regime.points()):
        if config.n_signals(null_frac) < 1 and config.k is None:
            raise ValueError("signal regimes need at least one signal")
        cell_label = f"{config.scenario}/{spec.kind}/mu={mu:g}/null_frac={null_frac:g}"

        def task(rep, _p=point, _mu=mu, _nf=null_frac, _label=cell_label):
            try:
                return replicate(config, _p, rep, _mu, _nf, fixed)
            except (ArithmeticError, np.linalg.LinAlgError, FloatingPointError) as exc:
                raise NumericalFailure(f"{_label}/rep={rep}", exc) from exc

        if config.workers > 1:
            with ThreadPoolExecutor(max_workers=config.workers) as pool:
                records = list(pool.map(task, range(config.replications)))
        else:
            records = [task(r) for r in range(config.replications)]
        for alpha in config.alphas:
            for proc in config.procedures:
                fdps, powers, rejections = zip(*(rec[(proc, alpha)] for rec in records))
                stats = estimate_cell(fdps, powers, rejections)
                cells.append(CellRecord(
                    scenario=config.scenario,
                    procedure=proc,
                    structure=spec.kind,
                    rho=spec.rho,
                    d=config.d,
                    n=config.n,
                    mu=mu,
                    null_frac=null_frac,
                    alpha=alpha,
                    seed=config.master_seed,
                    **stats,
                ))
    return ExperimentSummary(config, tuple(cells))


def run_means(config: ExperimentConfig) -> ExperimentSummary:
    """Mean testing: ``X ~ N(mu, Sigma)``, z-tests (or t-tests with
    ``V ~ chi2_nu`` when the variance is estimated)."""
    if config.scenario != "means":
        raise ValueError("run_means needs scenario 'means'")
    return _run(config)


def run_varsel(config: ExperimentConfig) -> ExperimentSummary:
    """Regression with correlated Gaussian rows, unit-norm columns and OLS p-values.

    The shift profile is recomputed every replication from ``(X'X)^-1``.
    """
    if config.scenario != "varsel":
        raise ValueError("run_varsel needs scenario 'varsel'")
    return _run(config)


def run_knockoff(config: ExperimentConfig) -> ExperimentSummary:
    """Knockoff-assisted selection with paired p-values from the estimator split."""
    if config.scenario != "knockoff":
        raise ValueError("run_knockoff needs scenario 'knockoff'")
    return _run(config)


def run_experiment(config: ExperimentConfig) -> ExperimentSummary:
    return _run(config)


@dataclass(frozen=True)
class OracleReport:
    procedure: str
    empirical_fdr: float
    se: float
    bound: float
    replications: int

    @property
    def passed(self) -> bool:
        return self.empirical_fdr <= self.bound + 3.0 * self.se


def _null_bound(procedure, profile, alpha, dist):
    """Sum over nulls of the probability that a null statistic falls below
    ``tilde_alpha / d``, from the closed-form marginal laws."""
    d = profile.d
    if procedure == "bh":
        return alpha
    if procedure == "by":
        return alpha / float(np.sum(1.0 / np.arange(1, d + 1)))
    if procedure == "sbh1":
        tilde = d * calibrate(alpha, profile, None, dist, "sbh1").alphas[0]
        u = tilde / d
        return float(np.sum(dist.sf(profile.tau * dist.isf(u))))
    if procedure in GSBH_RULES or procedure in ("sbh2", "sbh2new"):
        rule = GSBH_RULES.get(procedure, "lambda_min" if procedure == "sbh2new" else "lambda_min_fraction")
        tau = select_tau(profile, rule, SBH2_FRACTION)
        tilde = d * calibrate(alpha, profile, tau, dist, "gsbh").alphas[0]
        u = tilde / d
        total = 0.0
        for t in profile.tau:
            if t >= tau:
                total += float(dist.sf(tau * dist.isf(u)))
            else:
                # law of the linear minorant of a weakly shifted coordinate
                scale = float(dist.sf((tau / t) * dist.isf(tilde)))
                total += float(dist.sf(t * dist.isf(u / tilde * scale)))
        return total
    raise ValueError(f"no closed-form bound for procedure {procedure!r}")


def lemma1_oracle(sigma, procedure: str, reps: int, alpha: float = 0.05, seed: int = 0,
                  variance: str = "known", nu: int | None = None) -> OracleReport:
    """All-null Monte Carlo FDR against the closed-form null rejection bound."""
    if not isinstance(sigma, CorrelationMatrix):
        sigma = CorrelationMatrix(sigma)
    profile = tau_profile(sigma)
    d = sigma.d
    nu = nu if nu is not None else 2 * d
    dist = CHISQ1 if variance == "known" else DistributionKind(nu)
    fdps = np.empty(reps)
    base = np.random.SeedSequence(seed)
    for r in range(reps):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=base.entropy, spawn_key=(r,)))
        x = sample_mvn(sigma, np.zeros(d), rng)
        if variance == "known":
            p = z_pvalues(x)
        else:
            p = t_pvalues(x, float(rng.chisquare(nu)), nu)
        res = run_procedure(procedure, p, profile, alpha, dist)
        fdps[r] = 1.0 if res.R else 0.0
    stats = estimate_cell(fdps, np.full(reps, math.nan))
    return OracleReport(procedure, stats["fdr_hat"], stats["fdr_se"], _null_bound(procedure, profile, alpha, dist), reps)
