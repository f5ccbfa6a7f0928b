import math

import numpy as np
import pytest
from scipy import stats

from shiftfdr.corr import ShiftProfile, StructureSpec, make_correlation
from shiftfdr.dist import CHISQ1, DistributionKind
from shiftfdr.procedures import bh, by
from shiftfdr.regression import (
    PAIRED_PROCEDURES,
    PairedPValues,
    RankDeficientError,
    RegressionData,
    adapt_bbh,
    bbh,
    bby,
    beta1_profile,
    coefficient_pvalues,
    construct_knockoffs,
    equi_s,
    fission,
    knockoff_filter,
    knockoff_statistics,
    ols_fit,
    paired_pvalues,
    rev_bbh,
    run_paired_procedure,
    sbbh,
    standardize_columns,
)

KS_1PCT = 1.628  # asymptotic 1% critical value of sqrt(n) * D_n


def design(n=100, d=40, seed=0, kind="ar1", rho=0.5):
    rng = np.random.default_rng(seed)
    L = make_correlation(StructureSpec(kind, d, rho)).cholesky
    return standardize_columns(rng.standard_normal((n, d)) @ L.T)


@pytest.fixture(scope="module")
def fixed_design():
    X = design()
    data = RegressionData(X, np.zeros(X.shape[0]))
    return X, construct_knockoffs(data)


def ks_ok(sample):
    return stats.kstest(sample, "uniform").statistic * math.sqrt(sample.size) < KS_1PCT


class TestData:
    def test_standardized_norms(self):
        X = np.random.default_rng(1).normal(size=(30, 5)) * np.arange(1, 6)
        data = RegressionData.standardized(X, np.zeros(30))
        assert np.allclose(np.linalg.norm(data.X, axis=0), 1, atol=1e-10)

    def test_zero_column(self):
        X = np.ones((10, 2))
        X[:, 1] = 0
        with pytest.raises(RankDeficientError):
            standardize_columns(X)

    def test_shapes(self):
        with pytest.raises(ValueError):
            RegressionData(np.ones((5, 2)), np.ones(4))
        with pytest.raises(RankDeficientError):
            RegressionData(np.ones((3, 3)), np.ones(3))


class TestOLS:
    def test_noise_free(self):
        X = design(60, 10, 2)
        beta = np.linspace(-2, 2, 10)
        b, eta2, nu = ols_fit(RegressionData(X, X @ beta))
        assert np.max(np.abs(b - beta)) <= 1e-10
        assert eta2 == pytest.approx(0.0, abs=1e-20)
        assert nu == 50

    def test_orthonormal(self):
        Q, _ = np.linalg.qr(np.random.default_rng(3).normal(size=(20, 4)))
        Y = np.random.default_rng(4).normal(size=20)
        b, _, _ = ols_fit(RegressionData(Q, Y))
        assert np.allclose(b, Q.T @ Y, atol=1e-13)

    def test_rank_deficient(self):
        X = design(30, 4, 5)
        X = np.column_stack([X, X[:, 0]])
        with pytest.raises(np.linalg.LinAlgError):
            ols_fit(RegressionData(X, np.zeros(30)))

    def test_variance_mean(self, fixed_design):
        X, _ = fixed_design
        rng = np.random.default_rng(6)
        reps = 10_000
        est = np.array([ols_fit(RegressionData(X, rng.standard_normal(100)))[1] for _ in range(reps)])
        assert abs(est.mean() - 1) <= 3 * est.std(ddof=1) / math.sqrt(reps)


class TestCoefficientPValues:
    def test_zero_beta(self):
        assert np.all(coefficient_pvalues(np.zeros(3), np.eye(3)) == 1.0)
        assert np.all(coefficient_pvalues(np.zeros(3), np.eye(3), 1.0, 10) == 1.0)

    def test_known_five_percent(self):
        p = coefficient_pvalues(np.array([math.sqrt(3.841459)]), np.eye(1))
        assert p[0] == pytest.approx(0.05, abs=1e-6)

    def test_estimated_is_t_test(self):
        # scaled-F at m = 1 is the two-sided t-test with nu df
        beta, nu, eta2 = np.array([0.7, -1.3]), 25, 0.8
        A = np.array([[2.0, 0.3], [0.3, 1.0]])
        t = beta / np.sqrt(np.diag(np.linalg.inv(A)) * eta2)
        assert np.allclose(coefficient_pvalues(beta, A, eta2, nu), 2 * stats.t.sf(np.abs(t), nu), rtol=1e-12)

    @pytest.mark.parametrize("variance", ["known", "estimated"])
    def test_null_uniform(self, fixed_design, variance):
        X, _ = fixed_design
        A = X.T @ X
        rng = np.random.default_rng(7)
        reps = 10_000
        out = np.empty((reps, 3))
        for r in range(reps):
            b, eta2, nu = ols_fit(RegressionData(X, rng.standard_normal(100)))
            p = coefficient_pvalues(b, A) if variance == "known" else coefficient_pvalues(b, A, eta2, nu)
            out[r] = p[[0, 17, 39]]
        for j in range(3):
            assert ks_ok(out[:, j])


class TestKnockoffs:
    def test_orthonormal_s1(self):
        Q, _ = np.linalg.qr(np.random.default_rng(8).normal(size=(20, 5)))
        aug = construct_knockoffs(RegressionData(Q, np.zeros(20)), s=1.0)
        assert np.allclose(aug.X_tilde.T @ Q, 0, atol=1e-12)
        assert np.allclose(aug.X_tilde.T @ aug.X_tilde, np.eye(5), atol=1e-12)

    def test_equi_rule(self):
        X = design(seed=9)
        A = X.T @ X
        s = equi_s(A)
        assert np.allclose(s, min(2 * np.linalg.eigvalsh(A)[0], 1) * 0.999)
        G = 2 * np.diag(s) - np.diag(s) @ np.linalg.solve(A, np.diag(s))
        assert np.linalg.eigvalsh(0.5 * (G + G.T))[0] > 0

    def test_gram_identities_random_designs(self):
        for seed in range(20):
            X = design(seed=100 + seed, kind=("equi", "ar1", "iar1")[seed % 3])
            data = RegressionData(X, np.zeros(100))
            aug = construct_knockoffs(data)
            A = X.T @ X
            assert np.linalg.norm(aug.X_tilde.T @ aug.X_tilde - A) <= 1e-8
            assert np.linalg.norm(X.T @ aug.X_tilde - (A - aug.D)) <= 1e-8
            assert np.linalg.norm((X + aug.X_tilde).T @ (X - aug.X_tilde)) <= 1e-8

    def test_needs_2d_rows(self):
        X = design(70, 40, 10)
        with pytest.raises(ValueError, match="n >= 2d"):
            construct_knockoffs(RegressionData(X, np.zeros(70)))

    def test_s_too_large(self):
        X = design(100, 40, 11)
        with pytest.raises(ValueError, match="positive definite"):
            construct_knockoffs(RegressionData(X, np.zeros(100)), s=5.0)

    def test_nonpositive_s(self):
        X = design(100, 40, 11)
        with pytest.raises(ValueError):
            construct_knockoffs(RegressionData(X, np.zeros(100)), s=0.0)


class TestFission:
    def test_certificate_and_formulae(self, fixed_design):
        X, aug = fixed_design
        Y = np.random.default_rng(12).standard_normal(100)
        pair = fission(RegressionData(X, Y), aug)
        A = X.T @ X
        M = 2 * A - aug.D
        assert np.allclose(pair.beta1, np.linalg.solve(M, (X + aug.X_tilde).T @ Y), atol=1e-10)
        assert np.allclose(pair.beta2, (X - aug.X_tilde).T @ Y / aug.s, atol=1e-10)
        assert np.allclose(pair.cov1, np.linalg.inv(M), rtol=1e-8, atol=1e-8)
        assert pair.nu == 60

    def test_monte_carlo_independence_and_bias(self, fixed_design):
        X, aug = fixed_design
        rng = np.random.default_rng(13)
        beta = np.zeros(40)
        beta[:8] = 3.0
        reps = 10_000
        b1 = np.empty((reps, 40))
        b2 = np.empty((reps, 40))
        for r in range(reps):
            pair = fission(RegressionData(X, X @ beta + rng.standard_normal(100)), aug)
            b1[r], b2[r] = pair.beta1, pair.beta2
        for j in (0, 5, 20, 39):
            assert abs(np.corrcoef(b1[:, j], b2[:, j])[0, 1]) <= 4 / math.sqrt(reps)
        # one 3-SE check per estimator: the average error over coordinates
        for b in (b1, b2):
            err = (b - beta).mean(axis=1)
            assert abs(err.mean()) <= 3 * err.std(ddof=1) / math.sqrt(reps)

    def test_beta1_profile(self, fixed_design):
        X, aug = fixed_design
        pair = fission(RegressionData(X, np.ones(100)), aug)
        prof = beta1_profile(pair)
        assert prof.d == 40
        assert np.all((prof.tau > 0) & (prof.tau <= 1))


class TestPairedPValues:
    def test_zero_beta(self, fixed_design):
        X, aug = fixed_design
        pair = fission(RegressionData(X, np.zeros(100)), aug)
        pp = paired_pvalues(pair, aug)
        assert np.all(pp.p1 == 1.0) and np.all(pp.p2 == 1.0)

    def test_null_uniform_and_independent(self, fixed_design):
        X, aug = fixed_design
        rng = np.random.default_rng(14)
        reps = 10_000
        p1 = np.empty((reps, 40))
        p2 = np.empty((reps, 40))
        for r in range(reps):
            pp = paired_pvalues(fission(RegressionData(X, rng.standard_normal(100)), aug), aug)
            p1[r], p2[r] = pp.p1, pp.p2
        for j in (0, 13, 39):
            assert ks_ok(p1[:, j]) and ks_ok(p2[:, j])
        z2 = stats.norm.ppf(p2 / 2)
        c = np.corrcoef(z2.T)
        # neighbouring columns are the most correlated ones in the AR(1) design
        assert np.max(np.abs(np.diag(c, 1))) <= 4 / math.sqrt(reps)

    def test_estimated_modes(self, fixed_design):
        X, aug = fixed_design
        Y = X[:, 0] * 5 + np.random.default_rng(15).standard_normal(100)
        pair = fission(RegressionData(X, Y), aug)
        a = paired_pvalues(pair, aug, "estimated")
        b = paired_pvalues(pair, aug, "estimated", p2_law="chisq")
        assert a.dist == DistributionKind(60)
        assert np.array_equal(a.p1, b.p1)
        assert not np.array_equal(a.p2, b.p2)
        with pytest.raises(ValueError):
            paired_pvalues(pair, aug, "unknown")
        with pytest.raises(ValueError):
            paired_pvalues(pair, aug, "estimated", p2_law="t")


def pp_of(p1, p2, dist=CHISQ1):
    return PairedPValues(np.asarray(p1, float), np.asarray(p2, float), dist)


class TestScreenedProcedures:
    rng = np.random.default_rng(16)
    p1 = rng.uniform(0, 0.5, 20) ** 2
    p2 = rng.uniform(0, 0.5, 20) ** 2

    def test_bbh_trivial(self):
        assert bbh(pp_of(np.ones(20), self.p2), 0.1).R == 0
        assert bbh(pp_of(np.zeros(20), self.p2), 0.1).as_set() == bh(self.p2, math.sqrt(0.1)).as_set()

    def test_bbh_definition(self):
        star = np.where(self.p1 <= math.sqrt(0.1), self.p2, 1.0)
        assert bbh(pp_of(self.p1, self.p2), 0.1).as_set() == bh(star, math.sqrt(0.1)).as_set()

    def test_adapt_bbh(self):
        pp = pp_of(self.p1, np.r_[self.p2[:10], np.full(10, 0.9)])
        # pi0 capped at one: identical to BBH
        assert adapt_bbh(pp, 0.1).as_set() == bbh(pp, 0.1).as_set()
        small = pp_of(self.p1, self.p2)
        assert bbh(small, 0.1).as_set() <= adapt_bbh(small, 0.1).as_set()

    def test_rev_bbh(self):
        pp = pp_of(self.p1, self.p2)
        star = np.where(self.p2 <= math.sqrt(0.1), self.p1, 1.0)
        assert rev_bbh(pp, 0.1).as_set() == bh(star, math.sqrt(0.1)).as_set()
        assert rev_bbh(pp, 0.1, mirrored=True).as_set() == bbh(pp, 0.1).as_set()

    def test_bby_subset(self):
        for _ in range(300):
            p1 = self.rng.uniform(0, 0.4, 20) ** 2
            p2 = self.rng.uniform(0, 0.4, 20) ** 2
            pp = pp_of(p1, p2)
            star = np.where(p1 <= math.sqrt(0.1), p2, 1.0)
            assert bby(pp, 0.1).as_set() == by(star, math.sqrt(0.1)).as_set()
            assert bby(pp, 0.1).as_set() <= bbh(pp, 0.1).as_set()

    def test_monotone_in_alpha(self):
        prof = ShiftProfile(np.linspace(0.2, 1, 20), 0.1)
        for _ in range(100):
            pp = pp_of(self.rng.uniform(0, 0.3, 20) ** 2, self.rng.uniform(0, 0.3, 20) ** 2)
            for name in ("bbh", "adapt_bbh", "rev_bbh", "bby", "sbbh1", "sbbh3", "sbbh4", "sbbh5", "sbbh2"):
                sets = [set(run_paired_procedure(name, pp, a, prof).tolist()) for a in (0.05, 0.1, 0.2)]
                assert sets[0] <= sets[1] <= sets[2]


class TestSBBH:
    def test_independent_profile_is_rev_bbh(self):
        rng = np.random.default_rng(17)
        prof = ShiftProfile.independent(20)
        for _ in range(300):
            pp = pp_of(rng.uniform(0, 0.3, 20) ** 2, rng.uniform(0, 0.3, 20) ** 2)
            for rule in ("per_i", "min", "median", "harmean"):
                assert sbbh(pp, 0.1, prof, rule).as_set() == rev_bbh(pp, 0.1).as_set()

    def test_orthogonal_design_reduces(self):
        Q, _ = np.linalg.qr(np.random.default_rng(18).normal(size=(40, 10)))
        data = RegressionData(Q, Q[:, :3] @ np.full(3, 6.0) + np.random.default_rng(19).standard_normal(40))
        aug = construct_knockoffs(data, s=1.0)
        pair = fission(data, aug)
        prof = beta1_profile(pair)
        assert np.allclose(prof.tau, 1.0)
        pp = paired_pvalues(pair, aug)
        assert sbbh(pp, 0.2, prof, "median").as_set() == rev_bbh(pp, 0.2).as_set()

    def test_screen_blocks_everything(self):
        prof = ShiftProfile(np.linspace(0.3, 1, 10), 0.2)
        pp = pp_of(np.zeros(10), np.full(10, 0.5))
        for rule in ("per_i", "min", "median"):
            assert sbbh(pp, 0.1, prof, rule).R == 0

    def test_manual_pipeline(self):
        from shiftfdr.shift import calibrate, shift_pvalues
        from shiftfdr.procedures import step_up

        rng = np.random.default_rng(20)
        prof = ShiftProfile(np.linspace(0.3, 1, 12), 0.2)
        level = math.sqrt(0.1)
        pp = pp_of(rng.uniform(0, 0.2, 12) ** 2, rng.uniform(0, 0.6, 12))
        tau = float(np.median(prof.tau))
        star = np.where(pp.p2 <= level, shift_pvalues(pp.p1, tau), 1.0)
        ref = step_up(star, calibrate(level, prof, tau).alphas).as_set()
        assert sbbh(pp, 0.1, prof, "median").as_set() == ref

    def test_tiny_taus_do_not_crash_or_flood(self):
        prof = ShiftProfile(np.geomspace(3e-4, 0.02, 40), 1e-4)
        rng = np.random.default_rng(21)
        pp = pp_of(rng.uniform(size=40), rng.uniform(size=40))
        for rule in ("per_i", "min", "median", "harmean", "lambda_min_fraction"):
            res = sbbh(pp, 0.2, prof, rule)
            assert res.R <= 3
        strong = pp_of(np.r_[np.full(2, 1e-200), rng.uniform(size=38)], np.r_[np.full(2, 1e-4), rng.uniform(size=38)])
        assert {0, 1} <= sbbh(strong, 0.2, prof, "per_i").as_set()


class TestKnockoffFilter:
    def test_all_positive_equal(self):
        for alpha in (0.0, 0.1):
            assert set(knockoff_filter(np.full(5, 2.0), alpha, plus=False)) == set(range(5))

    def test_two_coordinate_enumeration(self):
        # t = 1: 1 / 1 > 0.5; t = 3: 0 / 1 <= 0.5, so only W_0 survives
        assert knockoff_filter(np.array([3.0, -1.0]), 0.5, plus=False).tolist() == [0]

    def test_plus_is_stricter(self):
        rng = np.random.default_rng(22)
        for _ in range(200):
            W = rng.normal(size=30) + np.r_[np.full(8, 3.0), np.zeros(22)]
            assert set(knockoff_filter(W, 0.2, True)) <= set(knockoff_filter(W, 0.2, False))

    def test_nothing_selected(self):
        assert knockoff_filter(np.array([-1.0, -2.0]), 0.2).size == 0
        assert knockoff_filter(np.zeros(3), 0.2).size == 0

    def test_knockoff_plus_fdr(self):
        rng = np.random.default_rng(23)
        reps, alpha = 4000, 0.2
        fdp = np.empty(reps)
        for r in range(reps):
            null = rng.standard_normal(30) * rng.choice([-1, 1], 30)
            W = np.r_[np.abs(rng.normal(3, 1, 10)), null]
            sel = knockoff_filter(W, alpha, plus=True)
            fdp[r] = np.count_nonzero(sel >= 10) / max(1, sel.size)
        assert fdp.mean() <= alpha + 3 * fdp.std(ddof=1) / math.sqrt(reps)

    def test_statistics(self, fixed_design):
        X, aug = fixed_design
        Y = np.random.default_rng(24).standard_normal(100)
        W = knockoff_statistics(RegressionData(X, Y), aug)
        assert np.allclose(W, np.abs(X.T @ Y) - np.abs(aug.X_tilde.T @ Y))


def test_dispatch(fixed_design):
    X, aug = fixed_design
    Y = X[:, :4] @ np.full(4, 8.0) + np.random.default_rng(25).standard_normal(100)
    data = RegressionData(X, Y)
    pair = fission(data, aug)
    pp = paired_pvalues(pair, aug)
    prof = beta1_profile(pair)
    W = knockoff_statistics(data, aug)
    for name in PAIRED_PROCEDURES:
        sel = run_paired_procedure(name, pp, 0.2, prof, W)
        assert np.all((sel >= 0) & (sel < 40))
    with pytest.raises(ValueError):
        run_paired_procedure("sbbh1", pp, 0.2)
    with pytest.raises(ValueError):
        run_paired_procedure("knockoff", pp, 0.2, prof)
    with pytest.raises(ValueError):
        run_paired_procedure("lasso", pp, 0.2, prof, W)
