"""Message-passing tests: denoiser identities, fixed-point agreement with the
exact minimizer / exact Gaussian posterior, and negative controls."""

import numpy as np
import pytest
from scipy.special import expit

from rfcal.gamp import (
    GampOptions,
    PriorDenoiser,
    mode_precisions,
    prior_denoise,
    run_gamp,
    spectral_basis,
    trace_to_csv,
)
from rfcal.monte_carlo import generate_dataset, overlaps_emp, train_erm
from rfcal.state_evolution import ScenarioConfig, solve_fixed_point


def make_ds(seed=0, d=60, gamma=1.5, n_train=120, tau0=0.5):
    return generate_dataset(d=d, n_train=n_train, n_val=0, n_test=10,
                            gamma=gamma, tau0=tau0, seed=seed)


class TestPriorDenoiser:
    def test_ridge_closed_form(self):
        den = PriorDenoiser(kind="ridge", lam=2.0)
        b = np.array([1.0, -3.0])
        A = np.array([0.5, 1.0])
        mean, var = den.denoise(b, A)
        np.testing.assert_allclose(mean, b / 2.5 * np.array([1, 2.5 / 3.0]))
        np.testing.assert_allclose(var, 1.0 / (2.0 + A))

    def test_infinite_precision_pins_mode(self):
        den = PriorDenoiser(kind="ridge", lam=np.array([1.0, np.inf]))
        mean, var = den.denoise(np.array([2.0, 2.0]), np.array([1.0, 1.0]))
        assert mean[1] == 0.0 and var[1] == 0.0
        assert mean[0] == pytest.approx(1.0)

    def test_gaussian_cov_matches_resolvent(self):
        g = np.random.default_rng(0)
        B = g.normal(size=(5, 5))
        S = B @ B.T
        A = g.uniform(0.5, 2.0, size=5)
        b = g.normal(size=5)
        den = PriorDenoiser(kind="gaussian_cov", sigma_star=S)
        mean, var = prior_denoise(den, b, A)
        M = np.linalg.inv(np.linalg.inv(S) + np.diag(A))
        np.testing.assert_allclose(mean, M @ b, rtol=1e-9)
        np.testing.assert_allclose(var, np.diag(M), rtol=1e-9)

    def test_gaussian_cov_singular_sigma(self):
        # A rank-deficient Σ* is handled through (I + Σ*A)⁻¹Σ*.
        v = np.array([1.0, 1.0, 0.0])
        S = np.outer(v, v)
        den = PriorDenoiser(kind="gaussian_cov", sigma_star=S)
        mean, var = den.denoise(np.array([1.0, 1.0, 5.0]), np.ones(3))
        assert mean[2] == 0.0 and var[2] == 0.0

    def test_validation(self):
        with pytest.raises(ValueError):
            PriorDenoiser(kind="ridge", lam=0.0)
        with pytest.raises(ValueError):
            PriorDenoiser(kind="gaussian_cov", sigma_star=np.array([[1.0, 2.0],
                                                                    [0.0, 1.0]]))
        with pytest.raises(ValueError):
            PriorDenoiser(kind="mystery")
        den = PriorDenoiser(kind="ridge", lam=1.0)
        with pytest.raises(ValueError):
            den.denoise(np.zeros(2), np.array([1.0, -1.0]))


class TestSpectralBasis:
    def test_transform_whitens_design(self):
        # Columns of Ã = U T have variance ≈ 1/p and vanishing cross moments.
        ds = make_ds(seed=1, d=150, n_train=600)
        basis = spectral_basis(ds)
        A = ds.U_train @ basis.transform
        p = A.shape[1]
        col_var = np.mean(A * A, axis=0) * p
        assert abs(float(np.mean(col_var)) - 1.0) < 0.05

    def test_mode_precisions(self):
        ds = make_ds(seed=2, d=40)
        basis = spectral_basis(ds)
        np.testing.assert_allclose(mode_precisions(ds, "erm", 0.3, basis),
                                   0.3 / basis.omega)
        pi = mode_precisions(ds, "bo", 0.0, basis)
        pos = basis.eigenvalues > 0
        k1sq = ds.kappa1 ** 2
        gamma = ds.F.shape[0] / ds.F.shape[1]
        np.testing.assert_allclose(
            pi[pos], basis.omega[pos] / (gamma * k1sq * basis.eigenvalues[pos]))
        assert np.all(np.isinf(pi[~pos]))
        with pytest.raises(ValueError):
            mode_precisions(ds, "erm", 0.0, basis)
        with pytest.raises(ValueError):
            mode_precisions(ds, "lap", 1.0, basis)


class TestFixedPoints:
    def test_erm_matches_newton(self):
        # The GAMP fixed point for the logistic channel + ridge prior is the
        # regularized logistic minimizer.
        ds = make_ds(seed=3, d=50, n_train=100)
        lam = 0.1
        res = run_gamp(ds, "erm", lam)
        assert res.converged
        model = train_erm(ds, lam=lam)
        denom = float(np.linalg.norm(model.theta_hat))
        assert float(np.linalg.norm(res.theta_hat - model.theta_hat)) / denom < 1e-4

    def test_bo_fixed_point_is_init_independent(self):
        # The converged bo marginals are a property of the instance, not of
        # the initialization: a 10x larger random init lands on the same
        # fixed point.
        ds = make_ds(seed=4, d=40, n_train=80)
        res1 = run_gamp(ds, "bo", 0.0)
        ds2 = generate_dataset(d=40, n_train=80, n_val=0, n_test=10,
                               gamma=1.5, tau0=0.5, seed=4)
        res2 = run_gamp(ds2, "bo", 0.0,
                        GampOptions(init_scale=1.0))
        assert res1.converged and res2.converged
        np.testing.assert_allclose(res1.theta_hat, res2.theta_hat, atol=1e-5)
        np.testing.assert_allclose(res1.c_hat, res2.c_hat, atol=1e-5)

    def test_eb_overlaps_near_state_evolution(self):
        d, gamma, lam = 150, 1.5, 1e-1
        cfg = ScenarioConfig(alpha=1.0 / gamma, gamma=gamma, tau0_sq=0.25,
                             lam=lam, activation="erf", estimator="eb")
        ov = solve_fixed_point(cfg)
        ds = generate_dataset(d=d, n_train=d, n_val=0, n_test=10,
                              gamma=gamma, tau0=0.5, seed=5)
        res = run_gamp(ds, "eb", lam)
        assert res.converged
        m_emp, q_emp = overlaps_emp(res.theta_hat, ds)
        assert m_emp == pytest.approx(ov.m, rel=0.15)
        assert q_emp == pytest.approx(ov.q, rel=0.15)

    def test_onsager_negative_control(self):
        # Without the Onsager correction the erm fixed point is biased away
        # from the true minimizer.
        ds = make_ds(seed=6, d=50, n_train=100)
        lam = 0.1
        model = train_erm(ds, lam=lam)
        denom = float(np.linalg.norm(model.theta_hat))
        good = run_gamp(ds, "erm", lam)
        bad = run_gamp(ds, "erm", lam, GampOptions(onsager=False))
        err_good = float(np.linalg.norm(good.theta_hat - model.theta_hat)) / denom
        err_bad = float(np.linalg.norm(bad.theta_hat - model.theta_hat)) / denom
        assert err_bad > 10 * err_good

    def test_score_variance_is_quadratic_form(self):
        ds = make_ds(seed=7, d=30, n_train=60)
        res = run_gamp(ds, "eb", 0.1)
        U = ds.U_test[:4]
        a = U @ res.basis.transform
        expected = np.einsum("ij,j,ij->i", a, res.c_hat, a)
        np.testing.assert_allclose(res.score_variance(U), expected, rtol=1e-12)
        assert np.all(res.score_variance(U) >= 0)


class TestTrace:
    def test_trace_csv_format(self, tmp_path):
        ds = make_ds(seed=8, d=30, n_train=60)
        res = run_gamp(ds, "erm", 0.1)
        path = tmp_path / "trace.csv"
        trace_to_csv(res, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "# rfcal-gamp-trace-v1"
        assert lines[1] == "iteration,residual,m_emp,q_emp"
        assert len(lines) == 2 + res.iterations
        first = lines[2].split(",")
        assert int(first[0]) == 1
        assert all(np.isfinite(float(v)) for v in first[1:])

    def test_residual_decreases(self):
        ds = make_ds(seed=9, d=30, n_train=60)
        res = run_gamp(ds, "erm", 0.1)
        residuals = [r for (_, r, _, _) in res.trace]
        assert residuals[-1] < 1e-7
        assert residuals[-1] < residuals[0]
