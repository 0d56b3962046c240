"""AR model tests against companion-form and closed-form references."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import solve_discrete_lyapunov

from sdpkit import armodel
from sdpkit.armodel import AcfSeries, ARModel


def oracle_acf(phi, max_lag):
    """Reference autocorrelations via the companion-form Lyapunov equation.

    For state z_t = (x_t, ..., x_{t-p+1}) the stationary covariance S
    solves S = A S A^T + B, and gamma(k) = (A^k S)[0, 0].  This route
    shares nothing with the order-p linear system used by the library.
    """
    coeffs = np.atleast_1d(np.asarray(phi, dtype=np.float64))
    p = coeffs.size
    companion = np.zeros((p, p))
    companion[0, :] = coeffs
    if p > 1:
        companion[1:, :-1] = np.eye(p - 1)
    noise_cov = np.zeros((p, p))
    noise_cov[0, 0] = 1.0
    cov = solve_discrete_lyapunov(companion, noise_cov)
    out = np.empty(max_lag + 1)
    power = np.eye(p)
    for k in range(max_lag + 1):
        out[k] = (power @ cov)[0, 0]
        power = companion @ power
    return out / out[0]


def ar2_stationary_variance(phi1, phi2, sigma):
    """Closed-form stationary variance of an AR(2) process."""
    return sigma**2 * (1 - phi2) / ((1 + phi2) * ((1 - phi2) ** 2 - phi1**2))


class TestSampleAcf:
    def test_alternating_series_exact(self):
        n = 64
        x = np.array([(-1.0) ** t for t in range(n)])
        acf = armodel.sample_acf(x, max_lag=3, dt=0.5)
        assert acf.values[0] == 1.0
        assert acf.values[1] == -(n - 1) / n
        assert acf.values[2] == (n - 2) / n
        assert acf.dt == 0.5

    def test_white_noise_decorrelates(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=200_000)
        acf = armodel.sample_acf(x, max_lag=5, dt=1.0)
        assert np.max(np.abs(acf.values[1:])) < 4.0 / math.sqrt(x.size)

    def test_mean_is_removed(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=5000)
        shifted = armodel.sample_acf(x + 123.0, max_lag=4, dt=1.0)
        plain = armodel.sample_acf(x, max_lag=4, dt=1.0)
        assert np.allclose(shifted.values, plain.values, rtol=0, atol=1e-9)

    def test_biased_estimator_is_psd(self):
        # full-N denominator keeps the acf sequence positive semidefinite
        rng = np.random.default_rng(7)
        x = rng.normal(size=40)
        acf = armodel.sample_acf(x, max_lag=20, dt=1.0)
        full = np.concatenate([acf.values[::-1], acf.values[1:]])
        toeplitz = np.array([full[20 + i - np.arange(21)] for i in range(21)])
        assert np.linalg.eigvalsh(toeplitz).min() > -1e-12

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            armodel.sample_acf(np.ones(50), max_lag=2, dt=1.0)  # constant
        with pytest.raises(ValueError):
            armodel.sample_acf(np.arange(10.0), max_lag=10, dt=1.0)  # too few
        with pytest.raises(ValueError):
            armodel.sample_acf(np.arange(10.0), max_lag=0, dt=1.0)


class TestStationarity:
    @pytest.mark.parametrize("phi,expected", [
        ((0.5,), True),
        ((1.0,), False),
        ((-0.999,), True),
        ((1.9799, -0.9879), True),
        ((1.5, -0.5), False),   # unit root
        ((0.2, 0.9), False),
        ((), True),
    ])
    def test_known_cases(self, phi, expected):
        assert armodel.is_stationary(phi) is expected

    @settings(max_examples=200, deadline=None)
    @given(st.floats(-2.9, 2.9), st.floats(-1.4, 1.4))
    def test_ar2_triangle(self, phi1, phi2):
        # AR(2) is stationary iff |phi2| < 1 and phi2 +- phi1 < 1
        margin = min(1 - abs(phi2), 1 - (phi1 + phi2), 1 - (phi2 - phi1))
        if abs(margin) < 1e-6:
            return  # too close to the boundary for root finding
        assert armodel.is_stationary((phi1, phi2)) is (margin > 0)


class TestTheoreticalAcf:
    @pytest.mark.parametrize("phi", [
        (0.8,),
        (-0.6,),
        (0.9, -0.2),
        (1.9799, -0.9879),
        (0.4, 0.1, -0.3),
        (0.2, -0.1, 0.05, 0.3),
    ])
    def test_matches_lyapunov_oracle(self, phi):
        acf = armodel.theoretical_acf(phi, max_lag=25, dt=1.0)
        assert np.allclose(acf.values, oracle_acf(phi, 25), rtol=1e-9, atol=1e-9)

    def test_ar1_closed_form(self):
        acf = armodel.theoretical_acf((0.7,), max_lag=6, dt=1.0)
        assert np.allclose(acf.values, 0.7 ** np.arange(7), rtol=1e-13, atol=0)

    def test_bundled_model_first_lag(self):
        acf = armodel.theoretical_acf((1.9799, -0.9879), max_lag=1, dt=0.1)
        # rho(1) = phi1 / (1 - phi2) for AR(2)
        assert acf.values[1] == pytest.approx(1.9799 / 1.9879, rel=1e-14)
        assert acf.values[1] == pytest.approx(0.9959756526988279, rel=1e-14)

    def test_rejects_non_stationary(self):
        with pytest.raises(ValueError):
            armodel.theoretical_acf((1.01,), max_lag=3, dt=1.0)


class TestFitCls:
    def test_noiseless_recursion_recovered_exactly(self):
        phi = (0.6, 0.2)
        x = np.empty(60)
        x[0], x[1] = 3.0, -2.0
        for t in range(2, x.size):
            x[t] = phi[0] * x[t - 1] + phi[1] * x[t - 2]
        fit = armodel.fit_cls(x, p=2, dt=0.1)
        assert fit.phi == pytest.approx(phi, abs=1e-8)
        assert fit.sigma_eps == pytest.approx(0.0, abs=1e-9)
        assert fit.dt == 0.1

    def test_recovers_simulated_coefficients(self):
        model = ARModel((0.9, -0.2), 1.0, 1.0)
        x = armodel.simulate(model, n=20_000, seed=12)
        fit = armodel.fit_cls(x, p=2, dt=1.0)
        assert fit.phi == pytest.approx(model.phi, abs=0.02)
        assert fit.sigma_eps == pytest.approx(1.0, abs=0.02)

    def test_white_noise_gives_near_zero_coefficient(self):
        x = np.random.default_rng(9).normal(size=50_000)
        fit = armodel.fit_cls(x, p=1, dt=1.0)
        assert abs(fit.phi[0]) < 0.02

    def test_intercept_absorbs_offset(self):
        model = ARModel((0.7,), 0.5, 1.0)
        x = armodel.simulate(model, n=10_000, seed=3)
        fit_plain = armodel.fit_cls(x, p=1, dt=1.0)
        fit_shift = armodel.fit_cls(x + 50.0, p=1, dt=1.0)
        assert fit_shift.phi == pytest.approx(fit_plain.phi, abs=1e-6)
        assert fit_shift.sigma_eps == pytest.approx(fit_plain.sigma_eps, abs=1e-6)

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            armodel.fit_cls(np.arange(10.0), p=0, dt=1.0)
        with pytest.raises(ValueError):
            armodel.fit_cls(np.arange(3.0), p=2, dt=1.0)
        with pytest.raises(ValueError):
            armodel.fit_cls(np.array([1.0, np.inf, 2.0, 3.0]), p=1, dt=1.0)


class TestFitMultilag:
    def test_exact_acf_recovered(self):
        phi = (0.9, -0.2)
        acf = armodel.theoretical_acf(phi, max_lag=30, dt=1.0)
        fitted, crit = armodel.fit_multilag(acf, p=2, lag_count=30)
        assert fitted == pytest.approx(phi, abs=1e-6)
        assert crit < 1e-12

    def test_oscillatory_model_recovered(self):
        phi = (1.9799, -0.9879)
        acf = armodel.theoretical_acf(phi, max_lag=100, dt=0.1)
        fitted, crit = armodel.fit_multilag(acf, p=2, lag_count=100)
        assert fitted == pytest.approx(phi, abs=1e-5)
        assert crit < 1e-10

    def test_result_is_stationary_for_noisy_acf(self):
        phi = (0.7, 0.1)
        acf = armodel.theoretical_acf(phi, max_lag=20, dt=1.0)
        rng = np.random.default_rng(17)
        noisy = AcfSeries(
            np.concatenate([[1.0], acf.values[1:] + rng.normal(0, 0.01, 20)]),
            dt=1.0,
        )
        fitted, crit = armodel.fit_multilag(noisy, p=2, lag_count=20)
        assert armodel.is_stationary(fitted)
        assert math.isfinite(crit)

    def test_longer_lag_window_changes_tradeoff(self):
        # with a mis-specified order the fit depends on the lag window
        phi = (0.5, 0.2, 0.15)
        acf = armodel.theoretical_acf(phi, max_lag=40, dt=1.0)
        short, _ = armodel.fit_multilag(acf, p=2, lag_count=2)
        long, _ = armodel.fit_multilag(acf, p=2, lag_count=40)
        assert short != pytest.approx(long, abs=1e-6)

    def test_rejects_bad_lag_count(self):
        acf = armodel.theoretical_acf((0.5,), max_lag=5, dt=1.0)
        with pytest.raises(ValueError):
            armodel.fit_multilag(acf, p=1, lag_count=6)
        with pytest.raises(ValueError):
            armodel.fit_multilag(acf, p=0, lag_count=3)


class TestInnovationStd:
    def test_ar1_closed_form(self):
        acf = armodel.theoretical_acf((0.8,), max_lag=1, dt=1.0)
        out = armodel.innovation_std_from_acf((0.8,), 1.0, acf)
        assert out == pytest.approx(0.6, rel=1e-12)

    def test_consistency_with_stationary_moments(self):
        model = ARModel((1.9799, -0.9879), 0.00347, 0.1)
        std_x, _ = armodel.stationary_moments(model)
        acf = armodel.theoretical_acf(model.phi, max_lag=2, dt=0.1)
        back = armodel.innovation_std_from_acf(model.phi, std_x**2, acf)
        assert back == pytest.approx(model.sigma_eps, rel=1e-10)

    def test_rejects_negative_radicand(self):
        bad = AcfSeries(np.array([1.0, 2.0]), dt=1.0)
        with pytest.raises(ValueError):
            armodel.innovation_std_from_acf((0.9,), 1.0, bad)


class TestSimulate:
    def test_deterministic_in_seed(self):
        model = armodel.ARModel((0.7,), 1.0, 1.0)
        a = armodel.simulate(model, n=500, seed=21)
        b = armodel.simulate(model, n=500, seed=21)
        c = armodel.simulate(model, n=500, seed=22)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_zero_noise_is_identically_zero(self):
        model = armodel.ARModel((0.9, -0.2), 0.0, 1.0)
        x = armodel.simulate(model, n=100, seed=0)
        assert np.array_equal(x, np.zeros(100))

    def test_variance_matches_stationary_moments(self):
        model = armodel.ARModel((0.9, -0.2), 1.0, 1.0)
        std_x, _ = armodel.stationary_moments(model)
        x = armodel.simulate(model, n=400_000, seed=33)
        assert np.std(x) == pytest.approx(std_x, rel=0.02)

    def test_burn_in_override(self):
        model = armodel.ARModel((0.7,), 1.0, 1.0)
        x = armodel.simulate(model, n=10, seed=1, burn_in=0)
        rng = np.random.default_rng(1)
        eps = rng.normal(0.0, 1.0, size=10)
        manual = np.empty(10)
        prev = 0.0
        for t in range(10):
            manual[t] = 0.7 * prev + eps[t]
            prev = manual[t]
        assert np.allclose(x, manual, rtol=1e-14, atol=0)

    def test_rejects_non_stationary_default_burn_in(self):
        with pytest.raises(ValueError):
            armodel.simulate(armodel.ARModel((1.2,), 1.0, 1.0), n=10, seed=0)

    def test_rejects_bad_args(self):
        model = armodel.ARModel((0.5,), 1.0, 1.0)
        with pytest.raises(ValueError):
            armodel.simulate(model, n=0, seed=0)
        with pytest.raises(ValueError):
            armodel.simulate(model, n=10, seed=0, burn_in=-1)


class TestStateSpace:
    def test_transition_entries(self):
        model = armodel.ARModel((1.9799, -0.9879), 0.00347, 0.1)
        ss = armodel.to_state_space(model)
        assert ss.transition[0, 0] == pytest.approx(0.992, rel=1e-12)
        assert ss.transition[0, 1] == pytest.approx(0.09879, rel=1e-12)
        assert ss.transition[1, 0] == pytest.approx(-0.08, rel=1e-9)
        assert ss.transition[1, 1] == pytest.approx(0.9879, rel=1e-12)
        assert np.allclose(ss.noise_gain, [1.0, 10.0], rtol=1e-12)

    def test_step_reproduces_scalar_recursion(self):
        model = armodel.ARModel((0.9, -0.5), 1.0, 0.25)
        ss = armodel.to_state_space(model)
        rng = np.random.default_rng(8)
        eps = rng.normal(size=200)
        x_prev, x_cur = 0.3, -0.1
        value, diff = x_cur, (x_cur - x_prev) / model.dt
        for e in eps:
            x_next = model.phi[0] * x_cur + model.phi[1] * x_prev + e
            value, diff = ss.step(value, diff, e)
            assert value == pytest.approx(x_next, rel=1e-10, abs=1e-12)
            assert diff == pytest.approx((x_next - x_cur) / model.dt, rel=1e-9, abs=1e-9)
            x_prev, x_cur = x_cur, x_next

    def test_rejects_wrong_order(self):
        with pytest.raises(ValueError):
            armodel.to_state_space(armodel.ARModel((0.5,), 1.0, 1.0))

    def test_transition_is_frozen(self):
        ss = armodel.to_state_space(armodel.ARModel((0.5, 0.1), 1.0, 1.0))
        with pytest.raises(ValueError):
            ss.transition[0, 0] = 0.0


class TestStationaryMoments:
    def test_ar1_closed_form(self):
        std_x, std_diff = armodel.stationary_moments(armodel.ARModel((0.5,), 1.0, 1.0))
        assert std_x == pytest.approx(math.sqrt(4.0 / 3.0), rel=1e-13)
        assert std_diff == pytest.approx(math.sqrt(2 * (4 / 3) * 0.5), rel=1e-13)

    def test_ar2_closed_form(self):
        phi1, phi2, sigma, dt = 0.6, 0.2, 0.8, 0.5
        model = armodel.ARModel((phi1, phi2), sigma, dt)
        std_x, std_diff = armodel.stationary_moments(model)
        gamma0 = ar2_stationary_variance(phi1, phi2, sigma)
        rho1 = phi1 / (1 - phi2)
        assert std_x == pytest.approx(math.sqrt(gamma0), rel=1e-12)
        assert std_diff == pytest.approx(math.sqrt(2 * gamma0 * (1 - rho1)) / dt, rel=1e-12)

    def test_bundled_model_values(self):
        model = armodel.ARModel((1.9799, -0.9879), 0.00347, 0.1)
        std_x, std_diff = armodel.stationary_moments(model)
        gamma0 = ar2_stationary_variance(1.9799, -0.9879, 0.00347)
        assert std_x == pytest.approx(math.sqrt(gamma0), rel=1e-12)
        assert std_x == pytest.approx(0.2496400014603404, rel=1e-13)
        assert std_diff == pytest.approx(0.22396332213051348, rel=1e-13)

    def test_rejects_non_stationary(self):
        with pytest.raises(ValueError):
            armodel.stationary_moments(armodel.ARModel((1.1,), 1.0, 1.0))


class TestModelValidation:
    def test_rejects_bad_parameters(self):
        with pytest.raises(ValueError):
            armodel.ARModel((0.5,), -1.0, 1.0)
        with pytest.raises(ValueError):
            armodel.ARModel((0.5,), 1.0, 0.0)
        with pytest.raises(ValueError):
            armodel.ARModel((np.nan,), 1.0, 1.0)

    def test_acfseries_must_start_at_one(self):
        with pytest.raises(ValueError):
            AcfSeries(np.array([0.99, 0.5]), dt=1.0)


class TestPersistence:
    def test_roundtrip(self, tmp_path):
        model = armodel.ARModel((1.9799, -0.9879), 0.00347, 0.1)
        path = tmp_path / "model.json"
        armodel.save_ar_model(model, path)
        back, fit = armodel.load_ar_model(path)
        assert back == model
        assert fit is None

    def test_roundtrip_with_provenance(self, tmp_path):
        model = armodel.ARModel((0.5,), 1.0, 1.0)
        prov = {"method": "multilag", "lag_count": 40, "criterion": 1.5e-9}
        path = tmp_path / "model.json"
        armodel.save_ar_model(model, path, provenance=prov)
        back, fit = armodel.load_ar_model(path)
        assert back == model
        assert fit == prov

    def test_rejects_inconsistent_order(self, tmp_path):
        path = tmp_path / "model.json"
        armodel.save_ar_model(armodel.ARModel((0.5, 0.2), 1.0, 1.0), path)
        doc = path.read_text().replace('"p": 2', '"p": 3')
        path.write_text(doc)
        with pytest.raises(ValueError, match="declared order"):
            armodel.load_ar_model(path)

    def test_rejects_garbage(self, tmp_path):
        path = tmp_path / "model.json"
        path.write_text("{{{{")
        with pytest.raises(ValueError, match="corrupt"):
            armodel.load_ar_model(path)
