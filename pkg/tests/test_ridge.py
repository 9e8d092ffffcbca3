import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedshift import ridge as rg
from fedshift import synthdata as sd


def _inst(X, w, theta, sigma2, reg, lam_te):
    return rg.RidgeInstance(np.asarray(X, float), np.asarray(w, float), theta, sigma2, reg, lam_te)


class TestSolve:
    def test_identity_design(self):
        np.testing.assert_allclose(rg.weighted_ridge_solve(np.eye(2), [1, 1], [1, 2], 1.0), [0.5, 1.0])

    def test_weighted_identity_design(self):
        np.testing.assert_allclose(rg.weighted_ridge_solve(np.eye(2), [2, 1], [1, 2], 1.0), [2 / 3, 1.0])

    def test_unit_weights_is_ordinary_ridge(self):
        rng = np.random.default_rng(0)
        X, y = rng.standard_normal((30, 4)), rng.standard_normal(30)
        ridge = np.linalg.solve(X.T @ X + 0.7 * np.eye(4), X.T @ y)
        np.testing.assert_allclose(rg.weighted_ridge_solve(X, np.ones(30), y, 0.7), ridge, rtol=1e-12)

    def test_minimizes_objective(self):
        rng = np.random.default_rng(1)
        X, y, w = rng.standard_normal((20, 3)), rng.standard_normal(20), rng.uniform(0, 2, 20)
        theta = rg.weighted_ridge_solve(X, w, y, 0.3)

        def obj(t):
            return np.sum(w * (X @ t - y) ** 2) + 0.3 * t @ t

        for _ in range(20):
            assert obj(theta) <= obj(theta + 1e-3 * rng.standard_normal(3))

    def test_singular_without_regularizer(self):
        X = np.array([[1.0, 0.0], [2.0, 0.0]])
        with pytest.raises(rg.SingularSystemError):
            rg.weighted_ridge_solve(X, [1, 1], [1, 2], 0.0)


class TestBiasVariance:
    def test_one_dimensional_example(self):
        inst = _inst(np.ones((10, 1)), np.ones(10), [1.0], 2.0, 1.0, [0.5])
        bias, var = rg.bias_variance_fixed(inst)
        assert bias == pytest.approx(0.5 / 121, rel=1e-12)
        assert var == pytest.approx(2.0 * 5 / 121, rel=1e-12)
        spec = rg.OneHotSpectrum([10], [1.0], 1.0)
        np.testing.assert_allclose(rg.bias_variance_onehot(spec, [1.0], [0.5], 2.0), (bias, var), rtol=1e-12)

    def test_zero_noise_zero_variance(self):
        inst = rg.sample_ridge_instance(np.random.default_rng(0))
        inst.noise_var = 0.0
        assert rg.bias_variance_fixed(inst)[1] == 0.0

    def test_tiny_regularizer_kills_bias(self):
        inst = rg.sample_ridge_instance(np.random.default_rng(1))
        inst.reg = 1e-10
        assert rg.bias_variance_fixed(inst)[0] < 1e-15

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_onehot_matches_matrix_path(self, seed):
        rng = np.random.default_rng(seed)
        d = 4
        mu = rng.multinomial(50, np.ones(d) / d)
        spec = rg.OneHotSpectrum(mu, rng.uniform(0, 3, d), float(rng.uniform(0.05, 5)))
        theta, lam_te, s2 = rng.standard_normal(d), rng.uniform(0.01, 10, d), float(rng.uniform(0.1, 2))
        closed = rg.bias_variance_onehot(spec, theta, lam_te, s2)
        matrix = rg.bias_variance_fixed(spec.instance(theta, lam_te, s2))
        np.testing.assert_allclose(closed, matrix, rtol=1e-10)

    def test_unobserved_coordinate(self):
        theta, lam_te = np.array([2.0, 1.0]), np.array([0.3, 1.0])
        with_gap = rg.bias_variance_onehot(rg.OneHotSpectrum([0, 5], [1, 1], 0.5), theta, lam_te, 1.0)
        single = rg.bias_variance_onehot(rg.OneHotSpectrum([5], [1], 0.5), theta[1:], lam_te[1:], 1.0)
        assert with_gap[0] == pytest.approx(single[0] + 4.0 * 0.3, rel=1e-12)
        assert with_gap[1] == pytest.approx(single[1], rel=1e-12)

    def test_unit_weights_recover_erm_formulas(self):
        mu, reg = np.array([3.0, 7.0]), 0.4
        theta, lam_te, s2 = np.array([1.0, -2.0]), np.array([0.5, 2.0]), 0.3
        bias, var = rg.bias_variance_onehot(rg.OneHotSpectrum(mu, 1.0, reg), theta, lam_te, s2)
        assert bias == pytest.approx(reg**2 * np.sum(theta**2 * lam_te / (mu + reg) ** 2), rel=1e-14)
        assert var == pytest.approx(s2 * np.sum(lam_te * mu / (mu + reg) ** 2), rel=1e-14)

    def test_implicit_regularization_identity(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            d = 5
            lam, lam_te = rng.uniform(0.01, 10, d), rng.uniform(0.01, 10, d)
            mu, reg, theta = rng.integers(1, 51, d).astype(float), rng.uniform(0.01, 10), rng.standard_normal(d)
            w = np.sqrt(lam_te / lam)
            direct = rg.bias_variance_onehot(rg.OneHotSpectrum(mu, w, reg), theta, lam_te, 0.0)[0]
            rewritten = reg**2 * np.sum(theta**2 * lam / (mu + np.sqrt(lam / lam_te) * reg) ** 2)
            assert direct == pytest.approx(rewritten, rel=1e-12)

    def test_depends_only_on_weight_aggregates(self):
        rng = np.random.default_rng(3)
        mu = np.array([4, 6, 5])
        spec = rg.OneHotSpectrum(mu, [0.5, 1.5, 2.0], 0.8)
        theta, lam_te = rng.standard_normal(3), rng.uniform(0.1, 3, 3)
        base = spec.instance(theta, lam_te, 1.0)
        perm = rng.permutation(len(base.weights))
        X_perm, w_perm = base.X[perm], base.weights[perm]
        permuted = rg.RidgeInstance(X_perm, w_perm, theta, 1.0, 0.8, lam_te)
        np.testing.assert_allclose(rg.bias_variance_fixed(permuted), rg.bias_variance_fixed(base), rtol=1e-12)
        # aggregates determine B and V for arbitrary non-uniform row weights
        w_rows = rng.uniform(0, 3, len(base.weights))
        coords = base.X.argmax(axis=1)
        sum_w = np.bincount(coords, w_rows, 3)
        sum_w2 = np.bincount(coords, w_rows**2, 3)
        matrix = rg.bias_variance_fixed(base.with_weights(w_rows))
        np.testing.assert_allclose(rg.bias_variance_aggregates(sum_w, sum_w2, theta, lam_te, 1.0, 0.8), matrix, rtol=1e-10)
        # a second assignment with the same aggregates: swap rows inside one coordinate
        idx = np.flatnonzero(coords == 1)
        swapped = w_rows.copy()
        swapped[idx] = swapped[idx[::-1]]
        np.testing.assert_allclose(rg.bias_variance_fixed(base.with_weights(swapped)), matrix, rtol=1e-12)

    def test_invalid_spectrum(self):
        with pytest.raises(ValueError):
            rg.OneHotSpectrum([1.5, 2], 1.0, 1.0)
        with pytest.raises(ValueError):
            rg.OneHotSpectrum([1, 2], 1.0, 0.0)


class TestMonteCarlo:
    def test_zero_noise_equals_bias(self):
        inst = rg.sample_ridge_instance(np.random.default_rng(2))
        inst.noise_var = 0.0
        mc = rg.excess_risk_mc(inst, 50, seed=0)
        assert mc.mean == pytest.approx(rg.bias_variance_fixed(inst)[0], rel=1e-12)
        assert mc.stderr == pytest.approx(0.0, abs=1e-15)

    def test_zero_weights_null_estimator(self):
        inst = rg.sample_ridge_instance(np.random.default_rng(4)).with_weights(np.zeros(40))
        mc = rg.excess_risk_mc(inst, 100, seed=1)
        expected = inst.theta_star @ inst.test_cov @ inst.theta_star
        assert mc.mean == pytest.approx(expected, rel=1e-12)

    def test_identity_on_one_instance(self):
        inst = rg.sample_ridge_instance(np.random.default_rng(7))
        mc = rg.excess_risk_mc(inst, 10_000, seed=3)
        assert abs(mc.mean - sum(rg.bias_variance_fixed(inst))) <= 3 * mc.stderr

    def test_deterministic(self):
        inst = rg.sample_ridge_instance(np.random.default_rng(8))
        assert rg.excess_risk_mc(inst, 500, 11) == rg.excess_risk_mc(inst, 500, 11)


class TestConditions:
    def test_equal_spectra_w_equal_xi(self):
        spec = rg.OneHotSpectrum([3, 9], 0.0, 1.0)
        spec = rg.OneHotSpectrum(spec.mu, spec.xi, 1.0)
        verdict = rg.theorem2_condition(spec, [1.0, 2.0], [1.0, 2.0])
        assert verdict.holds
        np.testing.assert_allclose(verdict.lower, 0.0)

    def test_quadrupled_test_spectrum_fails(self):
        mu = 9.0  # xi = 1 / (1 + 9) = 0.1
        spec = rg.OneHotSpectrum([mu], [0.5], 1.0)
        assert spec.xi[0] == pytest.approx(0.1)
        verdict = rg.theorem2_condition(spec, [1.0], [4.0])
        assert not verdict.holds and verdict.lower[0] == pytest.approx(1.0)

    def test_feasibility_forms_agree(self):
        rng = np.random.default_rng(9)
        for _ in range(200):
            d = 5
            spec = rg.OneHotSpectrum(rng.integers(1, 51, d), rng.uniform(0, 2, d), rng.uniform(0.01, 10))
            v = rg.theorem2_condition(spec, rng.uniform(0.01, 10, d), rng.uniform(0.01, 10, d))
            np.testing.assert_array_equal(v.interval_nonempty, v.feasibility_interval)

    def test_rejects_non_positive_spectrum(self):
        with pytest.raises(ValueError):
            rg.theorem2_condition(rg.OneHotSpectrum([1], 1.0, 1.0), [0.0], [1.0])

    def test_sampled_cases_satisfy_condition(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            case = rg.sample_onehot_case(rng, "theorem2")
            assert rg.theorem2_condition(case.spectrum, case.train_spectrum, case.test_spectrum).holds

    def test_prop5_weights_at_most_one(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            case = rg.sample_onehot_case(rng, "prop5")
            assert rg.prop5_condition(case.spectrum, case.train_spectrum, case.test_spectrum).holds
            assert np.all(case.spectrum.w <= 1.0)

    def test_prop5_precondition_at_half(self):
        spec = rg.OneHotSpectrum([1], [0.1], 1.0)
        assert spec.xi[0] == 0.5
        assert rg.prop5_condition(spec, [2.0], [2.0]).interval_nonempty[0]

    def test_prop5_needs_observed_coordinates(self):
        with pytest.raises(ValueError):
            rg.prop5_condition(rg.OneHotSpectrum([0, 1], 1.0, 1.0), [1, 1], [1, 1])

    def test_sweep_report_shape(self):
        rep = rg.soundness_sweep("theorem2", 200, seed=0)
        assert rep.instances == 200 and 0 <= rep.violations <= 200
        assert len(rep.violating_examples) <= rep.violations
        json.dumps(rep.to_dict())
        assert rg.soundness_sweep("theorem2", 200, seed=0).to_dict() == rep.to_dict()


class TestLemmaSweep:
    def test_small_sweep(self):
        checks = rg.lemma_identity_sweep(3, 4000, seed=0)
        assert len(checks) == 3
        assert sum(abs(c.z) <= 3 for c in checks) >= 2


class TestEigenReport:
    def test_identical_samples(self):
        x = np.random.default_rng(0).standard_normal((200, 4))
        rows = rg.eigen_ratio_report(x, x)
        assert len(rows) == 4
        np.testing.assert_allclose([r.ratio for r in rows], 1.0, rtol=1e-12)

    def test_test_spectrum_dominated(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((500, 3)) * np.array([3.0, 2.0, 1.0])
        rows = rg.eigen_ratio_report(x, 0.5 * x)
        assert all(r.ratio <= 1.0 and r.ratio < r.bound for r in rows)

    def test_length_is_rank(self):
        rng = np.random.default_rng(2)
        x = np.hstack([rng.standard_normal((50, 2)), np.zeros((50, 3))])
        rows = rg.eigen_ratio_report(x, rng.standard_normal((50, 5)))
        assert len(rows) == 2

    def test_near_zero_flag(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((50, 3))
        te = x.copy()
        te[:, 2] = 0.0
        te[:, 1] *= 1e-8
        rows = rg.eigen_ratio_report(x, te)
        assert rows[-1].near_zero and not rows[0].near_zero

    def test_csv(self, tmp_path):
        x = np.random.default_rng(4).standard_normal((20, 2))
        rows = rg.eigen_ratio_report(x, x)
        rg.write_rows_csv(rows, tmp_path / "e.csv", ["index", "ratio", "bound"])
        lines = (tmp_path / "e.csv").read_text().splitlines()
        assert lines[0] == "index,ratio,bound" and len(lines) == 3

    def test_onehot_scenario_ratios(self):
        x = sd.sample_one_hot([0.5, 0.3, 0.2], 2000, seed=0)
        rows = rg.eigen_ratio_report(x, x)
        assert [round(r.train_eig, 6) for r in rows] == sorted((round(v, 6) for v in x.mean(axis=0)), reverse=True)


class TestSerialization:
    def test_instance_json_round_trip(self, tmp_path):
        inst = rg.sample_ridge_instance(np.random.default_rng(6))
        inst.save(tmp_path / "i.json")
        back = rg.RidgeInstance.load(tmp_path / "i.json")
        np.testing.assert_array_equal(back.X, inst.X)
        np.testing.assert_array_equal(back.test_cov, inst.test_cov)
        assert rg.bias_variance_fixed(back) == rg.bias_variance_fixed(inst)

    def test_dimension_check(self):
        with pytest.raises(ValueError):
            rg.RidgeInstance(np.eye(2), np.ones(3), np.ones(2), 1.0, 1.0, np.ones(2))
