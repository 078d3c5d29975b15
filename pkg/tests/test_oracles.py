import math
from dataclasses import replace

import numpy as np
import pytest

from core.chain import InitialDistParams
from core.errors import ConfigError, OracleError
from core.evaluation import expected_log_target
from core.oracles import (
    AisConfig,
    WeightedBatch,
    ais_estimate,
    annealed_target,
    default_ais_p0,
    ess_weights,
    exact_gaussian_sample,
    importance_sample,
    rejection_bound,
    rejection_sample,
    self_normalized_log_target,
)
from core.targets import BENCHMARK_IDS, Box, gaussian_target, log_density, make_target, scale_target, uniform_target


class TestEss:
    def test_values(self):
        assert ess_weights(np.array([2.0, 1.0, 1.0])) == pytest.approx(16.0 / 6.0)
        assert ess_weights(np.ones(100)) == pytest.approx(100.0)
        assert ess_weights(np.array([1.0, 0.0, 0.0, 0.0])) == pytest.approx(1.0)

    def test_weighted_batch(self):
        weighted = WeightedBatch(np.zeros((3, 2)), np.log([2.0, 1.0, 1.0]))
        assert weighted.ess() == pytest.approx(16.0 / 6.0)
        np.testing.assert_allclose(weighted.normalized_weights(), [0.5, 0.25, 0.25])
        assert weighted.log_mean_weight() == pytest.approx(math.log(4.0 / 3.0))

    def test_non_finite_weights(self):
        with pytest.raises(OracleError):
            WeightedBatch(np.zeros((2, 2)), [0.0, math.nan])

    def test_frame(self):
        frame = WeightedBatch(np.zeros((2, 2)), [0.0, -1.0]).to_frame()
        assert list(frame.columns) == ["x0", "x1", "log_weight"]


class TestRejection:
    def test_corr_gauss(self, corr_gauss):
        batch = rejection_sample(corr_gauss, 100_000, seed=1)
        assert batch.n == 100_000
        np.testing.assert_allclose(np.cov(batch.points.T), [[2.0, 1.5], [1.5, 1.6]], atol=0.05)
        estimate, _ = expected_log_target(batch, corr_gauss)
        assert estimate == pytest.approx(-1.0, abs=0.02)
        assert batch.metadata["method"] == "rejection"

    def test_uniform_accepts_everything(self):
        target = uniform_target(Box((-1.0, -1.0), (1.0, 1.0)))
        batch = rejection_sample(target, 1000, seed=0, chunk_size=1000, safety=1.0)
        assert batch.metadata["acceptance"] == 1.0
        assert np.all(target.sampling_box.contains(batch.points))

    @pytest.mark.parametrize("target_id", ["corr-gauss", *BENCHMARK_IDS])
    def test_bound_covers_density(self, target_id):
        target = make_target(target_id)
        box = target.sampling_box
        points = np.random.default_rng(3).uniform(box.lower, box.upper, size=(50_000, 2))
        assert np.max(log_density(target, points)) <= rejection_bound(target)

    def test_deterministic(self, corr_gauss):
        a = rejection_sample(corr_gauss, 500, seed=4)
        b = rejection_sample(corr_gauss, 500, seed=4)
        np.testing.assert_array_equal(a.points, b.points)

    def test_sequence_seed(self, corr_gauss):
        a = rejection_sample(corr_gauss, 200, [0, 1])
        b = rejection_sample(corr_gauss, 200, [0, 1])
        c = rejection_sample(corr_gauss, 200, [0, 2])
        np.testing.assert_array_equal(a.points, b.points)
        assert not np.array_equal(a.points, c.points)
        assert a.seed == [0, 1]

    def test_integer_seed_is_a_one_element_sequence(self, corr_gauss):
        a = rejection_sample(corr_gauss, 200, 5)
        b = rejection_sample(corr_gauss, 200, [5])
        np.testing.assert_array_equal(a.points, b.points)

    def test_hopeless_box_aborts(self):
        narrow = gaussian_target("narrow", [[1e-6, 0.0], [0.0, 1e-6]])
        narrow = replace(narrow, sampling_box=Box((-100.0, -100.0), (100.0, 100.0)))
        with pytest.raises(OracleError):
            rejection_sample(narrow, 10, seed=0)


class TestExactGaussian:
    def test_moments(self, corr_gauss):
        batch = exact_gaussian_sample(corr_gauss, 100_000, seed=2)
        np.testing.assert_allclose(np.cov(batch.points.T), [[2.0, 1.5], [1.5, 1.6]], atol=0.05)

    def test_sequence_seed(self, corr_gauss):
        a = exact_gaussian_sample(corr_gauss, 50, [2, 1])
        b = exact_gaussian_sample(corr_gauss, 50, [2, 1])
        np.testing.assert_array_equal(a.points, b.points)

    def test_requires_gaussian(self):
        with pytest.raises(OracleError):
            exact_gaussian_sample(make_target("bench-c"), 10, seed=0)


class TestImportanceSampling:
    def test_log_z_standard_gaussian(self, std_gauss_2d):
        log_z, weighted = importance_sample(std_gauss_2d, None, 100_000, seed=1)
        assert log_z == pytest.approx(math.log(2 * math.pi), abs=0.02)
        assert weighted.metadata["method"] == "importance"

    def test_annealed_endpoints(self, corr_gauss):
        p0 = default_ais_p0(2)
        x = np.array([0.3, -0.4])
        assert annealed_target(corr_gauss, p0, 1.0).log_density_unnorm(x) == pytest.approx(log_density(corr_gauss, x))
        start = annealed_target(corr_gauss, p0, 0.0).log_density_unnorm(x)
        expected = -0.5 * (0.09 + 0.16) / 4.0 - 2.0 * math.log(2.0) - math.log(2 * math.pi)
        assert start == pytest.approx(expected)


class TestAis:
    def test_log_z_standard_gaussian(self, std_gauss_2d):
        log_z, weighted = ais_estimate(std_gauss_2d, config=AisConfig(n_temps=100), seed=1)
        assert log_z == pytest.approx(math.log(2 * math.pi), abs=0.05)
        assert weighted.metadata["ess"] >= 2.0

    def test_two_temperatures_is_importance_sampling(self, corr_gauss):
        log_z_ais, ais = ais_estimate(corr_gauss, config=AisConfig(n_temps=2, n_chains=500), seed=3)
        log_z_is, plain = importance_sample(corr_gauss, None, 500, seed=3)
        np.testing.assert_array_equal(ais.log_weights, plain.log_weights)
        assert log_z_ais == log_z_is

    def test_sequence_seed(self, corr_gauss):
        config = AisConfig(n_temps=10, n_chains=32)
        a, first = ais_estimate(corr_gauss, config=config, seed=[0, 4])
        b, second = ais_estimate(corr_gauss, config=config, seed=[0, 4])
        assert a == b
        np.testing.assert_array_equal(first.points, second.points)

    def test_self_normalized_expectation(self, corr_gauss):
        _, weighted = ais_estimate(corr_gauss, config=AisConfig(n_temps=100, n_chains=5000), seed=2)
        assert self_normalized_log_target(weighted, corr_gauss) == pytest.approx(-1.0, abs=0.05)

    def test_scale_invariance(self, corr_gauss):
        config = AisConfig(n_temps=50, n_chains=200)
        base_z, base = ais_estimate(corr_gauss, config=config, seed=4)
        scaled_z, scaled = ais_estimate(scale_target(corr_gauss, 7.3), config=config, seed=4)
        assert scaled_z == pytest.approx(base_z + math.log(7.3), abs=1e-8)
        assert self_normalized_log_target(scaled, corr_gauss) == pytest.approx(
            self_normalized_log_target(base, corr_gauss), abs=1e-8
        )

    def test_more_temperatures_reduce_variance(self, corr_gauss):
        def spread(n_temps):
            config = AisConfig(n_temps=n_temps, n_chains=64)
            return np.var([ais_estimate(corr_gauss, config=config, seed=s)[0] for s in range(20)])

        assert spread(200) < spread(10)

    def test_fixed_step_size(self, std_gauss_2d):
        log_z, weighted = ais_estimate(std_gauss_2d, config=AisConfig(n_temps=50, step_size=0.3), seed=0)
        assert weighted.metadata["final_step_size"] == 0.3
        assert math.isfinite(log_z)

    def test_degenerate_weights(self):
        far = gaussian_target("far", [[0.01, 0.0], [0.0, 0.01]], mean=[30.0, 30.0])
        with pytest.raises(OracleError):
            ais_estimate(far, config=AisConfig(n_temps=2, n_chains=64), seed=0)

    def test_invalid_config(self, corr_gauss):
        with pytest.raises(ConfigError) as info:
            ais_estimate(corr_gauss, config=AisConfig(n_temps=1, n_chains=1))
        assert set(info.value.fields) == {"n_temps", "n_chains"}

    def test_custom_p0(self, std_gauss_2d):
        p0 = InitialDistParams.isotropic(2, 1.5)
        log_z, _ = ais_estimate(std_gauss_2d, p0=p0, config=AisConfig(n_temps=100, n_chains=256), seed=5)
        assert log_z == pytest.approx(math.log(2 * math.pi), abs=0.05)
