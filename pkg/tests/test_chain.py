import math

import numpy as np
import pytest

from core import autodiff as ad
from core.chain import (
    ChainNoise,
    ChainSpec,
    InitialDistParams,
    ParameterLayout,
    SampleBatch,
    chain_final_values,
    chain_forward_differentiable,
    chain_value_and_gradient,
    draw_noise,
    entropy_p0,
    pack_parameters,
    run_chain,
    sample_p0,
    unpack_parameters,
)
from core.errors import ConfigError, DimensionMismatch, NumericalFailure
from core.evaluation import convergence_curve
from core.hmc import HmcStepParams, mh_coords, sample_momentum
from core.targets import TargetDensity, standard_gaussian
from core.trainer import grad_elbo_p0


def nan_gradient_target():
    return TargetDensity(
        name="nan-gradient",
        dim=2,
        log_prob=lambda c: -0.5 * (c[0] * c[0] + c[1] * c[1]),
        grad_log_prob=lambda c: [ci * math.nan for ci in c],
    )


def _subset(noise, keep):
    return ChainNoise(noise.eps[keep], noise.z[:, keep], noise.u[:, keep])


def _transition(target, x, noise, t, step):
    view = step.view()
    r = sample_momentum([noise.z[t][:, i] for i in range(len(x))], view.momentum_variance)
    x_next, accepted, _ = mh_coords(x, r, noise.u[t], target, view)
    return x_next, np.asarray(accepted)


def _states(spec, noise):
    """x_0 .. x_T as coordinate lists."""
    x0 = spec.p0.mean + spec.p0.std * noise.eps
    states = [[x0[:, i] for i in range(spec.dim)]]
    for t, step in enumerate(spec.steps):
        states.append(_transition(spec.target, states[-1], noise, t, step)[0])
    return states


def _nudged(step, k, delta):
    values = np.concatenate([[step.log_step_size], step.log_momentum_variance])
    values[k] += delta
    return HmcStepParams(values[0], values[1:], step.leapfrog_steps)


class TestInitialDist:
    def test_moments(self):
        batch = sample_p0(InitialDistParams.isotropic(2, 1.0), 100_000, seed=1)
        np.testing.assert_allclose(batch.points.mean(axis=0), [0.0, 0.0], atol=0.02)
        np.testing.assert_allclose(batch.points.var(axis=0), [1.0, 1.0], atol=0.02)

    def test_wide_variance(self, valid_p0):
        batch = sample_p0(valid_p0, 100_000, seed=2)
        np.testing.assert_allclose(batch.points.var(axis=0), [3.0, 3.0], atol=0.05)

    def test_deterministic_and_prefix_stable(self, valid_p0):
        a = sample_p0(valid_p0, 100, seed=5)
        b = sample_p0(valid_p0, 100, seed=5)
        c = sample_p0(valid_p0, 40, seed=5)
        np.testing.assert_array_equal(a.points, b.points)
        np.testing.assert_array_equal(a.points[:40], c.points)

    def test_entropies(self, valid_p0):
        assert entropy_p0(InitialDistParams.isotropic(1, 1.0)) == pytest.approx(1.41894, abs=1e-5)
        assert entropy_p0(InitialDistParams.isotropic(2, 1.0)) == pytest.approx(2.83788, abs=1e-5)
        assert entropy_p0(valid_p0) == pytest.approx(3.93649, abs=1e-5)

    def test_rejects_empty_batch(self, valid_p0):
        with pytest.raises(ConfigError):
            sample_p0(valid_p0, 0, seed=0)


class TestChainSpec:
    def test_entropy_floor_must_be_below_p0_entropy(self, corr_gauss, valid_p0):
        with pytest.raises(ConfigError) as info:
            ChainSpec(corr_gauss, valid_p0, [], entropy_floor=4.0)
        assert "h" in info.value.fields

    def test_dimension_checked(self, corr_gauss):
        with pytest.raises(DimensionMismatch):
            ChainSpec(corr_gauss, InitialDistParams.isotropic(3, 1.0), [])

    def test_resolves_target_id(self, valid_p0):
        spec = ChainSpec("corr-gauss", valid_p0, [])
        assert spec.target.name == "corr-gauss"
        assert spec.T == 0

    def test_dict_form(self, make_spec):
        spec = make_spec(T=2, h=2.81223)
        again = ChainSpec.from_dict(spec.to_dict())
        assert again.T == 2
        assert again.entropy_floor == pytest.approx(2.81223)
        np.testing.assert_allclose(pack_parameters(again), pack_parameters(spec), rtol=1e-12)


class TestRunChain:
    def test_zero_steps_equals_p0(self, make_spec):
        spec = make_spec(T=0)
        chain = run_chain(spec, 500, seed=3)
        np.testing.assert_array_equal(chain.points, sample_p0(spec.p0, 500, seed=3).points)

    def test_deterministic(self, make_spec):
        spec = make_spec(T=3, step_size=0.3)
        a = run_chain(spec, 300, seed=4)
        b = run_chain(spec, 300, seed=4)
        np.testing.assert_array_equal(a.points, b.points)

    def test_thread_count_does_not_change_output(self, make_spec):
        spec = make_spec(T=3, step_size=0.3)
        sequential = run_chain(spec, 1000, seed=6, threads=1, block_size=100)
        parallel = run_chain(spec, 1000, seed=6, threads=4, block_size=100)
        np.testing.assert_array_equal(sequential.points, parallel.points)
        assert sequential.metadata["acceptance"] == parallel.metadata["acceptance"]

    def test_stationary_when_p0_is_target(self):
        target = standard_gaussian(2)
        steps =[HmcStepParams.from_values(0.4, 1.0, 5, dim=2) for _ in range(3)]
        spec = ChainSpec(target, InitialDistParams.isotropic(2, 1.0), steps)
        chain = run_chain(spec, 20_000, seed=7)
        np.testing.assert_allclose(chain.points.mean(axis=0), [0.0, 0.0], atol=0.05)
        np.testing.assert_allclose(chain.points.var(axis=0), [1.0, 1.0], atol=0.08)

    def test_untrained_chain_moves_toward_target(self, make_spec):
        spec = make_spec(T=9)
        chain = run_chain(spec, 100_000, seed=8, record_intermediate=True)
        assert len(chain.intermediates) == 10
        curve = convergence_curve(chain.intermediates, spec.target)
        estimates = curve["estimate"].to_numpy()
        stderr = curve["stderr"].to_numpy()
        assert estimates[-1] < -1.0
        assert np.all(estimates[1:] >= estimates[:-1] - 2.0 * stderr[:-1])

    def test_rows_are_independent(self, make_spec):
        chain = run_chain(make_spec(T=2, step_size=0.3), 20_000, seed=9)
        bound = 4.0 / math.sqrt(chain.n)
        for i in range(2):
            col = chain.points[:, i]
            assert abs(np.corrcoef(col[:-1], col[1:])[0, 1]) < bound

    def test_acceptance_metadata(self, make_spec):
        chain = run_chain(make_spec(T=4), 200, seed=1)
        assert len(chain.metadata["acceptance"]) == 4
        assert all(0.0 <= a <= 1.0 for a in chain.metadata["acceptance"])

    def test_failure_is_located(self, valid_p0):
        spec = ChainSpec(nan_gradient_target(), valid_p0, [HmcStepParams.from_values(0.1, 1.0, 2, dim=2)])
        with np.errstate(invalid="ignore"):
            with pytest.raises(NumericalFailure) as info:
                run_chain(spec, 50, seed=0)
        assert info.value.chain == 0
        assert info.value.step == 1


class TestSampleBatch:
    def test_csv_with_sidecar(self, make_spec, tmp_path):
        chain = run_chain(make_spec(T=1), 20, seed=[3, 1])
        path = tmp_path / "samples.csv"
        chain.save_csv(path)
        header = path.read_text().splitlines()[0]
        assert header == "x0,x1"
        loaded = SampleBatch.load_csv(path)
        np.testing.assert_allclose(loaded.points, chain.points)
        assert loaded.seed == [3, 1]
        assert loaded.chain_length == 1


class TestParameters:
    def test_layout(self):
        layout = ParameterLayout(2, 3)
        assert layout.size == 4 + 3 * 3
        assert layout.log_step_size(1) == 7
        assert layout.momentum_mask().sum() == 6

    def test_unpack_inverts_pack(self, make_spec):
        spec = make_spec(T=3)
        theta = pack_parameters(spec)
        np.testing.assert_array_equal(pack_parameters(unpack_parameters(spec, theta)), theta)

    def test_unpack_checks_size(self, make_spec):
        with pytest.raises(DimensionMismatch):
            unpack_parameters(make_spec(T=2), np.zeros(3))


class TestDifferentiableChain:
    def test_zero_steps_gradient_is_p0_integrand(self, make_spec):
        spec = make_spec(T=0)
        noise = draw_noise(256, 2, 0, seed=5)
        value, grad = chain_value_and_gradient(spec, noise, stop_gradient_inputs=False)
        final, _ = chain_final_values(spec, noise)
        assert value == pytest.approx(float(np.mean(final)), rel=1e-12)
        expected = grad_elbo_p0(spec, 256, seed=5) - np.array([0.0, 0.0, 1.0, 1.0])
        np.testing.assert_allclose(grad, expected, rtol=1e-10, atol=1e-12)

    def test_value_matches_sampling_mode(self, make_spec):
        spec = make_spec(T=3, step_size=0.3)
        noise = draw_noise(64, 2, 3, seed=1)
        value, _ = chain_value_and_gradient(spec, noise, stop_gradient_inputs=True)
        final, _ = chain_final_values(spec, noise)
        assert value == pytest.approx(float(np.mean(final)), rel=1e-12)

    @pytest.mark.parametrize("T", [1, 3, 5])
    def test_step_size_gradients_match_finite_differences(self, make_spec, T):
        spec = make_spec(T=T, step_size=0.25, leapfrog_steps=3)
        noise = draw_noise(200, 2, T, seed=T)
        layout = ParameterLayout(2, T)
        theta = pack_parameters(spec)
        h = 1e-5
        _, base_masks = chain_final_values(spec, noise)
        stable = np.ones(noise.n, dtype=bool)
        for t in range(T):
            for sign in (1.0, -1.0):
                shifted = theta.copy()
                shifted[layout.log_step_size(t)] += sign * h
                _, masks = chain_final_values(unpack_parameters(spec, shifted), noise)
                for a, b in zip(masks, base_masks):
                    stable &= a == b
        kept = _subset(noise, np.flatnonzero(stable))
        assert kept.n > 100
        _, grad = chain_value_and_gradient(spec, kept, stop_gradient_inputs=False)
        for t in range(T):
            idx = layout.log_step_size(t)
            up, down = theta.copy(), theta.copy()
            up[idx] += h
            down[idx] -= h
            f_up = np.mean(chain_final_values(unpack_parameters(spec, up), kept)[0])
            f_down = np.mean(chain_final_values(unpack_parameters(spec, down), kept)[0])
            numeric = (f_up - f_down) / (2 * h)
            assert grad[idx] == pytest.approx(numeric, rel=1e-4, abs=1e-7)

    def test_detached_and_full_agree_for_one_step(self, make_spec):
        spec = make_spec(T=1, step_size=0.3)
        noise = draw_noise(128, 2, 1, seed=2)
        layout = ParameterLayout(2, 1)
        _, detached = chain_value_and_gradient(spec, noise, stop_gradient_inputs=True)
        _, full = chain_value_and_gradient(spec, noise, stop_gradient_inputs=False)
        block = layout.chain_block()
        np.testing.assert_allclose(detached[block], full[block], rtol=1e-10, atol=1e-12)
        np.testing.assert_array_equal(detached[layout.p0], np.zeros(4))

    def test_rejected_transition_has_no_step_gradient(self, make_spec):
        spec = make_spec(T=1, step_size=0.3)
        noise = draw_noise(64, 2, 1, seed=3).with_u(1.0)
        layout = ParameterLayout(2, 1)
        _, grad = chain_value_and_gradient(spec, noise, stop_gradient_inputs=False)
        np.testing.assert_array_equal(grad[layout.chain_block()], np.zeros(3))
        assert np.any(grad[layout.p0] != 0.0)

    def test_every_parameter_gradient_matches_finite_differences(self, make_spec):
        spec = make_spec(T=3, step_size=0.25, leapfrog_steps=3)
        noise = draw_noise(200, 2, 3, seed=11)
        theta = pack_parameters(spec)
        h = 1e-5
        _, base_masks = chain_final_values(spec, noise)
        stable = np.ones(noise.n, dtype=bool)
        for idx in range(theta.size):
            for sign in (1.0, -1.0):
                shifted = theta.copy()
                shifted[idx] += sign * h
                _, masks = chain_final_values(unpack_parameters(spec, shifted), noise)
                for a, b in zip(masks, base_masks):
                    stable &= a == b
        kept = _subset(noise, np.flatnonzero(stable))
        assert kept.n > 100
        _, grad = chain_value_and_gradient(spec, kept, stop_gradient_inputs=False)
        for idx in range(theta.size):
            up, down = theta.copy(), theta.copy()
            up[idx] += h
            down[idx] -= h
            f_up = np.mean(chain_final_values(unpack_parameters(spec, up), kept)[0])
            f_down = np.mean(chain_final_values(unpack_parameters(spec, down), kept)[0])
            assert grad[idx] == pytest.approx((f_up - f_down) / (2 * h), rel=1e-4, abs=1e-6)

    def test_detached_step_gradient_holds_previous_state_fixed(self, make_spec):
        T = 3
        spec = make_spec(T=T, step_size=0.25, leapfrog_steps=3)
        noise = draw_noise(200, 2, T, seed=12)
        layout = ParameterLayout(2, T)
        states = _states(spec, noise)
        h = 1e-5
        stable = np.ones(noise.n, dtype=bool)
        for t, step in enumerate(spec.steps):
            _, base = _transition(spec.target, states[t], noise, t, step)
            for k in range(3):
                for sign in (1.0, -1.0):
                    _, accepted = _transition(spec.target, states[t], noise, t, _nudged(step, k, sign * h))
                    stable &= accepted == base
        keep = np.flatnonzero(stable)
        kept = _subset(noise, keep)
        assert kept.n > 100

        _, grad = chain_value_and_gradient(spec, kept, stop_gradient_inputs=True)
        np.testing.assert_array_equal(grad[layout.p0], np.zeros(4))
        for t, step in enumerate(spec.steps):
            x_prev = [c[keep] for c in states[t]]
            block = grad[layout.step_block(t)]
            for k in range(3):
                up, _ = _transition(spec.target, x_prev, kept, t, _nudged(step, k, h))
                down, _ = _transition(spec.target, x_prev, kept, t, _nudged(step, k, -h))
                numeric = (np.mean(spec.target.log_prob(up)) - np.mean(spec.target.log_prob(down))) / (2 * h)
                assert block[k] == pytest.approx(numeric, rel=1e-4, abs=1e-7)

    @pytest.mark.parametrize("detached", [True, False])
    def test_single_record_chain_matches_value_and_gradient(self, make_spec, detached):
        spec = make_spec(T=4, step_size=0.3)
        noise = draw_noise(96, 2, 4, seed=13)
        value, grad = ad.evaluate_with_gradient(
            lambda nodes: chain_forward_differentiable(spec, noise, detached, theta_nodes=nodes),
            pack_parameters(spec),
        )
        expected_value, expected_grad = chain_value_and_gradient(spec, noise, stop_gradient_inputs=detached)
        assert value == pytest.approx(expected_value, rel=1e-12)
        np.testing.assert_allclose(grad, expected_grad, rtol=1e-9, atol=1e-12)

    def test_forward_builds_its_own_record(self, make_spec):
        spec = make_spec(T=2, step_size=0.3)
        noise = draw_noise(32, 2, 2, seed=14)
        node = chain_forward_differentiable(spec, noise)
        assert isinstance(node, ad.DiffNode)
        final, _ = chain_final_values(spec, noise)
        assert node.value == pytest.approx(float(np.mean(final)), rel=1e-12)
        grad = node.record.gradient(node)
        assert grad.size == pack_parameters(spec).size
