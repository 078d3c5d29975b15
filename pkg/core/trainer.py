"""
EMLBO estimation and constrained Adam training of the chain parameters.

The objective is E_{p_T}[log π*(x_T)] + E_{p_0}[log π*(x_0)] + H(P₀). The
chain term is differentiated pathwise at fixed noise, the P₀ term through the
reparameterization x₀ = mean + exp(log_std) ⊙ ε, and H(P₀) analytically.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

from core import autodiff as ad
from core.chain import (
    ParameterLayout,
    chain_final_values,
    chain_forward_differentiable,
    chain_value_and_gradient,
    detached_chain_gradient,
    draw_noise,
    pack_parameters,
    seed_key,
    unpack_parameters,
)
from core.errors import ConfigError, NumericalFailure
from core.hmc import HmcStepParams
from core.targets import gaussian_entropy

logger = logging.getLogger(__name__)


@dataclass
class AdamConfig:
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


@dataclass
class TrainConfig:
    batch_size: int = 128
    iterations: int = 50
    adam: AdamConfig = field(default_factory=AdamConfig)
    entropy_floor: Optional[float] = None
    entropy_guard: bool = True
    stop_gradient: bool = True
    seed: int = 0
    step_size_init_range: tuple = (0.01, 0.025)
    chain_learning_rate: Optional[float] = None
    train_momentum_variance: bool = True
    max_retries: int = 3

    def validate(self):
        """Raise ConfigError naming every invalid field."""
        bad = []
        if self.batch_size < 2:
            bad.append("batch_size")
        if self.iterations < 1:
            bad.append("iterations")
        if not self.adam.learning_rate >= 0:
            bad.append("learning_rate")
        if not 0.0 < self.adam.beta1 < 1.0:
            bad.append("beta1")
        if not 0.0 < self.adam.beta2 < 1.0:
            bad.append("beta2")
        if not self.adam.epsilon > 0:
            bad.append("epsilon")
        if self.chain_learning_rate is not None and not self.chain_learning_rate >= 0:
            bad.append("chain_learning_rate")
        low, high = self.step_size_init_range
        if not 0.0 < low <= high:
            bad.append("step_size_init_range")
        if self.max_retries < 0:
            bad.append("max_retries")
        if bad:
            raise ConfigError(f"invalid training configuration: {', '.join(bad)}", bad)
        return self


@dataclass
class TrainReport:
    rows: list = field(default_factory=list)
    guard_events: int = 0
    retries: int = 0

    def to_frame(self):
        return pd.DataFrame(self.rows)

    def save_csv(self, path):
        self.to_frame().to_csv(path, index=False)


def init_step_params(T, dim, leapfrog_steps=5, init_range=(0.01, 0.025), seed=0, momentum_variance=1.0):
    """T step parameter sets with φ₂ uniform in ``init_range``."""
    rng = np.random.default_rng(seed_key(seed) + [7])
    sizes = rng.uniform(init_range[0], init_range[1], size=T)
    return [HmcStepParams.from_values(float(s), momentum_variance, leapfrog_steps, dim) for s in sizes]


def _check_batch(N):
    if N < 2:
        raise ConfigError("Monte Carlo batch size N must be at least 2", ["batch_size"])


def emlbo_estimate(spec, N, seed):
    """Return (total, e_logpi_T, elbo_p0) from N chains."""
    _check_batch(N)
    noise = draw_noise(N, spec.dim, spec.T, seed)
    final, _ = chain_final_values(spec, noise)
    x0 = spec.p0.mean + spec.p0.std * noise.eps
    log_pi_0 = np.asarray(spec.target.log_prob([x0[:, i] for i in range(spec.dim)]))
    e_logpi_T = float(np.mean(final))
    elbo_p0 = float(np.mean(log_pi_0)) + spec.p0.entropy()
    return e_logpi_T + elbo_p0, e_logpi_T, elbo_p0


def _p0_objective(spec, noise, theta_nodes):
    layout = ParameterLayout(spec.dim, spec.T)
    mean = theta_nodes[layout.mean]
    log_std = theta_nodes[layout.log_std]
    x0 = [mean[i] + ad.exp(log_std[i]) * noise.eps[:, i] for i in range(spec.dim)]
    return ad.lane_mean(spec.target.log_prob(x0))


def grad_elbo_p0(spec, N, seed):
    """∂ ELBO(P₀)/∂(mean, log_std); the entropy contributes exactly 1 per log_std."""
    _check_batch(N)
    noise = draw_noise(N, spec.dim, 0, seed)
    layout = ParameterLayout(spec.dim, spec.T)
    theta = pack_parameters(spec)[layout.p0]
    _, grad = ad.evaluate_with_gradient(lambda nodes: _p0_objective(spec, noise, nodes), theta)
    grad[layout.log_std] += 1.0
    return grad


def grad_chain_params(spec, N, seed, stop_gradient=True):
    """∂ E_{p_T}[log π*(x_T)]/∂θ over the whole layout.

    With detachment the P₀ block is zero once T ≥ 1.
    """
    _check_batch(N)
    noise = draw_noise(N, spec.dim, spec.T, seed)
    _, grad = chain_value_and_gradient(spec, noise, stop_gradient)
    return grad


def _emlbo_value_and_gradient(spec, noise, stop_gradient):
    """Returns (e_logpi_T, e_logpi_0, grad, mean acceptance)."""
    layout = ParameterLayout(spec.dim, spec.T)
    theta = pack_parameters(spec)
    masks = []
    if stop_gradient and spec.T > 0:
        e_logpi_T, grad = detached_chain_gradient(spec, noise, accept_log=masks)
        e_logpi_0, p0_grad = ad.evaluate_with_gradient(lambda nodes: _p0_objective(spec, noise, nodes), theta[layout.p0])
        grad[layout.p0] += p0_grad
    else:
        record = ad.GradientRecord()
        nodes = record.inputs(theta)
        chain_term = chain_forward_differentiable(spec, noise, stop_gradient, theta_nodes=nodes, accept_log=masks)
        p0_term = _p0_objective(spec, noise, nodes)
        grad = record.gradient(chain_term + p0_term)
        e_logpi_T, e_logpi_0 = float(chain_term.value), float(p0_term.value)
    grad[layout.log_std] += 1.0
    acceptance = float(np.mean(masks)) if masks else float("nan")
    return e_logpi_T, e_logpi_0, grad, acceptance


class Adam:
    """Adam ascent on a flat vector with a per-entry learning rate."""

    def __init__(self, size, config):
        self.config = config
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, theta, grad, learning_rate):
        cfg = self.config
        self.t += 1
        self.m = cfg.beta1 * self.m + (1.0 - cfg.beta1) * grad
        self.v = cfg.beta2 * self.v + (1.0 - cfg.beta2) * grad * grad
        m_hat = self.m / (1.0 - cfg.beta1 ** self.t)
        v_hat = self.v / (1.0 - cfg.beta2 ** self.t)
        return theta + learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)


def _learning_rates(layout, config):
    rates = np.full(layout.size, config.adam.learning_rate)
    chain_lr = config.adam.learning_rate if config.chain_learning_rate is None else config.chain_learning_rate
    rates[layout.chain_block()] = chain_lr
    if not config.train_momentum_variance:
        rates[layout.momentum_mask()] = 0.0
    return rates


def resolve_entropy_floor(spec, config):
    if not config.entropy_guard:
        return -math.inf
    return spec.entropy_floor if config.entropy_floor is None else config.entropy_floor


def train(spec, config):
    """Adam on θ with the entropy guard on the P₀ block.

    Returns (trained ChainSpec, TrainReport).
    """
    config.validate()
    h = resolve_entropy_floor(spec, config)
    if config.entropy_guard and not spec.p0.entropy() > h:
        raise ConfigError(f"H(P0) = {spec.p0.entropy():.5f} does not exceed h = {h:.5f}", ["p0", "h"])

    layout = ParameterLayout(spec.dim, spec.T)
    theta = pack_parameters(spec)
    rates = _learning_rates(layout, config)
    adam = Adam(layout.size, config.adam)
    report = TrainReport()
    current = spec

    logger.info("=" * 80)
    logger.info(
        "Training %s: T=%d, N=%d, iterations=%d, h=%s, stop_gradient=%s",
        spec.target.name, spec.T, config.batch_size, config.iterations, h, config.stop_gradient,
    )
    logger.info("=" * 80)

    for iteration in range(config.iterations):
        started = time.perf_counter()
        for attempt in range(config.max_retries + 1):
            noise = draw_noise(config.batch_size, spec.dim, spec.T, [config.seed, iteration, attempt])
            try:
                e_logpi_T, e_logpi_0, grad, acceptance = _emlbo_value_and_gradient(current, noise, config.stop_gradient)
                break
            except NumericalFailure as exc:
                report.retries += 1
                logger.warning("⚠ Iteration %d attempt %d rejected: %s", iteration, attempt + 1, exc)
        else:
            raise NumericalFailure(
                f"gradient stayed non-finite after {config.max_retries} retries", iteration=iteration
            )

        entropy = current.p0.entropy()
        proposed = adam.step(theta, grad, rates)
        proposed_entropy = gaussian_entropy(proposed[layout.log_std])
        guard = bool(proposed_entropy <= h)
        if guard:
            proposed[layout.p0] = theta[layout.p0]
            report.guard_events += 1
            logger.warning(
                "⚠ Entropy guard at iteration %d: proposed H(P0) = %.5f <= h = %.5f, P0 left unchanged",
                iteration, proposed_entropy, h,
            )
        theta = proposed
        current = unpack_parameters(current, theta, entropy_floor=h)

        elbo_p0 = e_logpi_0 + entropy
        row = {
            "iteration": iteration,
            "emlbo": e_logpi_T + elbo_p0,
            "e_logpi_T": e_logpi_T,
            "elbo_p0": elbo_p0,
            "entropy_p0": entropy,
            "guard_triggered": guard,
            "acceptance": acceptance,
        }
        for t, step in enumerate(current.steps):
            row[f"step_size_{t + 1}"] = step.step_size
        row["wall_ms"] = (time.perf_counter() - started) * 1000.0
        report.rows.append(row)
        logger.info(
            "Iteration %d: EMLBO=%.4f E_pT=%.4f H(P0)=%.4f guard=%s acceptance=%.3f",
            iteration, row["emlbo"], e_logpi_T, entropy, guard, acceptance,
        )

    trained = unpack_parameters(spec, theta, entropy_floor=h)
    logger.info("✓ Training finished, %d guard events, %d retries", report.guard_events, report.retries)
    return trained, report


def gradient_wall_ms(spec, N, seed, stop_gradient, repeats=3):
    """Median wall-clock of one EMLBO gradient evaluation in milliseconds."""
    noise = draw_noise(N, spec.dim, spec.T, seed)
    times = []
    for _ in range(repeats):
        started = time.perf_counter()
        _emlbo_value_and_gradient(spec, noise, stop_gradient)
        times.append((time.perf_counter() - started) * 1000.0)
    return float(np.median(times))
