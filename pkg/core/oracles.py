"""
Ground-truth samplers: rejection sampling on a bounding box, exact Gaussian
draws, plain importance sampling and annealed importance sampling with HMC
transitions along the geometric path p₀^{1−β} π*^{β}.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Union

import numpy as np
import pandas as pd
from scipy.special import logsumexp

from core.chain import InitialDistParams, SampleBatch, seed_key
from core.errors import ConfigError, OracleError
from core.hmc import StepView, mh_coords, sample_momentum
from core.targets import TargetDensity, resolve_target

logger = logging.getLogger(__name__)

MIN_ACCEPTANCE = 1e-4
DEFAULT_AIS_P0_STD = 2.0


# -- weighted batches ----------------------------------------------------------


@dataclass
class WeightedBatch:
    points: np.ndarray
    log_weights: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        self.log_weights = np.asarray(self.log_weights, dtype=np.float64)
        if not np.all(np.isfinite(self.log_weights)):
            raise OracleError("importance log-weights must be finite")

    @property
    def n(self):
        return self.points.shape[0]

    def normalized_weights(self):
        return np.exp(self.log_weights - logsumexp(self.log_weights))

    def log_mean_weight(self):
        return float(logsumexp(self.log_weights) - math.log(self.n))

    def ess(self):
        return ess_weights(self)

    def expectation(self, values):
        """Self-normalized Σ w̄ᵢ f(xᵢ) for per-point values f(xᵢ)."""
        return float(np.sum(self.normalized_weights() * np.asarray(values, dtype=np.float64)))

    def to_frame(self):
        frame = pd.DataFrame(self.points, columns=[f"x{i}" for i in range(self.points.shape[1])])
        frame["log_weight"] = self.log_weights
        return frame

    def save_csv(self, path):
        self.to_frame().to_csv(path, index=False)


def ess_weights(weighted):
    """(Σw)²/Σw² for a WeightedBatch, or for an array of non-negative weights."""
    if isinstance(weighted, WeightedBatch):
        w = np.exp(weighted.log_weights - np.max(weighted.log_weights))
    else:
        w = np.asarray(weighted, dtype=np.float64)
    if w.size == 0:
        raise ConfigError("ESS of an empty weight vector", ["weights"])
    return float(np.sum(w) ** 2 / np.sum(w ** 2))


def self_normalized_log_target(weighted, target):
    """Self-normalized estimate of E_π[log π*] from a weighted batch."""
    target = resolve_target(target)
    values = target.log_prob([weighted.points[:, i] for i in range(target.dim)])
    return weighted.expectation(values)


# -- rejection sampling --------------------------------------------------------


def rejection_bound(target, resolution=512, safety=1.2):
    """log M with M = safety · max of π* on a resolution² grid over the box."""
    box = target.sampling_box
    if box is None:
        raise OracleError(f"target {target.name!r} has no sampling box")
    axes = [np.linspace(lo, hi, resolution) for lo, hi in zip(box.lower, box.upper)]
    mesh = np.meshgrid(*axes, indexing="ij")
    values = np.asarray(target.log_prob([m.ravel() for m in mesh]))
    peak = float(np.max(values))
    if not math.isfinite(peak):
        raise OracleError(f"log-density of {target.name!r} is not finite on its grid")
    return peak + math.log(safety)


def rejection_sample(target, n, seed, chunk_size=65536, resolution=512, safety=1.2):
    """n exact draws from π restricted to the target's sampling box."""
    target = resolve_target(target)
    if n < 1:
        raise ConfigError("n must be at least 1", ["n"])
    started = time.perf_counter()
    log_bound = rejection_bound(target, resolution, safety)
    lower = np.asarray(target.sampling_box.lower)
    upper = np.asarray(target.sampling_box.upper)
    accepted = []
    n_accepted = 0
    proposed = 0
    chunk = 0
    while n_accepted < n:
        rng = np.random.default_rng(seed_key(seed) + [chunk])
        candidates = rng.uniform(lower, upper, size=(chunk_size, target.dim))
        log_u = np.log(rng.random(chunk_size))
        log_p = np.asarray(target.log_prob([candidates[:, i] for i in range(target.dim)]))
        if np.any(log_p > log_bound):
            logger.warning("⚠ Rejection bound for %s exceeded in chunk %d", target.name, chunk)
        keep = candidates[log_u < log_p - log_bound]
        accepted.append(keep)
        n_accepted += keep.shape[0]
        proposed += chunk_size
        chunk += 1
        rate = n_accepted / proposed
        if rate < MIN_ACCEPTANCE:
            raise OracleError(
                f"rejection acceptance rate {rate:.2e} below {MIN_ACCEPTANCE:g} for {target.name!r}: "
                "check the sampling box and the density bound"
            )
    points = np.concatenate(accepted)[:n]
    elapsed = time.perf_counter() - started
    logger.info("Rejection sampling %d points from %s took %.2fs (acceptance %.4f)", n, target.name, elapsed, rate)
    return SampleBatch(
        points,
        seed=seed,
        chain_length=0,
        metadata={"method": "rejection", "target": target.name, "acceptance": rate, "seconds": elapsed},
    )


def exact_gaussian_sample(target, n, seed):
    """Cholesky draws for targets with a Gaussian form."""
    target = resolve_target(target)
    if target.gaussian is None:
        raise OracleError(f"target {target.name!r} is not Gaussian")
    mean = np.asarray(target.gaussian.mean)
    chol = np.linalg.cholesky(np.asarray(target.gaussian.cov))
    z = np.random.default_rng(seed_key(seed) + [0]).standard_normal((n, target.dim))
    return SampleBatch(mean + z @ chol.T, seed=seed, chain_length=0, metadata={"method": "exact", "target": target.name})


# -- importance sampling -------------------------------------------------------


def _p0_log_density(p0, coords):
    """Normalized log N(x; mean, diag(std²)) on coordinate lanes."""
    total = 0.0
    for c, m, s, ls in zip(coords, p0.mean, p0.std, p0.log_std):
        total = total - 0.5 * ((c - m) / s) ** 2 - ls - 0.5 * math.log(2.0 * math.pi)
    return total


def _p0_grad(p0, coords):
    return [-(c - m) / s ** 2 for c, m, s in zip(coords, p0.mean, p0.std)]


def _draw_p0(p0, n, seed):
    eps = np.random.default_rng(seed_key(seed) + [0]).standard_normal((n, p0.dim))
    return p0.mean + p0.std * eps


def default_ais_p0(dim):
    return InitialDistParams.isotropic(dim, DEFAULT_AIS_P0_STD)


def importance_sample(target, p0, n, seed):
    """Plain importance sampling from P₀; returns (log_z, WeightedBatch)."""
    target = resolve_target(target)
    p0 = p0 or default_ais_p0(target.dim)
    points = _draw_p0(p0, n, seed)
    coords = [points[:, i] for i in range(target.dim)]
    log_w = np.asarray(target.log_prob(coords)) - _p0_log_density(p0, coords)
    weighted = WeightedBatch(points, log_w, {"method": "importance", "target": target.name})
    return weighted.log_mean_weight(), weighted


def annealed_target(target, p0, beta):
    """f_β ∝ p₀^{1−β} π*^{β} as an ordinary TargetDensity."""
    base = resolve_target(target)
    beta = float(beta)

    def log_prob(coords):
        return (1.0 - beta) * _p0_log_density(p0, coords) + beta * base.log_prob(coords)

    def grad_log_prob(coords):
        g0 = _p0_grad(p0, coords)
        g1 = base.grad_log_prob(coords)
        return [(1.0 - beta) * a + beta * b for a, b in zip(g0, g1)]

    return TargetDensity(
        name=f"{base.name}@beta={beta:g}",
        dim=base.dim,
        log_prob=log_prob,
        grad_log_prob=grad_log_prob,
        sampling_box=base.sampling_box,
    )


@dataclass(frozen=True)
class AisConfig:
    n_temps: int = 1000
    leapfrog_steps: int = 5
    n_chains: int = 64
    step_size: Union[str, float] = "auto"
    initial_step_size: float = 0.1
    target_acceptance: float = 0.7
    adaptation_rate: float = 0.5

    def validate(self):
        bad = []
        if self.n_temps < 2:
            bad.append("n_temps")
        if self.n_chains < 2:
            bad.append("n_chains")
        if self.leapfrog_steps < 1:
            bad.append("leapfrog_steps")
        if self.step_size != "auto" and not float(self.step_size) > 0:
            bad.append("step_size")
        if not self.initial_step_size > 0:
            bad.append("initial_step_size")
        if bad:
            raise ConfigError(f"invalid AIS configuration: {', '.join(bad)}", bad)
        return self


def ais_estimate(target, p0=None, config=None, seed=0):
    """Annealed importance sampling with HMC transitions.

    Returns (log_z, WeightedBatch). The weights accumulate
    Σ_j (β_j − β_{j−1}) [log π*(x) − log p₀(x)] before each transition.
    """
    target = resolve_target(target)
    config = (config or AisConfig()).validate()
    p0 = p0 or default_ais_p0(target.dim)
    started = time.perf_counter()
    n, dim = config.n_chains, target.dim
    points = _draw_p0(p0, n, seed)
    x = [points[:, i] for i in range(dim)]
    log_w = np.zeros(n)
    betas = np.linspace(0.0, 1.0, config.n_temps)
    auto = config.step_size == "auto"
    step = config.initial_step_size if auto else float(config.step_size)
    unit_variance = [1.0] * dim
    acceptance = []
    for j in range(1, config.n_temps):
        log_w = log_w + (betas[j] - betas[j - 1]) * (np.asarray(target.log_prob(x)) - _p0_log_density(p0, x))
        rng = np.random.default_rng(seed_key(seed) + [j])
        z = rng.standard_normal((n, dim))
        u = rng.random(n)
        view = StepView(step, unit_variance, config.leapfrog_steps)
        r = sample_momentum([z[:, i] for i in range(dim)], unit_variance)
        x, accepted, _ = mh_coords(x, r, u, annealed_target(target, p0, betas[j]), view)
        rate = float(np.mean(accepted))
        acceptance.append(rate)
        if auto:
            step *= math.exp(config.adaptation_rate * (rate - config.target_acceptance))
    weighted = WeightedBatch(
        np.column_stack(x),
        log_w,
        {"method": "ais", "target": target.name, "n_temps": config.n_temps, "final_step_size": step},
    )
    ess = ess_weights(weighted)
    if ess < 2.0:
        raise OracleError(f"AIS weights degenerate for {target.name!r}: ESS = {ess:.3f}")
    weighted.metadata["ess"] = ess
    weighted.metadata["mean_acceptance"] = float(np.mean(acceptance)) if acceptance else None
    log_z = weighted.log_mean_weight()
    logger.info(
        "AIS on %s: log Z = %.4f, ESS = %.1f/%d, %.2fs", target.name, log_z, ess, n, time.perf_counter() - started
    )
    return log_z, weighted
