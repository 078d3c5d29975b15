"""
The finite ergodic chain: a diagonal-Gaussian P₀ followed by T HMC transitions.

Sampling mode works on plain numpy lanes. The differentiable mode records the
same composition on a GradientRecord with the parameter vector θ as inputs:

    θ = [mean (d), log_std (d), then per step: log φ₂, log φ₁ (d)]
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import pandas as pd

from core import autodiff as ad
from core.errors import ConfigError, DimensionMismatch, NumericalFailure
from core.hmc import HmcStepParams, StepView, leapfrog_coords, log_acceptance, mh_coords, sample_momentum
from core.targets import gaussian_entropy, resolve_target
from utils.file_utils import read_json, write_json
from utils.parallel_utils import map_blocks

logger = logging.getLogger(__name__)

DEFAULT_BLOCK_SIZE = 8192


@dataclass
class InitialDistParams:
    """φ₀: mean and per-dimension log standard deviation of P₀."""

    mean: np.ndarray
    log_std: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64)).copy()
        self.log_std = np.atleast_1d(np.asarray(self.log_std, dtype=np.float64)).copy()
        if self.mean.shape != self.log_std.shape:
            raise DimensionMismatch(f"mean has shape {self.mean.shape}, log_std {self.log_std.shape}")

    @classmethod
    def isotropic(cls, dim, std=1.0, mean=0.0):
        return cls(np.full(dim, float(mean)), np.full(dim, math.log(std)))

    @property
    def dim(self):
        return self.mean.size

    @property
    def std(self):
        return np.exp(self.log_std)

    def entropy(self):
        return gaussian_entropy(self.log_std)

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, data):
        return cls(np.asarray(data["mean"], dtype=np.float64), np.log(np.asarray(data["std"], dtype=np.float64)))


def entropy_p0(p0):
    return p0.entropy()


@dataclass
class ChainSpec:
    """Target, P₀ and the T per-transition parameter sets, plus the entropy floor h."""

    target: object
    p0: InitialDistParams
    steps: list = field(default_factory=list)
    entropy_floor: float = -math.inf

    def __post_init__(self):
        self.target = resolve_target(self.target)
        self.steps = list(self.steps)
        if self.p0.dim != self.target.dim:
            raise DimensionMismatch(f"P0 has dimension {self.p0.dim}, target {self.target.dim}")
        for t, step in enumerate(self.steps):
            if step.dim != self.target.dim:
                raise DimensionMismatch(f"step {t + 1} momentum variance has dimension {step.dim}")
        entropy = self.p0.entropy()
        if not math.isfinite(entropy):
            raise ConfigError("H(P0) is not finite", ["p0"])
        if not entropy > self.entropy_floor:
            raise ConfigError(
                f"H(P0) = {entropy:.5f} must exceed the entropy floor h = {self.entropy_floor:.5f}",
                ["p0", "h"],
            )

    @property
    def T(self):
        return len(self.steps)

    @property
    def dim(self):
        return self.target.dim

    def to_dict(self):
        return {
            "target": self.target.name,
            "entropy_floor": None if math.isinf(self.entropy_floor) else self.entropy_floor,
            "p0": self.p0.to_dict(),
            "steps": [s.to_dict() for s in self.steps],
        }

    @classmethod
    def from_dict(cls, data, target=None):
        h = data.get("entropy_floor")
        return cls(
            target=target if target is not None else data["target"],
            p0=InitialDistParams.from_dict(data["p0"]),
            steps=[HmcStepParams.from_dict(s) for s in data["steps"]],
            entropy_floor=-math.inf if h is None else float(h),
        )


@dataclass
class SampleBatch:
    """n independent draws; row i comes from chain i."""

    points: np.ndarray
    seed: object = None
    chain_length: int = 0
    metadata: dict = field(default_factory=dict)
    intermediates: Optional[list] = field(default=None, repr=False)

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))

    @property
    def n(self):
        return self.points.shape[0]

    @property
    def dim(self):
        return self.points.shape[1]

    def to_frame(self):
        return pd.DataFrame(self.points, columns=[f"x{i}" for i in range(self.dim)])

    def save_csv(self, path):
        self.to_frame().to_csv(path, index=False)
        sidecar = {"seed": _jsonable(self.seed), "chain_length": self.chain_length, **self.metadata}
        write_json(f"{path}.meta.json", sidecar)

    @classmethod
    def load_csv(cls, path):
        frame = pd.read_csv(path)
        try:
            meta = read_json(f"{path}.meta.json")
        except FileNotFoundError:
            meta = {}
        seed = meta.pop("seed", None)
        chain_length = meta.pop("chain_length", 0)
        columns = [c for c in frame.columns if c.startswith("x")]
        return cls(frame[columns].to_numpy(dtype=np.float64), seed, chain_length, meta)


def _jsonable(seed):
    if isinstance(seed, (list, tuple, np.ndarray)):
        return [int(s) for s in seed]
    return seed


# -- noise ---------------------------------------------------------------------


@dataclass(frozen=True)
class ChainNoise:
    """Materialized randomness for N chains: ε (N, d), z (T, N, d), u (T, N)."""

    eps: np.ndarray
    z: np.ndarray
    u: np.ndarray

    @property
    def n(self):
        return self.eps.shape[0]

    @property
    def T(self):
        return self.z.shape[0]

    def rows(self, start, stop):
        return ChainNoise(self.eps[start:stop], self.z[:, start:stop], self.u[:, start:stop])

    def with_u(self, u):
        return replace(self, u=np.broadcast_to(np.asarray(u, dtype=np.float64), self.u.shape).copy())


def seed_key(seed):
    """An int or a sequence of ints as a list usable as an rng entropy prefix."""
    return [int(s) for s in np.atleast_1d(seed)]


def draw_noise(n, dim, T, seed):
    """Noise for ``n`` chains. Each (seed, step, kind) gets its own stream, so the
    first k rows do not depend on ``n``."""
    key = seed_key(seed)
    eps = np.random.default_rng(key + [0, 0]).standard_normal((n, dim))
    z = np.empty((T, n, dim))
    u = np.empty((T, n))
    for t in range(T):
        z[t] = np.random.default_rng(key + [t + 1, 0]).standard_normal((n, dim))
        u[t] = np.random.default_rng(key + [t + 1, 1]).random(n)
    return ChainNoise(eps, z, u)


# -- sampling mode -------------------------------------------------------------


def sample_p0(p0, n, seed):
    """x₀ = mean + exp(log_std) ⊙ ε."""
    if n < 1:
        raise ConfigError("n must be at least 1", ["n"])
    noise = draw_noise(n, p0.dim, 0, seed)
    return SampleBatch(p0.mean + p0.std * noise.eps, seed=seed, chain_length=0, metadata={"p0": p0.to_dict()})


def _run_block(spec, noise, record_intermediate):
    x0 = spec.p0.mean + spec.p0.std * noise.eps
    x = [x0[:, i] for i in range(spec.dim)]
    history = [x0] if record_intermediate else None
    accept_counts = []
    for t, step in enumerate(spec.steps):
        view = step.view()
        r = sample_momentum([noise.z[t][:, i] for i in range(spec.dim)], view.momentum_variance)
        try:
            x, accepted, _ = mh_coords(x, r, noise.u[t], spec.target, view)
        except NumericalFailure as exc:
            raise exc.located(step=t + 1)
        accept_counts.append(int(np.count_nonzero(accepted)))
        if record_intermediate:
            history.append(np.column_stack(x))
    return np.column_stack(x), accept_counts, history


def run_chain(spec, n, seed, record_intermediate=False, threads=None, block_size=DEFAULT_BLOCK_SIZE):
    """Simulate ``n`` independent chains and return the final states.

    With ``record_intermediate`` the returned batch carries ``intermediates``:
    the T+1 marginal batches P₀ … P_T.
    """
    if n < 1:
        raise ConfigError("n must be at least 1", ["n"])
    noise = draw_noise(n, spec.dim, spec.T, seed)

    def run(start, stop):
        try:
            return _run_block(spec, noise.rows(start, stop), record_intermediate)
        except NumericalFailure as exc:
            chain = None if exc.lane is None else start + exc.lane
            raise exc.located(chain=chain)

    blocks = map_blocks(run, n, block_size, threads)
    points = np.concatenate([b[0] for b in blocks])
    accepted = np.sum([b[1] for b in blocks], axis=0) if spec.T else np.zeros(0)
    acceptance = (np.asarray(accepted, dtype=np.float64) / n).tolist()
    metadata = {
        "target": spec.target.name,
        "p0": spec.p0.to_dict(),
        "steps": [s.to_dict() for s in spec.steps],
        "acceptance": acceptance,
    }
    batch = SampleBatch(points, seed=seed, chain_length=spec.T, metadata=metadata)
    if record_intermediate:
        batch.intermediates = [
            SampleBatch(np.concatenate([b[2][t] for b in blocks]), seed=seed, chain_length=t)
            for t in range(spec.T + 1)
        ]
    logger.debug("Ran %d chains of length %d on %s, acceptance %s", n, spec.T, spec.target.name, acceptance)
    return batch


# -- differentiable mode -------------------------------------------------------


class ParameterLayout:
    """Index map of the flat parameter vector θ."""

    def __init__(self, dim, T):
        self.dim = dim
        self.T = T
        self.mean = slice(0, dim)
        self.log_std = slice(dim, 2 * dim)
        self.p0 = slice(0, 2 * dim)
        self.size = 2 * dim + T * (1 + dim)

    def _offset(self, t):
        return 2 * self.dim + t * (1 + self.dim)

    def log_step_size(self, t):
        return self._offset(t)

    def log_momentum_variance(self, t):
        start = self._offset(t) + 1
        return slice(start, start + self.dim)

    def step_block(self, t):
        start = self._offset(t)
        return slice(start, start + 1 + self.dim)

    def chain_block(self):
        return slice(2 * self.dim, self.size)

    def momentum_mask(self):
        mask = np.zeros(self.size, dtype=bool)
        for t in range(self.T):
            mask[self.log_momentum_variance(t)] = True
        return mask


def pack_parameters(spec):
    parts = [spec.p0.mean, spec.p0.log_std]
    for step in spec.steps:
        parts.append([step.log_step_size])
        parts.append(step.log_momentum_variance)
    return np.concatenate(parts).astype(np.float64)


def unpack_parameters(spec, theta, entropy_floor=None):
    """ChainSpec with the same target and step counts and parameters from θ."""
    theta = np.asarray(theta, dtype=np.float64)
    layout = ParameterLayout(spec.dim, spec.T)
    if theta.size != layout.size:
        raise DimensionMismatch(f"parameter vector has {theta.size} entries, expected {layout.size}")
    steps = [
        HmcStepParams(theta[layout.log_step_size(t)], theta[layout.log_momentum_variance(t)], step.leapfrog_steps)
        for t, step in enumerate(spec.steps)
    ]
    return ChainSpec(
        target=spec.target,
        p0=InitialDistParams(theta[layout.mean], theta[layout.log_std]),
        steps=steps,
        entropy_floor=spec.entropy_floor if entropy_floor is None else entropy_floor,
    )


def _reparameterized_p0(theta_nodes, layout, eps):
    mean = theta_nodes[layout.mean]
    log_std = theta_nodes[layout.log_std]
    return [mean[i] + ad.exp(log_std[i]) * eps[:, i] for i in range(layout.dim)]


def chain_forward_differentiable(spec, noise, stop_gradient_inputs=True, theta_nodes=None, accept_log=None):
    """Monte Carlo average of log π*(x_T) as a DiffNode over θ.

    ``theta_nodes`` are the recorded inputs in layout order; a fresh record on
    ``pack_parameters(spec)`` is used when they are not given. Without
    detachment the objective is log π*(x_T). With detachment every transition
    starts from the plain value of the previous state and the objective is
    log π*(x_T) + Σ_{t<T} [L_t − stop_gradient(L_t)] with L_t = log π*(x_t),
    whose value is still log π*(x_T).
    """
    if theta_nodes is None:
        theta_nodes = ad.GradientRecord().inputs(pack_parameters(spec))
    layout = ParameterLayout(spec.dim, spec.T)
    target = spec.target
    x = _reparameterized_p0(theta_nodes, layout, noise.eps)
    surrogate = []
    for t, step in enumerate(spec.steps):
        log_mv = theta_nodes[layout.log_momentum_variance(t)]
        view = StepView(
            ad.exp(theta_nodes[layout.log_step_size(t)]),
            [ad.exp(v) for v in log_mv],
            step.leapfrog_steps,
        )
        if stop_gradient_inputs:
            if t > 0:
                level = target.log_prob(x)
                surrogate.append(level - ad.stop_gradient(level))
            x = [ad.value_of(c) for c in x]
        r = sample_momentum([noise.z[t][:, i] for i in range(spec.dim)], view.momentum_variance)
        try:
            x, accepted, _ = mh_coords(x, r, noise.u[t], target, view)
        except NumericalFailure as exc:
            raise exc.located(step=t + 1)
        if accept_log is not None:
            accept_log.append(np.asarray(accepted))
    objective = target.log_prob(x)
    for term in surrogate:
        objective = objective + term
    return ad.lane_mean(objective)


def _detached_step_gradient(target, x, grad_x, z, u, step):
    """Gradient of mean log π*(x_t) w.r.t. (log φ₂, log φ₁) with x_{t−1} = ``x`` fixed.

    Rejected lanes keep x_{t−1} and contribute nothing. On accepted lanes the
    adjoint of the proposal is ∇log π*(x′), which the leapfrog already
    computed, so log π* itself never goes on the record.
    Returns (gradient, x_t values, ∇log π*(x_t) values, accepted).
    """
    record = ad.GradientRecord()
    params = record.inputs(np.concatenate([[step.log_step_size], step.log_momentum_variance]))
    view = StepView(ad.exp(params[0]), [ad.exp(v) for v in params[1:]], step.leapfrog_steps)
    r = sample_momentum(z, view.momentum_variance)
    x_new, r_new, g_new = leapfrog_coords(x, r, target, view, grad=grad_x)
    log_p = log_acceptance(x, r, x_new, r_new, target, view)
    with np.errstate(divide="ignore"):
        accepted = np.asarray(log_p > np.log(u))
    g_values = [ad.value_of(g) for g in g_new]
    weights = [np.where(accepted, g, 0.0) for g in g_values]
    linear = x_new[0] * weights[0]
    for xi, wi in zip(x_new[1:], weights[1:]):
        linear = linear + xi * wi
    gradient = record.gradient(ad.lane_mean(linear))
    x_next = [np.where(accepted, ad.value_of(xn), xo) for xn, xo in zip(x_new, x)]
    g_next = [np.where(accepted, gn, go) for gn, go in zip(g_values, grad_x)]
    return gradient, x_next, g_next, accepted


def detached_chain_gradient(spec, noise, accept_log=None):
    """(mean log π*(x_T), ∂/∂θ) with every transition input detached.

    Each transition is recorded on its own record and dropped after its
    backward pass, so the cost per step does not depend on T. The P₀ block of
    the gradient is zero for T ≥ 1.
    """
    if spec.T == 0:
        return chain_value_and_gradient(spec, noise, stop_gradient_inputs=False)
    layout = ParameterLayout(spec.dim, spec.T)
    target = spec.target
    grad = np.zeros(layout.size)
    x0 = spec.p0.mean + spec.p0.std * noise.eps
    x = [x0[:, i] for i in range(spec.dim)]
    g = target.grad_log_prob(x)
    for t, step in enumerate(spec.steps):
        z = [noise.z[t][:, i] for i in range(spec.dim)]
        try:
            step_grad, x, g, accepted = _detached_step_gradient(target, x, g, z, noise.u[t], step)
        except NumericalFailure as exc:
            raise exc.located(step=t + 1)
        grad[layout.step_block(t)] = step_grad
        if accept_log is not None:
            accept_log.append(accepted)
    value = float(np.mean(target.log_prob(x)))
    if not math.isfinite(value):
        raise NumericalFailure("non-finite log π*(x_T)", step=spec.T)
    return value, grad


def chain_value_and_gradient(spec, noise, stop_gradient_inputs=True):
    """(mean log π*(x_T), ∂/∂θ) at fixed noise."""
    if stop_gradient_inputs and spec.T > 0:
        return detached_chain_gradient(spec, noise)
    return ad.evaluate_with_gradient(
        lambda nodes: chain_forward_differentiable(spec, noise, False, theta_nodes=nodes),
        pack_parameters(spec),
    )


def chain_final_values(spec, noise):
    """Plain forward pass at fixed noise: (log π*(x_T) per chain, accept masks per step)."""
    x0 = spec.p0.mean + spec.p0.std * noise.eps
    x = [x0[:, i] for i in range(spec.dim)]
    masks = []
    for t, step in enumerate(spec.steps):
        view = step.view()
        r = sample_momentum([noise.z[t][:, i] for i in range(spec.dim)], view.momentum_variance)
        x, accepted, _ = mh_coords(x, r, noise.u[t], spec.target, view)
        masks.append(np.asarray(accepted))
    return np.asarray(spec.target.log_prob(x)), masks
