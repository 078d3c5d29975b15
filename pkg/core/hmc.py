"""
HMC transition kernel: vanilla leapfrog plus the Metropolis-Hastings step
written as a gated selection between the proposal and the current position.

Positions and momenta are coordinate lists (see core.targets), so the same
code runs on plain floats, on lanes of chains and on DiffNodes.
"""

import math
from collections import namedtuple
from dataclasses import dataclass, field

import numpy as np

from core import autodiff as ad
from core.errors import ConfigError, DimensionMismatch, NumericalFailure
from core.targets import as_coords, stack_coords

# step_size: φ₂, momentum_variance: list of φ₁ per dimension, leapfrog_steps: m
StepView = namedtuple("StepView", ["step_size", "momentum_variance", "leapfrog_steps"])


@dataclass
class HmcStepParams:
    """Hyperparameters of one transition, stored in log form for the optimizer."""

    log_step_size: float
    log_momentum_variance: np.ndarray = field(default_factory=lambda: np.zeros(2))
    leapfrog_steps: int = 5

    def __post_init__(self):
        self.log_step_size = float(self.log_step_size)
        self.log_momentum_variance = np.atleast_1d(np.asarray(self.log_momentum_variance, dtype=np.float64))
        self.leapfrog_steps = int(self.leapfrog_steps)
        bad = []
        if not math.isfinite(self.log_step_size):
            bad.append("step_size")
        if not np.all(np.isfinite(self.log_momentum_variance)):
            bad.append("momentum_variance")
        if self.leapfrog_steps < 1:
            bad.append("leapfrog_steps")
        if bad:
            raise ConfigError(f"invalid HMC step parameters: {', '.join(bad)}", bad)

    @classmethod
    def from_values(cls, step_size, momentum_variance=1.0, leapfrog_steps=5, dim=2):
        mv = np.broadcast_to(np.asarray(momentum_variance, dtype=np.float64), (dim,))
        if step_size <= 0 or np.any(mv <= 0):
            raise ConfigError("step_size and momentum_variance must be positive", ["step_size", "momentum_variance"])
        return cls(math.log(step_size), np.log(mv), leapfrog_steps)

    @property
    def dim(self):
        return self.log_momentum_variance.size

    @property
    def step_size(self):
        return math.exp(self.log_step_size)

    @property
    def momentum_variance(self):
        return np.exp(self.log_momentum_variance)

    def view(self):
        return StepView(self.step_size, [float(v) for v in self.momentum_variance], self.leapfrog_steps)

    def to_dict(self):
        return {
            "step_size": self.step_size,
            "momentum_variance": self.momentum_variance.tolist(),
            "leapfrog_steps": self.leapfrog_steps,
        }

    @classmethod
    def from_dict(cls, data):
        mv = np.asarray(data["momentum_variance"], dtype=np.float64)
        return cls.from_values(float(data["step_size"]), mv, int(data.get("leapfrog_steps", 5)), dim=mv.size)


@dataclass
class PhaseState:
    position: object
    momentum: object


def as_view(params):
    return params.view() if isinstance(params, HmcStepParams) else params


def _check_finite(coords, what, iteration):
    for c in coords:
        value = ad.value_of(c)
        if not np.all(np.isfinite(value)):
            lanes = np.flatnonzero(~np.isfinite(np.atleast_1d(value)))
            lane = int(lanes[0]) if np.ndim(value) else None
            raise NumericalFailure(f"non-finite {what} in leapfrog", iteration=iteration, lane=lane)


def kinetic_energy(r, momentum_variance):
    """K(r) = ½ Σ r²/φ₁, the negative log of the unnormalized momentum density."""
    terms = [(ri * ri) / vi for ri, vi in zip(r, momentum_variance)]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return 0.5 * total


def sample_momentum(z, momentum_variance):
    """r = √φ₁ ⊙ z for standard normal coordinates z."""
    return [ad.sqrt(v) * zi for v, zi in zip(momentum_variance, z)]


def leapfrog_coords(x, r, target, view, grad=None):
    """Run ``view.leapfrog_steps`` leapfrog iterations on coordinate lists.

    Returns (x′, r′, ∇log π*(x′)); the last gradient can seed the next call.
    """
    step = view.step_size
    half = 0.5 * step
    drift = [step / v for v in view.momentum_variance]
    g = target.grad_log_prob(x) if grad is None else grad
    for it in range(view.leapfrog_steps):
        r = [ri + half * gi for ri, gi in zip(r, g)]
        x = [xi + ki * ri for xi, ki, ri in zip(x, drift, r)]
        g = target.grad_log_prob(x)
        r = [ri + half * gi for ri, gi in zip(r, g)]
        _check_finite(x, "position", it)
        _check_finite(r, "momentum", it)
    return x, r, g


def leapfrog(state, target, params):
    """Leapfrog on a PhaseState whose parts are points, batches or coordinate lists."""
    view = as_view(params)
    plain = not isinstance(state.position, (list, tuple))
    x = as_coords(state.position)
    r = as_coords(state.momentum)
    if len(x) != target.dim or len(r) != target.dim:
        raise DimensionMismatch(f"phase state has {len(x)}/{len(r)} coordinates, target expects {target.dim}")
    x, r, _ = leapfrog_coords(x, r, target, view)
    if plain:
        return PhaseState(stack_coords(x), stack_coords(r))
    return PhaseState(x, r)


def log_acceptance(x, r, x_new, r_new, target, view):
    """log p_MH = min{0, [log π*(x′) − K(r′)] − [log π*(x) − K(r)]}, from plain values only."""
    mv = view.momentum_variance
    values = [ad.value_of(c) for c in x]
    values_new = [ad.value_of(c) for c in x_new]
    mv_values = [ad.value_of(v) for v in mv]
    current = target.log_prob(values) - kinetic_energy([ad.value_of(c) for c in r], mv_values)
    proposed = target.log_prob(values_new) - kinetic_energy([ad.value_of(c) for c in r_new], mv_values)
    delta = np.asarray(proposed - current, dtype=np.float64)
    delta = np.where(np.isnan(delta), -np.inf, delta)
    out = np.minimum(0.0, delta)
    return float(out) if out.ndim == 0 else out


def mh_coords(x, r, u, target, view):
    """One proposal plus gated accept/reject on coordinate lists.

    Returns (x_next, accepted, log_accept_prob); ``accepted`` is a bool or a
    boolean lane.
    """
    x_new, r_new, _ = leapfrog_coords(x, r, target, view)
    log_p = log_acceptance(x, r, x_new, r_new, target, view)
    with np.errstate(divide="ignore"):
        accepted = np.asarray(log_p > np.log(u))
    if accepted.ndim == 0:
        accepted = bool(accepted)
    x_next = [ad.gated_select(accepted, xn, xo) for xn, xo in zip(x_new, x)]
    return x_next, accepted, log_p


def mh_transform(x_prev, r, u, target, params):
    """M-H transformation: x′ if p_MH > u else x_prev.

    Returns (x_next, accepted) in the same form as ``x_prev``.
    """
    view = as_view(params)
    plain = not isinstance(x_prev, (list, tuple))
    x = as_coords(x_prev)
    if len(x) != target.dim:
        raise DimensionMismatch(f"position has {len(x)} coordinates, target expects {target.dim}")
    x_next, accepted, _ = mh_coords(x, as_coords(r), u, target, view)
    return (stack_coords(x_next) if plain else x_next), accepted


def hmc_transition(x, target, params, randomness):
    """One M-H corrected HMC step.

    ``randomness`` is either an explicit ``(z, u)`` pair, where ``z`` is standard
    normal noise and the momentum is r = √φ₁ ⊙ z, or a numpy Generator.
    """
    view = as_view(params)
    plain = not isinstance(x, (list, tuple))
    coords = as_coords(x)
    if isinstance(randomness, np.random.Generator):
        shape = np.shape(stack_coords(coords)) if plain else (len(coords),) + np.shape(ad.value_of(coords[0]))
        lanes = shape[:-1] if plain else shape[1:]
        z_arr = randomness.standard_normal(shape)
        u = randomness.random(lanes) if lanes else float(randomness.random())
        z = as_coords(z_arr) if plain else [z_arr[i] for i in range(len(coords))]
    else:
        z, u = randomness
        z = as_coords(z)
    r = sample_momentum(z, view.momentum_variance)
    x_next, _, _ = mh_coords(coords, r, u, target, view)
    return stack_coords(x_next) if plain else x_next
