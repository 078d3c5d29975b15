"""
Registry of unnormalized 2D target densities with analytic gradients.

Densities are written against a list of coordinates, where each coordinate
is a float, a lane of floats (one per chain) or a DiffNode. That keeps one
definition for vectorized sampling and for the differentiable chain.
"""

import functools
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy import stats

from core import autodiff as ad
from core.errors import DimensionMismatch, EntropyUnavailable, RegistryError

# mass left outside every registered sampling box
BOX_TAIL_MASS = 1e-6


@dataclass(frozen=True)
class Box:
    lower: tuple
    upper: tuple

    @property
    def dim(self):
        return len(self.lower)

    @property
    def volume(self):
        return float(np.prod(np.asarray(self.upper) - np.asarray(self.lower)))

    @property
    def center(self):
        return (np.asarray(self.lower) + np.asarray(self.upper)) / 2.0

    def contains(self, points):
        points = np.atleast_2d(points)
        return np.all((points >= np.asarray(self.lower)) & (points <= np.asarray(self.upper)), axis=1)


@dataclass(frozen=True)
class GroundTruth:
    neg_expected_log_target: float
    entropy: Optional[float] = None
    log_z: Optional[float] = None


@dataclass(frozen=True)
class GaussianForm:
    mean: tuple
    cov: tuple


@dataclass(frozen=True, eq=False)
class TargetDensity:
    """Unnormalized log-density log π* with its gradient.

    ``log_prob`` and ``grad_log_prob`` take a coordinate list (see module doc).
    """

    name: str
    dim: int
    log_prob: Callable = field(repr=False)
    grad_log_prob: Callable = field(repr=False)
    ground_truth: Optional[GroundTruth] = None
    sampling_box: Optional[Box] = None
    gaussian: Optional[GaussianForm] = None
    description: str = ""

    def log_density_unnorm(self, x):
        """log π* at a point (d,), a batch (n, d) or a coordinate list."""
        coords, shape = _split(x, self.dim)
        out = self.log_prob(coords)
        return float(out) if shape == "point" else out

    def gradient(self, x):
        return grad_log_density(self, x)


def as_coords(x):
    """Coordinates of a point (d,) or batch (n, d); coordinate lists pass through."""
    return _split(x)[0]


def stack_coords(coords):
    """Inverse of as_coords for plain values: (d,) for floats, (n, d) for lanes."""
    values = [ad.value_of(c) for c in coords]
    if all(np.ndim(v) == 0 for v in values):
        return np.array(values, dtype=np.float64)
    n = max(np.shape(v)[0] for v in values if np.ndim(v) > 0)
    return np.column_stack([np.broadcast_to(v, (n,)) for v in values])


def _split(x, dim=None):
    if isinstance(x, (list, tuple)):
        coords, shape = list(x), "coords"
    else:
        arr = np.asarray(x, dtype=np.float64)
        if arr.ndim == 1:
            coords, shape = [float(v) for v in arr], "point"
        elif arr.ndim == 2:
            coords, shape = [arr[:, i] for i in range(arr.shape[1])], "batch"
        else:
            raise DimensionMismatch(f"expected a point or an (n, d) batch, got shape {arr.shape}")
    if dim is not None and len(coords) != dim:
        raise DimensionMismatch(f"point has {len(coords)} coordinates, target expects {dim}")
    return coords, shape


def log_density(target, x):
    return target.log_density_unnorm(x)


def grad_log_density(target, x):
    """∇ₓ log π*(x).

    Plain input returns an array shaped like ``x``; a coordinate list (e.g. of
    DiffNodes) returns a list of the same kind.
    """
    coords, shape = _split(x, target.dim)
    grad = target.grad_log_prob(coords)
    if shape == "coords":
        return grad
    if shape == "point":
        return np.array([float(g) for g in grad])
    n = coords[0].shape[0]
    return np.column_stack([np.broadcast_to(g, (n,)) for g in grad])


def _generic_sum(terms):
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


# -- families ------------------------------------------------------------------


def _gaussian_box(mean, cov):
    dim = len(mean)
    radius2 = stats.chi2.ppf(1.0 - BOX_TAIL_MASS, dim)
    half = np.sqrt(radius2 * np.diag(cov))
    return Box(tuple(np.asarray(mean) - half), tuple(np.asarray(mean) + half))


def gaussian_target(name, cov, mean=None, description=""):
    """π* = exp(−½ (x−μ)ᵀ Σ⁻¹ (x−μ)), i.e. an unnormalized Gaussian."""
    cov = np.asarray(cov, dtype=np.float64)
    dim = cov.shape[0]
    mean = np.zeros(dim) if mean is None else np.asarray(mean, dtype=np.float64)
    prec = np.linalg.inv(cov)
    centered = not np.any(mean)

    def deltas(coords):
        return list(coords) if centered else [c - m for c, m in zip(coords, mean)]

    def log_prob(coords):
        d = deltas(coords)
        terms = [prec[i, i] * (d[i] * d[i]) for i in range(dim)]
        for i in range(dim):
            for j in range(i + 1, dim):
                if prec[i, j] != 0.0:
                    terms.append((2.0 * prec[i, j]) * (d[i] * d[j]))
        return -0.5 * _generic_sum(terms)

    def grad_log_prob(coords):
        d = deltas(coords)
        grad = []
        for i in range(dim):
            terms = [prec[i, j] * d[j] for j in range(dim) if prec[i, j] != 0.0]
            grad.append(-_generic_sum(terms))
        return grad

    _, logdet = np.linalg.slogdet(cov)
    truth = GroundTruth(
        neg_expected_log_target=dim / 2.0,
        entropy=0.5 * dim * (1.0 + math.log(2.0 * math.pi)) + 0.5 * logdet,
        log_z=0.5 * dim * math.log(2.0 * math.pi) + 0.5 * logdet,
    )
    return TargetDensity(
        name=name,
        dim=dim,
        log_prob=log_prob,
        grad_log_prob=grad_log_prob,
        ground_truth=truth,
        sampling_box=_gaussian_box(mean, cov),
        gaussian=GaussianForm(tuple(mean), tuple(map(tuple, cov))),
        description=description,
    )


def standard_gaussian(dim=2):
    return gaussian_target(f"std-gauss-{dim}d", np.eye(dim), description="standard Gaussian")


def isotropic_gaussian(dim, variance):
    return gaussian_target(f"iso-gauss-{dim}d-{variance:g}", variance * np.eye(dim), description="isotropic Gaussian")


def gaussian_mixture_target(name, weights, means, stds, description=""):
    """Normalized mixture of isotropic Gaussians, so log Z = 0."""
    weights = np.asarray(weights, dtype=np.float64)
    means = np.asarray(means, dtype=np.float64)
    stds = np.asarray(stds, dtype=np.float64)
    dim = means.shape[1]
    log_norm = np.log(weights) - dim * np.log(stds) - 0.5 * dim * math.log(2.0 * math.pi)
    inv_var = 1.0 / stds ** 2

    def component_terms(coords):
        out = []
        for k in range(len(weights)):
            d = [c - m for c, m in zip(coords, means[k])]
            sq = _generic_sum([di * di for di in d])
            out.append((-0.5 * inv_var[k]) * sq + log_norm[k])
        return out

    def log_prob(coords):
        return ad.logsumexp(component_terms(coords))

    def grad_log_prob(coords):
        terms = component_terms(coords)
        total = ad.logsumexp(terms)
        resp = [ad.exp(t - total) for t in terms]
        grad = []
        for i in range(dim):
            parts = [resp[k] * ((means[k, i] - coords[i]) * inv_var[k]) for k in range(len(weights))]
            grad.append(_generic_sum(parts))
        return grad

    radius = math.sqrt(stats.chi2.ppf(1.0 - BOX_TAIL_MASS, dim))
    lower = np.min(means - radius * stds[:, None], axis=0)
    upper = np.max(means + radius * stds[:, None], axis=0)
    return TargetDensity(
        name=name,
        dim=dim,
        log_prob=log_prob,
        grad_log_prob=grad_log_prob,
        sampling_box=Box(tuple(lower), tuple(upper)),
        description=description,
    )


def ring_target(name, radius, width, half_width, description=""):
    """π* = exp(−(‖x‖ − radius)² / (2·width²)) on the plane."""
    inv_var = 1.0 / width ** 2

    def log_prob(coords):
        r = ad.sqrt(coords[0] * coords[0] + coords[1] * coords[1])
        gap = r - radius
        return (-0.5 * inv_var) * (gap * gap)

    def grad_log_prob(coords):
        r = ad.sqrt(coords[0] * coords[0] + coords[1] * coords[1])
        scale = (radius - r) * inv_var / r
        return [scale * coords[0], scale * coords[1]]

    return TargetDensity(
        name=name,
        dim=2,
        log_prob=log_prob,
        grad_log_prob=grad_log_prob,
        sampling_box=Box((-half_width, -half_width), (half_width, half_width)),
        description=description,
    )


def two_moons_target(name, radius=2.0, width=0.4, split=2.0, split_width=0.6, half_width=4.5, description=""):
    """Ring cut into two lobes along the first axis."""
    inv_var = 1.0 / width ** 2
    inv_split = 1.0 / split_width ** 2

    def lobes(x0):
        a = x0 - split
        b = x0 + split
        return [(-0.5 * inv_split) * (a * a), (-0.5 * inv_split) * (b * b)]

    def log_prob(coords):
        r = ad.sqrt(coords[0] * coords[0] + coords[1] * coords[1])
        gap = r - radius
        return (-0.5 * inv_var) * (gap * gap) + ad.logsumexp(lobes(coords[0]))

    def grad_log_prob(coords):
        x0, x1 = coords
        r = ad.sqrt(x0 * x0 + x1 * x1)
        scale = (radius - r) * inv_var / r
        terms = lobes(x0)
        total = ad.logsumexp(terms)
        resp_a = ad.exp(terms[0] - total)
        resp_b = ad.exp(terms[1] - total)
        lobe_grad = resp_a * ((split - x0) * inv_split) + resp_b * ((-split - x0) * inv_split)
        return [scale * x0 + lobe_grad, scale * x1]

    return TargetDensity(
        name=name,
        dim=2,
        log_prob=log_prob,
        grad_log_prob=grad_log_prob,
        sampling_box=Box((-half_width, -half_width), (half_width, half_width)),
        description=description,
    )


def uniform_target(box):
    """Flat π* on a box; only meaningful together with rejection sampling."""

    def log_prob(coords):
        c = coords[0]
        return 0.0 * c if ad.is_node(c) else np.zeros(np.shape(c)) if np.ndim(c) else 0.0

    def grad_log_prob(coords):
        return [0.0 * c if ad.is_node(c) else np.zeros(np.shape(c)) if np.ndim(c) else 0.0 for c in coords]

    return TargetDensity(name="uniform-box", dim=box.dim, log_prob=log_prob, grad_log_prob=grad_log_prob, sampling_box=box)


def scale_target(target, c):
    """c·π*: every log-density shifts by log c, gradients are unchanged."""
    shift = math.log(c)
    base_log_prob = target.log_prob

    def log_prob(coords):
        return base_log_prob(coords) + shift

    truth = target.ground_truth
    if truth is not None:
        truth = GroundTruth(
            neg_expected_log_target=truth.neg_expected_log_target - shift,
            entropy=truth.entropy,
            log_z=None if truth.log_z is None else truth.log_z + shift,
        )
    return replace(target, name=f"{target.name}*{c:g}", log_prob=log_prob, ground_truth=truth)


# -- registry ------------------------------------------------------------------

CORR_GAUSS_COV = ((2.0, 1.5), (1.5, 1.6))

TARGET_FACTORIES = {
    "corr-gauss": lambda: gaussian_target("corr-gauss", CORR_GAUSS_COV, description="correlated bivariate Gaussian"),
    "bench-a": lambda: gaussian_mixture_target(
        "bench-a", (0.5, 0.5), ((-1.5, 0.0), (1.5, 0.0)), (0.7, 0.7), description="two-component Gaussian mixture"
    ),
    "bench-b": lambda: gaussian_target("bench-b", ((3.0, 0.0), (0.0, 0.3)), description="anisotropic Gaussian"),
    "bench-c": lambda: ring_target("bench-c", radius=2.0, width=0.25, half_width=3.5, description="ring"),
    "bench-d": lambda: two_moons_target("bench-d", description="two-moons style density"),
    "bench-e": lambda: gaussian_target("bench-e", ((1.0, 0.95), (0.95, 1.0)), description="strongly correlated Gaussian"),
    "bench-f": lambda: gaussian_mixture_target(
        "bench-f", (0.6, 0.4), ((0.0, 0.0), (0.0, 0.0)), (0.6, 1.6), description="heavy-tailed scale mixture"
    ),
}

BENCHMARK_IDS = tuple(k for k in TARGET_FACTORIES if k.startswith("bench-"))


def list_targets():
    return list(TARGET_FACTORIES)


@functools.lru_cache(maxsize=None)
def make_target(target_id):
    """Resolve a registered id to its (shared, immutable) TargetDensity."""
    try:
        factory = TARGET_FACTORIES[target_id]
    except KeyError:
        raise RegistryError(f"unknown target {target_id!r}; registered: {', '.join(TARGET_FACTORIES)}") from None
    return factory()


def resolve_target(target):
    return make_target(target) if isinstance(target, str) else target


def target_entropy_reference(target):
    """H(π) in nats, for an id or a TargetDensity with analytic entropy."""
    target = resolve_target(target)
    truth = target.ground_truth
    if truth is None or truth.entropy is None:
        raise EntropyUnavailable(f"no analytic entropy for target {target.name!r}")
    return truth.entropy


def gaussian_entropy(log_std):
    """Entropy of a diagonal Gaussian with the given log standard deviations."""
    log_std = np.atleast_1d(np.asarray(log_std, dtype=np.float64))
    return float(np.sum(log_std) + 0.5 * log_std.size * math.log(2.0 * math.pi * math.e))
