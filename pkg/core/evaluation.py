"""Bias and convergence diagnostics for sample batches."""

import logging
from dataclasses import dataclass
from typing import Union

import numpy as np
import pandas as pd
from scipy.spatial.distance import cdist, pdist

from core.chain import SampleBatch
from core.errors import ConfigError, DimensionMismatch

logger = logging.getLogger(__name__)


def _points(batch):
    if isinstance(batch, SampleBatch):
        return batch.points
    return np.atleast_2d(np.asarray(batch, dtype=np.float64))


def expected_log_target(batch, target):
    """Sample mean of log π* and its standard error (0 for a single point)."""
    points = _points(batch)
    if points.shape[0] == 0:
        raise ConfigError("cannot estimate an expectation from an empty batch", ["batch"])
    if points.shape[1] != target.dim:
        raise DimensionMismatch(f"batch has dimension {points.shape[1]}, target {target.dim}")
    values = np.asarray(target.log_prob([points[:, i] for i in range(target.dim)]), dtype=np.float64)
    values = np.broadcast_to(values, (points.shape[0],))
    n = values.size
    std_error = float(np.std(values, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return float(np.mean(values)), std_error


def convergence_curve(batches, target):
    """E_{p_t}[log π*] ± stderr for t = 0 … T from recorded intermediate batches."""
    rows = []
    for t, batch in enumerate(batches):
        estimate, std_error = expected_log_target(batch, target)
        rows.append({"t": t, "estimate": estimate, "stderr": std_error})
    return pd.DataFrame(rows, columns=["t", "estimate", "stderr"])


# -- MMD -----------------------------------------------------------------------


@dataclass(frozen=True)
class MmdConfig:
    """Gaussian-kernel MMD²; ``bandwidth`` is "median" or a fixed σ > 0."""

    bandwidth: Union[str, float] = "median"
    median_max_points: int = 2000
    block_size: int = 2048

    def resolve_bandwidth(self, a, b):
        if self.bandwidth != "median":
            sigma = float(self.bandwidth)
        else:
            pooled = np.concatenate([a, b])
            if pooled.shape[0] > self.median_max_points:
                # evenly spaced rows keep the heuristic deterministic
                idx = np.linspace(0, pooled.shape[0] - 1, self.median_max_points).astype(int)
                pooled = pooled[idx]
            distances = pdist(pooled, "euclidean")
            sigma = float(np.median(distances[distances > 0])) if np.any(distances > 0) else 1.0
        if not sigma > 0:
            raise ConfigError(f"MMD bandwidth must be positive, got {sigma}", ["bandwidth"])
        return sigma


def _kernel_sum(x, y, sigma, block_size, exclude_diagonal=False):
    total = 0.0
    for start in range(0, x.shape[0], block_size):
        block = x[start:start + block_size]
        k = np.exp(-0.5 * cdist(block, y, "sqeuclidean") / sigma ** 2)
        total += k.sum()
        if exclude_diagonal:
            rows = np.arange(block.shape[0])
            total -= k[rows, start + rows].sum()
    return total


def mmd(a, b, config=None):
    """Unbiased U-statistic estimate of MMD² with a Gaussian kernel."""
    config = config or MmdConfig()
    x = _points(a)
    y = _points(b)
    if x.shape[1] != y.shape[1]:
        raise DimensionMismatch(f"batches have dimensions {x.shape[1]} and {y.shape[1]}")
    m, n = x.shape[0], y.shape[0]
    if m < 2 or n < 2:
        raise ConfigError("MMD needs at least two points per batch", ["batch"])
    sigma = config.resolve_bandwidth(x, y)
    kxx = _kernel_sum(x, x, sigma, config.block_size, exclude_diagonal=True) / (m * (m - 1))
    kyy = _kernel_sum(y, y, sigma, config.block_size, exclude_diagonal=True) / (n * (n - 1))
    kxy = _kernel_sum(x, y, sigma, config.block_size) / (m * n)
    return float(kxx + kyy - 2.0 * kxy)


# -- histograms ----------------------------------------------------------------


@dataclass
class Histogram2D:
    x_edges: np.ndarray
    y_edges: np.ndarray
    counts: np.ndarray
    n: int
    overflow: int

    def to_frame(self):
        rows = []
        for i in range(self.counts.shape[0]):
            for j in range(self.counts.shape[1]):
                rows.append({
                    "x_lo": self.x_edges[i],
                    "x_hi": self.x_edges[i + 1],
                    "y_lo": self.y_edges[j],
                    "y_hi": self.y_edges[j + 1],
                    "count": int(self.counts[i, j]),
                })
        return pd.DataFrame(rows)

    def save_tsv(self, path):
        self.to_frame().to_csv(path, sep="\t", index=False)


def histogram2d(batch, bins, box):
    """Counts on a bins×bins grid over ``box``; points outside go to ``overflow``."""
    points = _points(batch)
    if points.shape[1] != 2:
        raise DimensionMismatch(f"histogram2d needs 2D samples, got dimension {points.shape[1]}")
    lower, upper = np.asarray(box.lower, dtype=np.float64), np.asarray(box.upper, dtype=np.float64)
    counts, x_edges, y_edges = np.histogram2d(
        points[:, 0], points[:, 1], bins=bins, range=[[lower[0], upper[0]], [lower[1], upper[1]]]
    )
    counts = counts.astype(np.int64)
    n = points.shape[0]
    return Histogram2D(x_edges, y_edges, counts, n, int(n - counts.sum()))
