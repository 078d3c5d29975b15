import math

import numpy as np
import pytest

from core.chain import ChainSpec, InitialDistParams
from core.targets import gaussian_target, make_target, standard_gaussian
from core.trainer import init_step_params


@pytest.fixture
def corr_gauss():
    return make_target("corr-gauss")


@pytest.fixture
def std_gauss_1d():
    return gaussian_target("std-1d", [[1.0]])


@pytest.fixture
def std_gauss_2d():
    return standard_gaussian(2)


@pytest.fixture
def valid_p0():
    """P₀ = N(0, 3I)."""
    return InitialDistParams.isotropic(2, math.sqrt(3.0))


@pytest.fixture
def make_spec(corr_gauss):
    def build(T=3, p0_std=math.sqrt(3.0), target=None, step_size=None, leapfrog_steps=5, h=-math.inf, seed=0):
        target = target or corr_gauss
        if step_size is None:
            steps = init_step_params(T, target.dim, leapfrog_steps, seed=seed)
        else:
            from core.hmc import HmcStepParams

            steps = [HmcStepParams.from_values(step_size, 1.0, leapfrog_steps, target.dim) for _ in range(T)]
        return ChainSpec(target, InitialDistParams.isotropic(target.dim, p0_std), steps, entropy_floor=h)

    return build


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture(autouse=True)
def log_to_tmp(tmp_path, monkeypatch):
    monkeypatch.setenv("ERGODIC_LOG_FILE", str(tmp_path / "ergodic.log"))
