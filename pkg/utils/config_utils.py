"""
Experiment configuration: a flat key-value JSON file with typed parsing.

Precedence is built-in defaults < environment < config file < command-line
flags. Values in the file may be strings ("9", "true", "auto", "1,3,5,10").
"""

import dataclasses
import logging
import math
import os
from dataclasses import dataclass, field

from core.errors import ConfigError
from core.targets import BENCHMARK_IDS, TARGET_FACTORIES
from utils.file_utils import read_json, write_json

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_FILE = "config.json"

ENV_KEYS = {
    "ERGODIC_OUT_DIR": "out",
    "ERGODIC_THREADS": "threads",
}


def _parse_bool(value):
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("true", "1", "yes", "on"):
        return True
    if text in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def _parse_int(value):
    if isinstance(value, bool):
        raise ValueError("boolean where an integer was expected")
    if isinstance(value, float) and not value.is_integer():
        raise ValueError(f"not an integer: {value!r}")
    return int(str(value).strip()) if not isinstance(value, (int, float)) else int(value)


def _parse_float(value):
    number = float(str(value).strip()) if not isinstance(value, (int, float)) else float(value)
    if not math.isfinite(number):
        raise ValueError(f"not a finite number: {value!r}")
    return number


def _parse_h(value):
    if str(value).strip().lower() == "auto":
        return "auto"
    return _parse_float(value)


def _split(value):
    if isinstance(value, (list, tuple)):
        return list(value)
    return [part.strip() for part in str(value).split(",") if part.strip()]


def _parse_int_list(value):
    return tuple(_parse_int(v) for v in _split(value))


def _parse_float_list(value):
    return tuple(_parse_float(v) for v in _split(value))


def _parse_str_list(value):
    return tuple(str(v) for v in _split(value))


def _parse_bandwidth(value):
    if str(value).strip().lower() == "median":
        return "median"
    return _parse_float(value)


PARSERS = {
    "target": str,
    "T": _parse_int,
    "leapfrog_steps": _parse_int,
    "batch": _parse_int,
    "iterations": _parse_int,
    "h": _parse_h,
    "h_reference_std": _parse_float,
    "p0_std": _parse_float,
    "p0_invalid_std": _parse_float,
    "bench_p0_std": _parse_float,
    "seed": _parse_int,
    "out": str,
    "stop_gradient": _parse_bool,
    "entropy_guard": _parse_bool,
    "learning_rate": _parse_float,
    "chain_learning_rate": _parse_float,
    "train_momentum_variance": _parse_bool,
    "momentum_variance_init": _parse_float,
    "eval_samples": _parse_int,
    "oracle_samples": _parse_int,
    "mmd_samples": _parse_int,
    "mmd_lengths": _parse_int_list,
    "mmd_bandwidth": _parse_bandwidth,
    "histogram_bins": _parse_int,
    "ais_temps": _parse_int,
    "ais_chains": _parse_int,
    "bench_targets": _parse_str_list,
    "bench_T": _parse_int,
    "bench_compare_stop_gradient": _parse_bool,
    "sweep_h_values": _parse_float_list,
    "threads": _parse_int,
}


@dataclass
class ExperimentConfig:
    target: str = "corr-gauss"
    T: int = 9
    leapfrog_steps: int = 5
    batch: int = 128
    iterations: int = 50
    h: object = "auto"
    h_reference_std: float = 1.5
    p0_std: float = math.sqrt(3.0)
    p0_invalid_std: float = 0.5
    bench_p0_std: float = 2.0
    seed: int = 0
    out: str = "results"
    stop_gradient: bool = True
    entropy_guard: bool = True
    learning_rate: float = 0.01
    chain_learning_rate: float = 0.1
    train_momentum_variance: bool = True
    momentum_variance_init: float = 1.0
    eval_samples: int = 100000
    oracle_samples: int = 100000
    mmd_samples: int = 2000
    mmd_lengths: tuple = (1, 3, 5, 10)
    mmd_bandwidth: object = "median"
    histogram_bins: int = 50
    ais_temps: int = 1000
    ais_chains: int = 64
    bench_targets: tuple = field(default_factory=lambda: ("corr-gauss",) + BENCHMARK_IDS)
    bench_T: int = 10
    bench_compare_stop_gradient: bool = False
    sweep_h_values: tuple = (1.5, 2.0, 2.5, 2.81223)
    threads: int = 1

    def validate(self):
        """Collect every invalid field and raise a single ConfigError."""
        bad = []
        if self.target not in TARGET_FACTORIES:
            bad.append("target")
        positive_ints = ("leapfrog_steps", "eval_samples", "oracle_samples", "histogram_bins", "threads")
        for name in positive_ints:
            if getattr(self, name) < 1:
                bad.append(name)
        for name in ("T", "iterations", "bench_T"):
            if getattr(self, name) < 0:
                bad.append(name)
        if self.batch < 2:
            bad.append("batch")
        if self.mmd_samples < 2:
            bad.append("mmd_samples")
        if self.ais_temps < 2:
            bad.append("ais_temps")
        if self.ais_chains < 2:
            bad.append("ais_chains")
        for name in ("h_reference_std", "p0_std", "p0_invalid_std", "bench_p0_std", "momentum_variance_init"):
            if not getattr(self, name) > 0:
                bad.append(name)
        for name in ("learning_rate", "chain_learning_rate"):
            if getattr(self, name) < 0:
                bad.append(name)
        if self.mmd_bandwidth != "median" and not self.mmd_bandwidth > 0:
            bad.append("mmd_bandwidth")
        if any(t < 0 for t in self.mmd_lengths):
            bad.append("mmd_lengths")
        if any(t not in TARGET_FACTORIES for t in self.bench_targets):
            bad.append("bench_targets")
        if bad:
            raise ConfigError(f"invalid experiment configuration: {', '.join(bad)}", bad)
        return self

    def to_flat_dict(self):
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                out[f.name] = "true" if value else "false"
            elif isinstance(value, float):
                out[f.name] = repr(value)
            elif isinstance(value, (list, tuple)):
                out[f.name] = ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
            else:
                out[f.name] = str(value)
        return out


def parse_values(raw, values, bad):
    """Parse the known keys of ``raw`` into ``values``; failing keys go to ``bad``.

    A later source that parses cleanly clears an earlier failure of the same key.
    """
    for key, value in raw.items():
        if key not in PARSERS:
            if key not in bad:
                bad.append(key)
            continue
        try:
            values[key] = PARSERS[key](value)
        except (TypeError, ValueError):
            values.pop(key, None)
            if key not in bad:
                bad.append(key)
        else:
            if key in bad:
                bad.remove(key)
    return values, bad


def env_values():
    return {key: os.getenv(name) for name, key in ENV_KEYS.items() if os.getenv(name)}


def default_config_path():
    """The root config.json when it exists in the working directory."""
    return DEFAULT_CONFIG_FILE if os.path.exists(DEFAULT_CONFIG_FILE) else None


def load_experiment_config(path=None, overrides=None):
    """Resolve defaults < env < file < overrides into a validated ExperimentConfig.

    Unparseable values and values that fail validation are reported together
    in one ConfigError.
    """
    values, bad = parse_values(env_values(), {}, [])
    if path:
        try:
            raw = read_json(path)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}", ["config"]) from None
        except ValueError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}", ["config"]) from None
        parse_values(raw, values, bad)
        logger.info("Loaded configuration from %s", path)
    if overrides:
        parse_values({k: v for k, v in overrides.items() if v is not None}, values, bad)

    config = ExperimentConfig(**values)
    try:
        config.validate()
    except ConfigError as exc:
        bad.extend(name for name in exc.fields if name not in bad)
    if bad:
        raise ConfigError(f"invalid experiment configuration: {', '.join(bad)}", bad)
    return config


def save_experiment_config(config, path):
    write_json(path, config.to_flat_dict())
    return path
