import logging
import math
import os
import time

import numpy as np
import pandas as pd

from core.chain import ChainSpec, InitialDistParams, SampleBatch, run_chain
from core.errors import ConfigError, EntropyUnavailable, ErgodicError, OracleError
from core.evaluation import MmdConfig, convergence_curve, expected_log_target, histogram2d, mmd
from core.oracles import AisConfig, ais_estimate, rejection_sample, self_normalized_log_target
from core.targets import gaussian_entropy, make_target, target_entropy_reference
from core.trainer import AdamConfig, TrainConfig, TrainReport, init_step_params, train
from utils.config_utils import save_experiment_config
from utils.file_utils import ensure_dir, read_json, write_csv, write_json, write_tsv

logger = logging.getLogger(__name__)

STEP_SIZE_INIT_RANGE = (0.01, 0.025)


def resolve_entropy_floor(config, target):
    """h from the config: a number, or "auto" for H(π) (falling back to the reference prior)."""
    if config.h != "auto":
        return float(config.h)
    try:
        return target_entropy_reference(target)
    except EntropyUnavailable:
        h = gaussian_entropy(np.full(target.dim, math.log(config.h_reference_std)))
        logger.info(
            "No analytic entropy for %s, using H(N(0, %.3g² I)) = %.5f as h", target.name, config.h_reference_std, h
        )
        return h


def build_chain_spec(config, target, p0_std, h, T=None, entropy_guard=None):
    T = config.T if T is None else T
    guard = config.entropy_guard if entropy_guard is None else entropy_guard
    steps = init_step_params(
        T, target.dim, config.leapfrog_steps, STEP_SIZE_INIT_RANGE, config.seed, config.momentum_variance_init
    )
    return ChainSpec(
        target=target,
        p0=InitialDistParams.isotropic(target.dim, p0_std),
        steps=steps,
        entropy_floor=h if guard else -math.inf,
    )


def build_train_config(config, stop_gradient=None, entropy_guard=None):
    return TrainConfig(
        batch_size=config.batch,
        iterations=max(config.iterations, 1),
        adam=AdamConfig(learning_rate=config.learning_rate),
        entropy_guard=config.entropy_guard if entropy_guard is None else entropy_guard,
        stop_gradient=config.stop_gradient if stop_gradient is None else stop_gradient,
        seed=config.seed,
        step_size_init_range=STEP_SIZE_INIT_RANGE,
        chain_learning_rate=config.chain_learning_rate,
        train_momentum_variance=config.train_momentum_variance,
    )


def _train_or_keep(spec, config, **overrides):
    if config.iterations == 0:
        logger.info("iterations=0, keeping the initial parameters")
        return spec, TrainReport()
    return train(spec, build_train_config(config, **overrides))


def _fail(name, exc):
    logger.error("✗ %s failed: %s", name, exc)
    return None, exc


def cmd_train(config):
    """Train the chain for ``config.target`` and write params.json + train_report.csv."""
    try:
        out = ensure_dir(config.out)
        save_experiment_config(config, os.path.join(out, "resolved_config.json"))
        target = make_target(config.target)
        h = resolve_entropy_floor(config, target)
        spec = build_chain_spec(config, target, config.p0_std, h)
        trained, report = _train_or_keep(spec, config)

        params_path = os.path.join(out, "params.json")
        report_path = os.path.join(out, "train_report.csv")
        write_json(params_path, trained.to_dict())
        report.save_csv(report_path)
        logger.info("✓ Trained parameters written to %s", params_path)
        return {
            "params": params_path,
            "report": report_path,
            "entropy_floor": h,
            "guard_events": report.guard_events,
            "final_entropy": trained.p0.entropy(),
        }, None
    except (ErgodicError, OSError) as exc:
        return _fail("train", exc)


def _oracle_batch(config, target, out):
    """Rejection samples for the target, cached as CSV in the output directory."""
    cache = os.path.join(out, f"oracle_{target.name}_{config.oracle_samples}_{config.seed}.csv")
    if os.path.exists(cache):
        logger.info("Using cached oracle samples %s", cache)
        return SampleBatch.load_csv(cache)
    logger.info("Oracle cache missing, running rejection sampling for %s", target.name)
    started = time.perf_counter()
    batch = rejection_sample(target, config.oracle_samples, [config.seed, 1])
    logger.info("✓ Oracle computed in %.2fs", time.perf_counter() - started)
    batch.save_csv(cache)
    return batch


def _mmd_curve(config, trained_run, untrained_run, oracle):
    mmd_config = MmdConfig(bandwidth=config.mmd_bandwidth)
    m = config.mmd_samples
    reference = oracle.points[:m]
    rows = []
    for t in config.mmd_lengths:
        if t >= len(trained_run.intermediates):
            logger.warning("⚠ Skipping MMD at t=%d, chain length is %d", t, len(trained_run.intermediates) - 1)
            continue
        rows.append({
            "t": t,
            "mmd_trained": mmd(trained_run.intermediates[t].points[:m], reference, mmd_config),
            "mmd_untrained": mmd(untrained_run.intermediates[t].points[:m], reference, mmd_config),
        })
    return pd.DataFrame(rows, columns=["t", "mmd_trained", "mmd_untrained"])


def cmd_evaluate(config, params_path=None):
    """Convergence curves, MMD against the oracle and histograms for trained parameters."""
    try:
        out = ensure_dir(config.out)
        params_path = params_path or os.path.join(out, "params.json")
        if not os.path.exists(params_path):
            raise ConfigError(f"trained-parameter file not found: {params_path}", ["params"])
        data = read_json(params_path)
        target = make_target(data["target"])
        trained = ChainSpec.from_dict(data, target=target)
        h = resolve_entropy_floor(config, target)
        untrained = build_chain_spec(config, target, config.p0_std, h, T=trained.T, entropy_guard=False)

        seed = [config.seed, 2]
        trained_run = run_chain(trained, config.eval_samples, seed, record_intermediate=True, threads=config.threads)
        untrained_run = run_chain(untrained, config.eval_samples, seed, record_intermediate=True, threads=config.threads)
        trained_curve = convergence_curve(trained_run.intermediates, target)
        untrained_curve = convergence_curve(untrained_run.intermediates, target)
        write_tsv(trained_curve, os.path.join(out, "convergence_trained.tsv"))
        write_tsv(untrained_curve, os.path.join(out, "convergence_untrained.tsv"))

        oracle = _oracle_batch(config, target, out)
        curve = _mmd_curve(config, trained_run, untrained_run, oracle)
        write_tsv(curve, os.path.join(out, "mmd_curve.tsv"))

        if target.dim == 2 and target.sampling_box is not None:
            histogram2d(trained_run, config.histogram_bins, target.sampling_box).save_tsv(
                os.path.join(out, "histogram_trained.tsv")
            )
            histogram2d(oracle, config.histogram_bins, target.sampling_box).save_tsv(
                os.path.join(out, "histogram_oracle.tsv")
            )

        estimate, stderr = expected_log_target(trained_run, target)
        untrained_estimate, untrained_stderr = expected_log_target(untrained_run, target)
        oracle_estimate, oracle_stderr = expected_log_target(oracle, target)
        metrics = pd.DataFrame([
            {"source": "trained", "e_logpi": estimate, "stderr": stderr},
            {"source": "untrained", "e_logpi": untrained_estimate, "stderr": untrained_stderr},
            {"source": "oracle", "e_logpi": oracle_estimate, "stderr": oracle_stderr},
        ])
        write_csv(metrics, os.path.join(out, "metrics.csv"))
        logger.info("✓ E_pT[log π*] trained %.4f ± %.4f, oracle %.4f", estimate, stderr, oracle_estimate)
        return {
            "e_logpi_trained": estimate,
            "stderr_trained": stderr,
            "e_logpi_untrained": untrained_estimate,
            "e_logpi_oracle": oracle_estimate,
            "convergence_trained": trained_curve,
            "convergence_untrained": untrained_curve,
            "mmd_curve": curve,
        }, None
    except (ErgodicError, OSError, KeyError) as exc:
        return _fail("evaluate", exc)


BENCH_COLUMNS = [
    "target", "method", "neg_e_logpi", "stderr", "sample_seconds", "train_seconds_per_100", "log_z", "ess", "error",
]


def _bench_row(target_name, method, batch=None, target=None, sample_seconds=math.nan, train_seconds=math.nan, error=""):
    row = dict.fromkeys(BENCH_COLUMNS, math.nan)
    row.update({"target": target_name, "method": method, "error": error})
    if batch is not None:
        estimate, stderr = expected_log_target(batch, target)
        row.update({"neg_e_logpi": -estimate, "stderr": stderr})
    row.update({"sample_seconds": sample_seconds, "train_seconds_per_100": train_seconds})
    return row


def _timed_train(spec, config, **overrides):
    started = time.perf_counter()
    trained, _ = _train_or_keep(spec, config, **overrides)
    elapsed = time.perf_counter() - started
    per_100 = elapsed / config.iterations * 100.0 if config.iterations else math.nan
    return trained, per_100


def _timed_run(spec, config, seed):
    started = time.perf_counter()
    batch = run_chain(spec, config.eval_samples, seed, threads=config.threads)
    return batch, time.perf_counter() - started


def _ais_row(config, target_id, target):
    """AIS reference: self-normalized −E[log π*], log Z and the weight ESS."""
    started = time.perf_counter()
    ais_config = AisConfig(n_temps=config.ais_temps, n_chains=config.ais_chains, leapfrog_steps=config.leapfrog_steps)
    try:
        log_z, weighted = ais_estimate(target, config=ais_config, seed=[config.seed, 4])
    except OracleError as exc:
        logger.error("✗ AIS on %s failed: %s", target_id, exc)
        return _bench_row(target_id, "AIS", error=str(exc))
    row = _bench_row(target_id, "AIS", sample_seconds=time.perf_counter() - started)
    row.update({
        "neg_e_logpi": -self_normalized_log_target(weighted, target),
        "log_z": log_z,
        "ess": weighted.metadata["ess"],
    })
    return row


def _bench_target(config, target_id):
    target = make_target(target_id)
    h = resolve_entropy_floor(config, target)
    spec = build_chain_spec(config, target, config.bench_p0_std, h, T=config.bench_T)
    rows = []

    trained, train_per_100 = _timed_train(spec, config)
    batch, seconds = _timed_run(trained, config, [config.seed, 3])
    rows.append(_bench_row(target_id, "HEI", batch, target, seconds, train_per_100))

    batch, seconds = _timed_run(spec, config, [config.seed, 3])
    rows.append(_bench_row(target_id, "HEI-untrained", batch, target, seconds))

    if config.bench_compare_stop_gradient:
        full, full_per_100 = _timed_train(spec, config, stop_gradient=False)
        batch, seconds = _timed_run(full, config, [config.seed, 3])
        rows.append(_bench_row(target_id, "HEI-full-backprop", batch, target, seconds, full_per_100))

    started = time.perf_counter()
    oracle = rejection_sample(target, config.oracle_samples, [config.seed, 1])
    rows.append(_bench_row(target_id, "oracle", oracle, target, time.perf_counter() - started))
    rows.append(_ais_row(config, target_id, target))
    return rows


def cmd_bench(config):
    """Table of −E[log π*] and timings per target and method; failures stay in their row."""
    try:
        out = ensure_dir(config.out)
        rows = []
        for target_id in config.bench_targets:
            logger.info("=" * 80)
            logger.info("Benchmark %s", target_id)
            try:
                rows.extend(_bench_target(config, target_id))
                logger.info("✓ %s done", target_id)
            except ErgodicError as exc:
                logger.error("✗ %s failed: %s", target_id, exc)
                rows.append(_bench_row(target_id, "HEI", error=str(exc)))
        table = pd.DataFrame(rows, columns=BENCH_COLUMNS)
        path = write_csv(table, os.path.join(out, "bench.csv"))
        return {"table": table, "path": path}, None
    except OSError as exc:
        return _fail("bench", exc)


def _constraint_case(config, target, p0_std, h, guard, label, out):
    spec = build_chain_spec(config, target, p0_std, h, entropy_guard=guard)
    trained, report = _train_or_keep(spec, config, entropy_guard=guard)
    seed = [config.seed, 2]
    before = run_chain(spec, config.eval_samples, seed, record_intermediate=True, threads=config.threads)
    after = run_chain(trained, config.eval_samples, seed, record_intermediate=True, threads=config.threads)
    before_curve = convergence_curve(before.intermediates, target)
    after_curve = convergence_curve(after.intermediates, target)
    write_tsv(before_curve, os.path.join(out, f"demo_{label}_untrained.tsv"))
    write_tsv(after_curve, os.path.join(out, f"demo_{label}_trained.tsv"))
    if target.sampling_box is not None:
        histogram2d(after, config.histogram_bins, target.sampling_box).save_tsv(
            os.path.join(out, f"demo_{label}_histogram.tsv")
        )
    report.save_csv(os.path.join(out, f"demo_{label}_report.csv"))
    return {
        "p0_entropy": spec.p0.entropy(),
        "guard_events": report.guard_events,
        "untrained_curve": before_curve,
        "trained_curve": after_curve,
    }


def cmd_demo_constraint(config):
    """Valid P₀ with the entropy guard, and a low-entropy P₀′ without it, on corr-gauss."""
    try:
        out = ensure_dir(config.out)
        target = make_target("corr-gauss")
        h = target_entropy_reference(target)
        logger.info("=" * 80)
        logger.info("Entropy constraint demo, H(π) = %.5f", h)
        logger.info("=" * 80)
        valid = _constraint_case(config, target, config.p0_std, h, True, "valid", out)
        invalid = _constraint_case(config, target, config.p0_invalid_std, h, False, "invalid", out)
        logger.info(
            "✓ valid P0 H=%.4f guard events %d; invalid P0 H=%.4f",
            valid["p0_entropy"], valid["guard_events"], invalid["p0_entropy"],
        )
        return {"entropy_target": h, "valid": valid, "invalid": invalid}, None
    except (ErgodicError, OSError) as exc:
        return _fail("demo-constraint", exc)


def cmd_sweep_h(config):
    """Train the valid-P₀ corr-gauss chain for each h in ``sweep_h_values``."""
    try:
        out = ensure_dir(config.out)
        target = make_target("corr-gauss")
        rows = []
        for h in config.sweep_h_values:
            try:
                spec = build_chain_spec(config, target, config.p0_std, h, entropy_guard=True)
                trained, report = _train_or_keep(spec, config, entropy_guard=True)
                run = run_chain(trained, config.eval_samples, [config.seed, 2], record_intermediate=True,
                                threads=config.threads)
                curve = convergence_curve(run.intermediates, target)
                write_tsv(curve, os.path.join(out, f"sweep_h_{h:g}.tsv"))
                final = curve.iloc[-1]
                rows.append({
                    "h": h,
                    "e_logpi_T": final["estimate"],
                    "stderr": final["stderr"],
                    "final_entropy": trained.p0.entropy(),
                    "guard_events": report.guard_events,
                    "error": "",
                })
            except ErgodicError as exc:
                logger.error("✗ h=%g failed: %s", h, exc)
                rows.append({"h": h, "error": str(exc)})
        table = pd.DataFrame(rows, columns=["h", "e_logpi_T", "stderr", "final_entropy", "guard_events", "error"])
        write_csv(table, os.path.join(out, "sweep_h.csv"))
        return {"table": table}, None
    except OSError as exc:
        return _fail("sweep-h", exc)
