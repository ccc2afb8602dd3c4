"""Replication harness: sample sizes x replications x methods, CSV output, summaries.

Seed layout. Every stream is ``SeedSequence(master_seed, spawn_key=key)``:

    (rep, 0)      MDP spec
    (rep, 1)      behavior policy coefficients      ((1,) with fixed_policies)
    (rep, 2)      evaluation policy coefficients    ((2,) with fixed_policies)
    (rep, 3)      oracle batch
    (rep, 4)      evaluation states
    (rep, 5)      seed for penalty simulations inside the fits
    (rep, 6, n)   offline batch of size n

Both methods see the same batch in a cell, so comparisons are paired. Work is
split by replication across a process pool (size from ``RFQI_THREADS``) and
rows are sorted before writing, so the schedule cannot change the output.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import platform
import time
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import astuple, dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig
from .errors import MalformedInput, RfqiError
from .evaluation import (
    NAIVE_THRESHOLDED,
    REWARD_FILTERED,
    MetricsRecord,
    beta_min_margin,
    false_positive_count,
    q_mse,
    re_diagnostic,
    support_metrics,
)
from .fqi import DataDrivenPenalty, FqiConfig, LinearQ, run_naive_thresholded, run_oracle_q, run_reward_filtered
from .mdp import MdpSpec, generate_mdp, random_logistic_policy, simulate
from .regression import RegressionProblem, SupportSet, choose_penalty, standardize
from .rng import derive_seed, make_rng

log = logging.getLogger(__name__)

RESULTS_HEADER = [f.name for f in fields(MetricsRecord)]
SUMMARY_HEADER = ["method", "n", "metric", "mean", "standard_error", "num_replications", "flag"]
SUMMARY_METRICS = ("q_mse", "tpr", "fpr", "fp_count")
RUNNERS = {REWARD_FILTERED: run_reward_filtered, NAIVE_THRESHOLDED: run_naive_thresholded}

SPEC, BEHAVIOR, TARGET, ORACLE, EVAL_STATES, FIT, BATCH = range(7)


@dataclass(frozen=True)
class Timing:
    method: str
    n: int
    replication: int
    wall_time_ms: float


def worker_count() -> int:
    raw = os.environ.get("RFQI_THREADS", "").strip()
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            log.warning("ignoring non-integer RFQI_THREADS=%r", raw)
    return os.cpu_count() or 1


def replication_seed(config: ExperimentConfig, rep: int, role: int, *extra: int) -> int:
    if config.fixed_policies and role in (BEHAVIOR, TARGET):
        return derive_seed(config.master_seed, role)
    return derive_seed(config.master_seed, rep, role, *extra)


def replication_spec(config: ExperimentConfig, rep: int) -> MdpSpec:
    return generate_mdp(
        config.d,
        config.support_size,
        config.num_actions,
        config.horizon,
        config.discount,
        (config.sigma_s, config.sigma_r),
        config.beta_min_floor,
        config.spectral_cap,
        seed=replication_seed(config, rep, SPEC),
        rng_algorithm=config.rng_algorithm,
    )


def fqi_config(config: ExperimentConfig, target_policy, seed: int) -> FqiConfig:
    return FqiConfig(
        mode=config.fqi_mode,
        target_policy=target_policy,
        penalty_rule=config.penalty_rule_obj(),
        threshold_rule=config.threshold_rule_obj(),
        discount=config.discount,
        lasso_tol=config.lasso_tol,
        lasso_max_iters=config.lasso_max_iters,
        support_pooling=config.support_pooling,
        expected_support=config.support_size,
        seed=seed,
    )


def fitted_support(q: LinearQ, t: int = 0) -> SupportSet:
    """State coordinates used by any action's fit at stage t."""
    out = SupportSet((), q.d)
    for s in q.supports[t]:
        out = out.union(s)
    return out


def _failed(method: str, n: int, rep: int, code: str) -> MetricsRecord:
    nan = float("nan")
    return MetricsRecord(method, n, rep, nan, nan, nan, -1, 0.0, code)


def run_replication(config: ExperimentConfig, rep: int) -> tuple[list[MetricsRecord], list[Timing]]:
    """All (n, method) cells of one replication."""
    records: list[MetricsRecord] = []
    timings: list[Timing] = []
    algo = config.rng_algorithm
    try:
        spec = replication_spec(config, rep)
        behavior = random_logistic_policy(config.d, replication_seed(config, rep, BEHAVIOR), algo)
        target = random_logistic_policy(config.d, replication_seed(config, rep, TARGET), algo)
        cfg = fqi_config(config, target, replication_seed(config, rep, FIT))
        oracle = run_oracle_q(
            spec, target, config.n_oracle, replication_seed(config, rep, ORACLE), cfg, config.initial_sd, algo
        )
        eval_states = config.initial_sd * make_rng(
            replication_seed(config, rep, EVAL_STATES), algorithm=algo
        ).standard_normal((config.num_eval_states, config.d))
    except RfqiError as exc:
        log.warning("replication %d failed before fitting: %s", rep, exc)
        return [_failed(m, n, rep, exc.code) for n in config.sample_sizes for m in config.methods], []

    for n in config.sample_sizes:
        batch = simulate(spec, behavior, n, config.initial_sd, replication_seed(config, rep, BATCH, n), algo)
        for method in config.methods:
            start = time.perf_counter()
            try:
                result = RUNNERS[method](batch, cfg)
            except RfqiError as exc:
                log.warning("%s n=%d rep=%d failed: %s", method, n, rep, exc)
                records.append(_failed(method, n, rep, exc.code))
                continue
            elapsed = 1000.0 * (time.perf_counter() - start)
            est = fitted_support(result.qfun)
            tpr, fpr = support_metrics(est, spec.support, config.d)
            records.append(
                MetricsRecord(
                    method,
                    n,
                    rep,
                    q_mse(result.qfun, oracle, eval_states, 0),
                    tpr,
                    fpr,
                    false_positive_count(est, spec.support, config.d),
                    elapsed if config.record_wall_time else 0.0,
                )
            )
            timings.append(Timing(method, n, rep, elapsed))
    return records, timings


def _replication_task(args):
    config, rep = args
    return run_replication(config, rep)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_results(records: list[MetricsRecord], path: str | Path) -> None:
    rows = sorted(records, key=lambda r: (r.method, r.n, r.replication))
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULTS_HEADER)
        for r in rows:
            w.writerow([_fmt(v) for v in astuple(r)])


def run_experiment(config: ExperimentConfig, output_dir: str | Path | None = None, workers: int | None = None) -> Path:
    """Run the whole grid; returns the path of results.csv."""
    out = Path(output_dir if output_dir is not None else config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    workers = worker_count() if workers is None else max(1, workers)
    start = time.perf_counter()
    tasks = [(config, rep) for rep in range(config.replications)]
    if workers == 1 or len(tasks) == 1:
        outputs = [_replication_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
            outputs = list(pool.map(_replication_task, tasks))
    records = [r for recs, _ in outputs for r in recs]
    timings = sorted((t for _, ts in outputs for t in ts), key=lambda t: (t.method, t.n, t.replication))

    results = out / "results.csv"
    write_results(records, results)
    summarize(results, out / "summary.csv")
    with (out / "timings.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "n", "replication", "wall_time_ms"])
        for t in timings:
            w.writerow([t.method, t.n, t.replication, f"{t.wall_time_ms:.3f}"])
    manifest = {
        "config": config.to_dict(),
        "package_version": __version__,
        "numpy_version": np.__version__,
        "python_version": platform.python_version(),
        "workers": workers,
        "wall_time_s": round(time.perf_counter() - start, 3),
        "failed_cells": sum(1 for r in records if r.error),
        "seed_layout": {
            "spec": "(rep, 0)",
            "behavior_policy": "(1,)" if config.fixed_policies else "(rep, 1)",
            "target_policy": "(2,)" if config.fixed_policies else "(rep, 2)",
            "oracle_batch": "(rep, 3)",
            "eval_states": "(rep, 4)",
            "fit": "(rep, 5)",
            "batch": "(rep, 6, n)",
        },
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return results


# -- summaries --------------------------------------------------------------


def read_results(path: str | Path) -> list[MetricsRecord]:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise MalformedInput("results file is empty", row=1)
        missing = [c for c in RESULTS_HEADER if c not in header]
        if missing:
            raise MalformedInput(f"missing columns {missing}", row=1)
        col = {name: header.index(name) for name in RESULTS_HEADER}
        records = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise MalformedInput(f"expected {len(header)} fields, got {len(row)}", row=lineno)
            try:
                rec = MetricsRecord(
                    method=row[col["method"]],
                    n=int(row[col["n"]]),
                    replication=int(row[col["replication"]]),
                    q_mse=float(row[col["q_mse"]]),
                    tpr=float(row[col["tpr"]]),
                    fpr=float(row[col["fpr"]]),
                    fp_count=int(row[col["fp_count"]]),
                    wall_time_ms=float(row[col["wall_time_ms"]]),
                    error=row[col["error"]],
                )
            except ValueError as exc:
                raise MalformedInput(str(exc), row=lineno) from None
            if not rec.method:
                raise MalformedInput("empty method name", row=lineno)
            if not rec.error and not all(math.isfinite(v) for v in (rec.q_mse, rec.tpr, rec.fpr)):
                raise MalformedInput("non-finite metric in a row without an error code", row=lineno)
            records.append(rec)
    return records


def summary_rows(records: list[MetricsRecord]) -> list[list]:
    groups: dict[tuple[str, int], list[MetricsRecord]] = defaultdict(list)
    for r in records:
        groups[(r.method, r.n)].append(r)
    rows = []
    for (method, n), recs in sorted(groups.items()):
        ok = [r for r in recs if not r.error]
        for metric in SUMMARY_METRICS:
            vals = np.array([float(getattr(r, metric)) for r in ok])
            if vals.size == 0:
                mean, se, flag = float("nan"), float("nan"), "no_replications"
            elif vals.size == 1:
                mean, se, flag = float(vals[0]), 0.0, "single_replication"
            else:
                mean = float(np.mean(vals))
                se = float(np.std(vals, ddof=1) / math.sqrt(vals.size))
                flag = ""
            if vals.size and len(ok) < len(recs):
                flag = ";".join(filter(None, [flag, f"excluded_failures={len(recs) - len(ok)}"]))
            rows.append([method, n, metric, mean, se, vals.size, flag])
    return rows


def summarize(results_csv: str | Path, output_csv: str | Path) -> Path:
    rows = summary_rows(read_results(results_csv))
    out = Path(output_csv)
    with out.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return out


def read_summary(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or any(c not in reader.fieldnames for c in SUMMARY_HEADER):
            raise MalformedInput("summary header is missing required columns", row=1)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            try:
                rows.append(
                    {
                        "method": row["method"],
                        "n": int(row["n"]),
                        "metric": row["metric"],
                        "mean": float(row["mean"]),
                        "standard_error": float(row["standard_error"]),
                        "num_replications": int(row["num_replications"]),
                        "flag": row["flag"],
                    }
                )
            except (TypeError, ValueError) as exc:
                raise MalformedInput(str(exc), row=lineno) from None
    return rows


# -- diagnostics ------------------------------------------------------------


def diagnose(
    config: ExperimentConfig, rep: int = 0, n: int = 2000, subset_size: int = 20, num_sampled: int = 200
) -> dict:
    """Restricted-eigenvalue proxy and beta-min margin for one replication's
    stage-0 data, at the penalty the data-driven rule picks per action."""
    algo = config.rng_algorithm
    spec = replication_spec(config, rep)
    behavior = random_logistic_policy(config.d, replication_seed(config, rep, BEHAVIOR), algo)
    batch = simulate(spec, behavior, n, config.initial_sd, replication_seed(config, rep, BATCH, n), algo)
    design, _ = standardize(RegressionProblem(batch.states(0), batch.rewards[:, 0]))
    re = re_diagnostic(design.design, min(subset_size, n, config.d), num_sampled, derive_seed(config.master_seed, rep, 7),
                       include=spec.support)
    rule = config.penalty_rule_obj()
    fit_seed = replication_seed(config, rep, FIT)
    actions = []
    for a in range(config.num_actions):
        mask = batch.actions[:, 0] == a
        entry = {"action": a, "count": int(mask.sum())}
        if mask.sum() >= 2:
            problem, _ = standardize(RegressionProblem(batch.states(0)[mask], batch.rewards[mask, 0]))
            if isinstance(rule, DataDrivenPenalty):
                choice = choose_penalty(problem, rule.alpha, rule.c, rule.num_sim, derive_seed(fit_seed, 0, a),
                                        config.lasso_tol, config.lasso_max_iters, refinements=rule.refinements,
                                        residual=rule.residual)
                scale, sigma = rule.c * choice.quantile, choice.sigma
            else:
                scale, sigma = rule.value, 1.0
            entry.update(penalty=scale * sigma, penalty_scale=scale, sigma=sigma,
                         beta_min_margin=beta_min_margin(spec, scale, sigma))
        actions.append(entry)
    return {
        "replication": rep,
        "n": n,
        "spec_fingerprint": spec.fingerprint(),
        "true_support": list(spec.support.indices),
        "re_diagnostic": {
            "subset_size": re.subset_size,
            "num_sampled": re.num_sampled,
            "min_restricted_eig": re.min_restricted_eig,
            "max_restricted_eig": re.max_restricted_eig,
        },
        "actions": actions,
    }
