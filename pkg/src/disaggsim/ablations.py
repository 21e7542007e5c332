"""Paired feature on/off experiments: patch sharding, optimizer, role switch."""

from __future__ import annotations

from dataclasses import replace
from typing import Optional, Sequence

import numpy as np

from .engine import run_simulation
from .metrics import goodput, request_metrics
from .optimizer import Metric, Objective, Strategy, evaluate, solve
from .presets import (ExperimentPreset, SYNTHETIC_COSTS, MINICPM, RES_4K,
                      build_epd, builtin_model, candidate_builder, get_preset,
                      optimizer_space, slo_for, offline_requests)
from .simconfig import SystemConfig, disable_irp
from .trace import SimTrace
from .workload import WorkloadSpec, generate_poisson, generate_shifted


def _mean_ttft(trace: SimTrace, slo) -> float:
    metrics = request_metrics(trace, slo)
    return sum(m.ttft for m in metrics) / len(metrics)


def _mean_tpot(trace: SimTrace, slo) -> float:
    metrics = request_metrics(trace, slo)
    return sum(m.tpot for m in metrics) / len(metrics)


def irp_ablation(images_list: Sequence[int] = (2, 4, 6, 8), rate: float = 0.125,
                 num_requests: int = 100, seed: int = 20260808) -> list[dict]:
    """Mean TTFT with patch sharding enabled vs disabled, per image count.

    Both deployments use identical GPUs: one five-worker encode instance
    against the same workers as independent width-1 instances.
    """
    model = builtin_model(MINICPM)
    cost = SYNTHETIC_COSTS[MINICPM]
    rows = []
    for images in images_list:
        slo = slo_for(MINICPM, images)
        spec = WorkloadSpec(
            rate_lambda=rate, num_requests=num_requests, prompt_tokens=22,
            images_per_request=images, resolution=RES_4K, output_tokens=10,
            seed=seed, slo=slo)
        workload = generate_poisson(spec)
        with_irp = build_epd(model, cost, e_width=5, p_instances=2, d_instances=1)
        without_irp = disable_irp(with_irp)
        ttft_on = _mean_ttft(run_simulation(with_irp, workload, seed=seed), slo)
        ttft_off = _mean_ttft(run_simulation(without_irp, workload, seed=seed), slo)
        rows.append({
            "images_per_request": images,
            "mean_ttft_with_irp": ttft_on,
            "mean_ttft_without_irp": ttft_off,
            "ratio": ttft_off / ttft_on,
        })
    return rows


def optimizer_ablation(trials: int = 24, num_random: int = 10, seed: int = 20260808,
                       beta: float = 0.075,
                       preset: Optional[ExperimentPreset] = None) -> dict:
    """Solver-found configuration vs the mean of uniformly sampled ones.

    Every configuration uses the full GPU budget, so the cost term is a
    constant offset and the comparison is on the raw metric.
    """
    preset = preset or get_preset("optimizer-restricted")
    space = optimizer_space(preset.hardware.num_gpus)
    objective = Objective(metric=Metric.GOODPUT, beta=beta)
    builder = candidate_builder(preset)
    result = solve(space, preset.workload, objective, builder,
                   strategy=Strategy.SURROGATE, trials=trials, seed=seed,
                   rate_grid=preset.rate_grid)
    solver_goodput = max(rec.f_value for rec in result.log
                         if rec.feasible and rec.score == result.best_score)

    rng = np.random.default_rng(seed + 1)
    random_rows = []
    for index in range(num_random):
        candidate = space.sample(rng)
        outcome = evaluate(builder(candidate), preset.workload, objective,
                           seed=seed, rate_grid=preset.rate_grid)
        random_rows.append({
            "index": index,
            "candidate": candidate.describe(),
            "goodput": outcome.f_value if outcome.feasible else 0.0,
        })
    random_mean = sum(row["goodput"] for row in random_rows) / len(random_rows)
    return {
        "solver_candidate": result.best_candidate.describe(),
        "solver_goodput": solver_goodput,
        "random_mean_goodput": random_mean,
        "random_rows": random_rows,
        "search_log": result.log,
    }


def _final_role_counts(trace: SimTrace) -> dict[str, int]:
    horizon = trace.meta.get("horizon", float("inf"))
    counts: dict[str, int] = {}
    for record in trace.instances.values():
        role = record.role_at(horizon)
        counts[role.value] = counts.get(role.value, 0) + 1
    return counts


def switch_ablation(seed: int = 20260808) -> dict:
    """Shifted workload with the switching controller on vs off."""
    preset = get_preset("switch-shifted")
    spec = replace(preset.workload, seed=seed)
    early, late = preset.shifted_split
    workload = generate_shifted(spec, early, late)

    enabled: SystemConfig = preset.systems["epd"]
    disabled = replace(enabled, role_switch=None)

    trace_on = run_simulation(enabled, workload, seed=seed)
    trace_off = run_simulation(disabled, workload, seed=seed)

    def summarize(trace: SimTrace) -> dict:
        return {
            "makespan": trace.horizon,
            "mean_ttft": _mean_ttft(trace, preset.slo),
            "mean_tpot": _mean_tpot(trace, preset.slo),
            "completed": trace.completed_count,
            "switches": len(trace.switches),
            "final_roles": _final_role_counts(trace),
        }

    return {
        "with_switch": summarize(trace_on),
        "without_switch": summarize(trace_off),
        "makespan_ratio": trace_on.horizon / trace_off.horizon,
        "switch_records": trace_on.switches,
    }


def offline_throughput(seed: int = 20260808) -> list[dict]:
    """Requests-per-second for each offline system plus shape/batch sweeps."""
    preset = get_preset("offline-throughput")
    workload = offline_requests(preset)
    rows = []

    def throughput(config: SystemConfig) -> float:
        trace = run_simulation(config, workload, seed=seed)
        return trace.completed_count / trace.horizon

    for label, config in preset.systems.items():
        rows.append({"system": label, "sweep": "preset", "value": "-",
                     "throughput": throughput(config)})

    model, cost = preset.model, preset.cost
    for e in range(1, 7):
        config = build_epd(model, cost, e_instances=e, e_width=1, e_batch=8,
                           p_instances=7 - e, p_batch=8, d_instances=1, d_batch=128)
        rows.append({"system": f"epd-{e}E{7 - e}P1D", "sweep": "shape", "value": e,
                     "throughput": throughput(config)})
    for batch in (1, 2, 4, 8, 16):
        config = build_epd(model, cost, e_instances=5, e_width=1, e_batch=batch,
                           p_instances=2, p_batch=batch, d_instances=1, d_batch=128)
        rows.append({"system": "epd-5E2P1D", "sweep": "batch", "value": batch,
                     "throughput": throughput(config)})
    return rows
