"""Black-box configuration search over instance counts, batches and IRP.

The objective is a performance metric minus a weighted GPU cost; the
simulator is the evaluator. Exhaustive enumeration is the correctness
oracle for small spaces; random search and a simple surrogate-guided
proposer cover larger ones.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .metrics import goodput, request_metrics
from .engine import run_simulation
from .simconfig import (ConfigInfeasible, InstanceConfig, SchedulePolicy,
                        SystemConfig)
from .models import StageRole
from .workload import WorkloadSpec, generate_poisson

NEG_INF = float("-inf")


class EmptyFeasibleSet(Exception):
    """No candidate in the space satisfies the GPU budget."""


class BudgetMode(Enum):
    AT_MOST = "at_most"
    EXACTLY = "exactly"


class Metric(Enum):
    GOODPUT = "goodput"
    NEG_MEAN_TTFT = "neg_mean_ttft"
    THROUGHPUT = "throughput"


class Strategy(Enum):
    EXHAUSTIVE = "exhaustive"
    RANDOM = "random"
    SURROGATE = "surrogate"


@dataclass(frozen=True)
class StageChoice:
    """Per-stage candidate settings; all instances of a stage are identical."""

    instances: int
    tp: int = 1
    pp: int = 1
    max_batch: int = 1


@dataclass(frozen=True)
class Candidate:
    encode: StageChoice
    prefill: StageChoice
    decode: StageChoice
    policy: SchedulePolicy = SchedulePolicy.FCFS

    @property
    def gpus(self) -> int:
        return (self.encode.instances * self.encode.tp * self.encode.pp
                + self.prefill.instances * self.prefill.tp * self.prefill.pp
                + self.decode.instances * self.decode.tp * self.decode.pp)

    def describe(self) -> dict:
        return {
            "e_instances": self.encode.instances, "e_tp": self.encode.tp,
            "e_batch": self.encode.max_batch,
            "p_instances": self.prefill.instances, "p_tp": self.prefill.tp,
            "p_pp": self.prefill.pp, "p_batch": self.prefill.max_batch,
            "d_instances": self.decode.instances, "d_tp": self.decode.tp,
            "d_pp": self.decode.pp, "d_batch": self.decode.max_batch,
            "policy": self.policy.value, "gpus": self.gpus,
        }

    def encode_vector(self) -> np.ndarray:
        """Numeric embedding used by the surrogate's distance weighting."""
        return np.array([
            self.encode.instances, self.encode.tp, math.log2(self.encode.max_batch),
            self.prefill.instances, self.prefill.tp * self.prefill.pp,
            math.log2(self.prefill.max_batch),
            self.decode.instances, self.decode.tp * self.decode.pp,
            math.log2(self.decode.max_batch),
            1.0 if self.policy is SchedulePolicy.LEAST_LOADED else 0.0,
        ], dtype=float)

    def instance_configs(self) -> tuple[InstanceConfig, ...]:
        out: list[InstanceConfig] = []
        for role, choice in ((StageRole.ENCODE, self.encode),
                             (StageRole.PREFILL, self.prefill),
                             (StageRole.DECODE, self.decode)):
            for _ in range(choice.instances):
                out.append(InstanceConfig(role=role, tp=choice.tp, pp=choice.pp,
                                          max_batch=choice.max_batch, policy=self.policy))
        return tuple(out)


@dataclass(frozen=True)
class ConfigSpace:
    """Search space of Candidate configurations under a GPU budget.

    ``irp_enabled`` offers the choice between one wide encode instance
    (patches sharded across its workers) and the same GPUs as independent
    width-1 instances.
    """

    gpu_budget: int
    budget_mode: BudgetMode = BudgetMode.EXACTLY
    encode_gpus: Sequence[int] = (1, 2, 3, 4, 5, 6)
    prefill_gpus: Sequence[int] = (1, 2, 3)
    decode_gpus: Sequence[int] = (1, 2, 3)
    irp_choices: Sequence[bool] = (True, False)
    encode_batches: Sequence[int] = (1, 2)
    prefill_batches: Sequence[int] = (1, 2)
    decode_batches: Sequence[int] = (8, 32, 128)
    policies: Sequence[SchedulePolicy] = (SchedulePolicy.FCFS,)

    def fits_budget(self, candidate: Candidate) -> bool:
        if self.budget_mode is BudgetMode.EXACTLY:
            return candidate.gpus == self.gpu_budget
        return candidate.gpus <= self.gpu_budget

    def enumerate(self) -> Iterator[Candidate]:
        """Deterministic enumeration of every budget-feasible candidate."""
        for e_gpus in self.encode_gpus:
            for irp in self.irp_choices:
                if irp:
                    encode_base = StageChoice(instances=1, tp=e_gpus)
                else:
                    encode_base = StageChoice(instances=e_gpus, tp=1)
                for e_batch in self.encode_batches:
                    encode = replace(encode_base, max_batch=e_batch)
                    for p_gpus in self.prefill_gpus:
                        for p_batch in self.prefill_batches:
                            prefill = StageChoice(instances=p_gpus, max_batch=p_batch)
                            for d_gpus in self.decode_gpus:
                                for d_batch in self.decode_batches:
                                    decode = StageChoice(instances=d_gpus, max_batch=d_batch)
                                    for policy in self.policies:
                                        cand = Candidate(encode, prefill, decode, policy)
                                        if self.fits_budget(cand):
                                            yield cand

    def size(self) -> int:
        return sum(1 for _ in self.enumerate())

    def sample(self, rng: np.random.Generator, max_tries: int = 10_000) -> Candidate:
        """Uniform sampling over raw choices with budget rejection."""
        for _ in range(max_tries):
            e_gpus = int(rng.choice(list(self.encode_gpus)))
            irp = bool(rng.choice([int(c) for c in self.irp_choices]))
            encode = (StageChoice(1, tp=e_gpus) if irp else StageChoice(e_gpus, tp=1))
            candidate = Candidate(
                encode=replace(encode, max_batch=int(rng.choice(list(self.encode_batches)))),
                prefill=StageChoice(int(rng.choice(list(self.prefill_gpus))),
                                    max_batch=int(rng.choice(list(self.prefill_batches)))),
                decode=StageChoice(int(rng.choice(list(self.decode_gpus))),
                                   max_batch=int(rng.choice(list(self.decode_batches)))),
                policy=self.policies[int(rng.integers(len(self.policies)))],
            )
            if self.fits_budget(candidate):
                return candidate
        raise EmptyFeasibleSet(f"no budget-respecting sample after {max_tries} tries")


def restricted_space(gpu_budget: int = 8) -> ConfigSpace:
    """The reduced space: shared per-stage batch settings, TP and PP fixed to 1
    (IRP width excepted), full GPU budget enforced by rejection."""
    return ConfigSpace(
        gpu_budget=gpu_budget,
        budget_mode=BudgetMode.EXACTLY,
        encode_gpus=tuple(range(1, gpu_budget - 1)),
        prefill_gpus=tuple(range(1, gpu_budget - 1)),
        decode_gpus=tuple(range(1, gpu_budget - 1)),
    )


def space_from_dict(data: dict) -> ConfigSpace:
    """Build a search space from a JSON-friendly mapping."""
    kwargs = dict(
        gpu_budget=data["gpu_budget"],
        budget_mode=BudgetMode(data.get("budget_mode", "exactly")),
    )
    for key in ("encode_gpus", "prefill_gpus", "decode_gpus",
                "encode_batches", "prefill_batches", "decode_batches"):
        if key in data:
            kwargs[key] = tuple(int(v) for v in data[key])
    if "irp_choices" in data:
        kwargs["irp_choices"] = tuple(bool(v) for v in data["irp_choices"])
    if "policies" in data:
        kwargs["policies"] = tuple(SchedulePolicy(p) for p in data["policies"])
    return ConfigSpace(**kwargs)


def load_space(path) -> ConfigSpace:
    import json

    with open(path, "r", encoding="utf-8") as handle:
        return space_from_dict(json.load(handle))


@dataclass(frozen=True)
class Objective:
    metric: Metric = Metric.GOODPUT
    beta: float = 0.075
    cost_per_gpu: float = 1.0
    slo_threshold: float = 0.9

    def __post_init__(self) -> None:
        if self.beta < 0:
            raise ValueError("beta must be >= 0")


def cost(instances: Sequence[InstanceConfig], cost_per_gpu: float = 1.0) -> float:
    """Total GPU cost of a parallelization plan."""
    return cost_per_gpu * sum(inst.tp * inst.pp for inst in instances)


@dataclass(frozen=True)
class EvalResult:
    score: float
    f_value: float
    cost_value: float
    feasible: bool


def evaluate(config: SystemConfig, workload_spec: WorkloadSpec, objective: Objective,
             seed: int, rate_grid: Optional[Sequence[float]] = None) -> EvalResult:
    """Score one configuration: metric value minus the weighted GPU cost."""
    cost_value = cost(config.instances, objective.cost_per_gpu)
    try:
        config.validate()
        if objective.metric is Metric.GOODPUT:
            if not rate_grid:
                raise ValueError("goodput objective needs a rate grid")
            f_value = goodput(config, workload_spec, workload_spec.slo, rate_grid,
                              threshold=objective.slo_threshold, seed=seed)
        else:
            spec = replace(workload_spec, seed=seed)
            trace = run_simulation(config, generate_poisson(spec), seed=seed)
            if objective.metric is Metric.NEG_MEAN_TTFT:
                metrics = request_metrics(trace, workload_spec.slo)
                if not metrics:
                    raise ConfigInfeasible("no request completed")
                f_value = -sum(m.ttft for m in metrics) / len(metrics)
            else:  # THROUGHPUT
                horizon = trace.horizon
                f_value = trace.completed_count / horizon if horizon > 0 else 0.0
    except ConfigInfeasible:
        return EvalResult(score=NEG_INF, f_value=NEG_INF, cost_value=cost_value,
                          feasible=False)
    return EvalResult(score=f_value - objective.beta * cost_value, f_value=f_value,
                      cost_value=cost_value, feasible=True)


@dataclass
class TrialRecord:
    index: int
    candidate: dict
    score: float
    f_value: float
    cost_value: float
    feasible: bool


@dataclass
class SolveResult:
    best_candidate: Candidate
    best_config: SystemConfig
    best_score: float
    log: list[TrialRecord] = field(default_factory=list)


def _surrogate_propose(space: ConfigSpace, rng: np.random.Generator,
                       seen: list[tuple[np.ndarray, float]], pool_size: int = 32) -> Candidate:
    """Pick the pool candidate maximizing predicted score plus an exploration
    bonus proportional to its distance from evaluated points."""
    pool = [space.sample(rng) for _ in range(pool_size)]
    finite = [(x, y) for x, y in seen if y > NEG_INF]
    if not finite:
        return pool[0]
    xs = np.stack([x for x, _ in finite])
    ys = np.array([y for _, y in finite])
    spread = float(ys.std()) or 1.0
    best, best_acq = pool[0], -math.inf
    for cand in pool:
        v = cand.encode_vector()
        dists = np.linalg.norm(xs - v, axis=1)
        nearest = float(dists.min())
        if nearest == 0.0:
            acq = float(ys[dists.argmin()])
        else:
            weights = 1.0 / (dists + 1e-9) ** 2
            acq = float(np.dot(weights, ys) / weights.sum()) + spread * nearest / (1 + nearest)
        if acq > best_acq:
            best, best_acq = cand, acq
    return best


def solve(space: ConfigSpace, workload_spec: WorkloadSpec, objective: Objective,
          builder: Callable[[Candidate], SystemConfig], strategy: Strategy = Strategy.SURROGATE,
          trials: int = 20, seed: int = 0,
          rate_grid: Optional[Sequence[float]] = None) -> SolveResult:
    """Maximize the objective over the space; every evaluation is logged."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    log: list[TrialRecord] = []
    seen: list[tuple[np.ndarray, float]] = []
    best: Optional[tuple[float, Candidate, SystemConfig]] = None

    if strategy is Strategy.EXHAUSTIVE:
        candidates: Iterator[Candidate] = space.enumerate()
    elif strategy is Strategy.RANDOM:
        candidates = (space.sample(rng) for _ in range(trials))
    else:
        def proposer() -> Iterator[Candidate]:
            warmup = min(trials, max(4, trials // 3))
            for _ in range(warmup):
                yield space.sample(rng)
            for _ in range(trials - warmup):
                yield _surrogate_propose(space, rng, seen)
        candidates = proposer()

    any_candidate = False
    for index, candidate in enumerate(candidates):
        any_candidate = True
        config = builder(candidate)
        result = evaluate(config, workload_spec, objective, seed=seed, rate_grid=rate_grid)
        log.append(TrialRecord(index=index, candidate=candidate.describe(),
                               score=result.score, f_value=result.f_value,
                               cost_value=result.cost_value, feasible=result.feasible))
        seen.append((candidate.encode_vector(), result.score))
        if result.feasible and (best is None or result.score > best[0]):
            best = (result.score, candidate, config)
    if not any_candidate or best is None:
        raise EmptyFeasibleSet("no feasible candidate was evaluated")
    return SolveResult(best_candidate=best[1], best_config=best[2],
                       best_score=best[0], log=log)


def write_search_log(path, log: Sequence[TrialRecord]) -> None:
    if not log:
        return
    fields = ["index", "score", "f_value", "cost_value", "feasible"]
    fields += sorted(log[0].candidate)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(fields)
        for rec in log:
            row = [rec.index, rec.score, rec.f_value, rec.cost_value, rec.feasible]
            row += [rec.candidate[k] for k in sorted(rec.candidate)]
            writer.writerow(row)
