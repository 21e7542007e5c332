"""Analytical feasibility reports: max images, max batch, max KV fraction.

All three maximization routines share one monotone feasibility predicate and
report which constraint bound first (memory or the model's context window),
so exhaustive linear scans in the tests can serve as oracles.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

from .models import (HardwareSpec, ModelSpec, StageRole, kv_bytes_per_token,
                     mm_bytes_per_token, patches_for_image, weights_bytes, Resolution)


class LimitingFactor(Enum):
    MEMORY = "memory"
    CONTEXT_LENGTH = "context_length"


@dataclass(frozen=True)
class DeploymentShape:
    """What is co-resident on one worker and how its free memory is split."""

    role: StageRole
    kv_fraction: float = 0.8
    mm_cache_tokens: int = 0  # 0 means bounded only by free memory
    act_bytes_per_token: float = 0.0
    enc_act_bytes_per_token: float = 0.0
    weights_overhead: float = 0.0
    gpus: int = 1

    def __post_init__(self) -> None:
        if not 0 <= self.kv_fraction <= 1:
            raise ValueError("kv_fraction must be within [0, 1]")
        if self.gpus < 1:
            raise ValueError("gpus must be >= 1")


@dataclass(frozen=True)
class CapacityReport:
    metric: str
    value: Optional[float]
    feasible: bool
    limiting_factor: LimitingFactor

    @property
    def label(self) -> str:
        if self.feasible:
            return str(self.value)
        return "OOCL" if self.limiting_factor is LimitingFactor.CONTEXT_LENGTH else "OOM"


@dataclass(frozen=True)
class _Budget:
    free: float
    kv_reserve: float
    pool: float


def _budget(model: ModelSpec, hw: HardwareSpec, shape: DeploymentShape,
            kv_fraction: Optional[float] = None) -> Optional[_Budget]:
    free = hw.gpu_memory * shape.gpus - weights_bytes(model, shape.role, shape.weights_overhead)
    if free < 0:
        return None
    # Dedicated encode workers reserve nothing for KV cache.
    fraction = 0.0 if shape.role is StageRole.ENCODE else (
        shape.kv_fraction if kv_fraction is None else kv_fraction)
    kv_reserve = fraction * free
    return _Budget(free=free, kv_reserve=kv_reserve, pool=free - kv_reserve)


def _per_request_demand(model: ModelSpec, shape: DeploymentShape, mm_tokens: int,
                        total_tokens: int) -> tuple[float, float]:
    """(pool bytes, KV-reservation bytes) one request costs on this shape."""
    mm_bytes = mm_tokens * mm_bytes_per_token(model)
    if shape.role is StageRole.ENCODE:
        return mm_bytes + shape.enc_act_bytes_per_token * mm_tokens, 0.0
    pool = mm_bytes + shape.act_bytes_per_token * total_tokens
    kv = total_tokens * kv_bytes_per_token(model)
    return pool, kv


def _feasible(model: ModelSpec, shape: DeploymentShape, budget: _Budget,
              images: int, batch: int, tokens_per_image: int, mm_per_image: int,
              prompt_tokens: int) -> tuple[bool, LimitingFactor]:
    total_tokens = images * tokens_per_image + prompt_tokens
    mm_tokens = images * mm_per_image
    if shape.role is not StageRole.ENCODE and total_tokens > model.max_context_tokens:
        return False, LimitingFactor.CONTEXT_LENGTH
    if shape.mm_cache_tokens and batch * mm_tokens > shape.mm_cache_tokens:
        return False, LimitingFactor.MEMORY
    pool_demand, kv_demand = _per_request_demand(model, shape, mm_tokens, total_tokens)
    if batch * pool_demand > budget.pool or batch * kv_demand > budget.kv_reserve:
        return False, LimitingFactor.MEMORY
    return True, LimitingFactor.MEMORY


def _tokens_per_image(model: ModelSpec, resolution: Resolution) -> tuple[int, int]:
    patches = patches_for_image(model, resolution)
    mm = patches * model.tokens_per_patch
    return mm, mm


def max_images_per_request(model: ModelSpec, hw: HardwareSpec, shape: DeploymentShape,
                           resolution: Resolution, prompt_tokens: int = 0,
                           limit: int = 10_000) -> CapacityReport:
    """Largest image count one batch-1 request can carry on this shape."""
    budget = _budget(model, hw, shape)
    if budget is None:
        return CapacityReport("max_images_per_request", None, False, LimitingFactor.MEMORY)
    mm_per_image, tokens_per_image = _tokens_per_image(model, resolution)
    best = None
    factor = LimitingFactor.MEMORY
    for n in range(1, limit + 1):
        ok, why = _feasible(model, shape, budget, n, 1, tokens_per_image,
                            mm_per_image, prompt_tokens)
        if not ok:
            factor = why
            break
        best = n
    if best is None:
        return CapacityReport("max_images_per_request", None, False, factor)
    return CapacityReport("max_images_per_request", best, True, factor)


def max_batch(model: ModelSpec, hw: HardwareSpec, shape: DeploymentShape,
              images_per_request: int, resolution: Resolution,
              prompt_tokens: int = 0, limit: int = 100_000) -> CapacityReport:
    """Largest number of concurrent requests that fit on this shape."""
    if images_per_request < 1:
        raise ValueError("images_per_request must be >= 1")
    budget = _budget(model, hw, shape)
    if budget is None:
        return CapacityReport("max_batch", None, False, LimitingFactor.MEMORY)
    mm_per_image, tokens_per_image = _tokens_per_image(model, resolution)
    best = None
    factor = LimitingFactor.MEMORY
    for b in range(1, limit + 1):
        ok, why = _feasible(model, shape, budget, images_per_request, b,
                            tokens_per_image, mm_per_image, prompt_tokens)
        if not ok:
            factor = why
            break
        best = b
    if best is None:
        return CapacityReport("max_batch", None, False, factor)
    return CapacityReport("max_batch", best, True, factor)


def max_kv_fraction(model: ModelSpec, hw: HardwareSpec, shape: DeploymentShape,
                    images_per_request: int, resolution: Resolution,
                    prompt_tokens: int = 0) -> CapacityReport:
    """Largest KV reservation (1% steps) keeping a batch-1 request feasible."""
    mm_per_image, tokens_per_image = _tokens_per_image(model, resolution)
    best = None
    factor = LimitingFactor.MEMORY
    for percent in range(0, 101):
        fraction = percent / 100.0
        budget = _budget(model, hw, shape, kv_fraction=fraction)
        if budget is None:
            break
        ok, why = _feasible(model, shape, budget, images_per_request, 1,
                            tokens_per_image, mm_per_image, prompt_tokens)
        if ok:
            best = fraction
        else:
            factor = why
            if why is LimitingFactor.CONTEXT_LENGTH:
                break  # no fraction can fix an over-long context
    if best is None:
        return CapacityReport("max_kv_fraction", None, False, factor)
    return CapacityReport("max_kv_fraction", best, True, factor)
