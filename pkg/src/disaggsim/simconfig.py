"""System configuration types: instances, roles, and the xEyPzD shorthand."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

from .costs import Channel, CostParams
from .models import HardwareSpec, ModelSpec, StageRole


class ConfigInfeasible(Exception):
    """The configuration cannot serve the pipeline on the given hardware."""


class CapacityExceeded(Exception):
    """A request can never fit the configured caches (admission disabled)."""


class SchedulePolicy(Enum):
    FCFS = "fcfs"
    ROUND_ROBIN = "round_robin"
    LEAST_LOADED = "least_loaded"


@dataclass(frozen=True)
class InstanceConfig:
    """One data-parallel instance: its role, parallel widths and batch cap.

    For encode instances ``tp`` is the intra-request parallel width (the
    number of workers one request's patches are sharded across).
    """

    role: StageRole
    tp: int = 1
    pp: int = 1
    max_batch: int = 1
    policy: SchedulePolicy = SchedulePolicy.FCFS

    def __post_init__(self) -> None:
        if self.tp < 1 or self.pp < 1:
            raise ValueError("tp and pp must be >= 1")
        if self.max_batch < 1:
            raise ValueError("max_batch must be >= 1")
        if self.role is StageRole.ENCODE and self.pp != 1:
            raise ValueError("encode instances must have pp == 1")

    @property
    def gpus(self) -> int:
        return self.tp * self.pp


_ROLE_FAMILIES = (
    {StageRole.ENCODE, StageRole.PREFILL, StageRole.DECODE},
    {StageRole.ENCODE_PREFILL, StageRole.DECODE},
    {StageRole.MONOLITHIC},
)


@dataclass(frozen=True)
class SystemConfig:
    """A complete deployment: instances plus the shared physics and caches."""

    instances: tuple[InstanceConfig, ...]
    hardware: HardwareSpec
    model: ModelSpec
    cost: CostParams = field(default_factory=CostParams)
    role_switch: Optional["ControllerParams"] = None  # noqa: F821 (controller module)
    kv_fraction: float = 0.5
    mm_cache_tokens: int = 48_000
    block_size: int = 16
    transfer_channel: Channel = Channel.INTRA
    admission_control: bool = True
    role_max_batch: Optional[dict[StageRole, int]] = None

    @property
    def gpu_count(self) -> int:
        return sum(i.gpus for i in self.instances)

    def validate(self) -> None:
        if not self.instances:
            raise ConfigInfeasible("no instances configured")
        if self.gpu_count > self.hardware.num_gpus:
            raise ConfigInfeasible(
                f"config needs {self.gpu_count} GPUs but hardware has {self.hardware.num_gpus}")
        roles = {i.role for i in self.instances}
        if not any(roles <= family for family in _ROLE_FAMILIES):
            raise ConfigInfeasible(f"unsupported role mixture {sorted(r.value for r in roles)}")
        for served, label in ((lambda r: r.serves_encode, "encode"),
                              (lambda r: r.serves_prefill, "prefill"),
                              (lambda r: r.serves_decode, "decode")):
            if not any(served(i.role) for i in self.instances):
                raise ConfigInfeasible(f"no instance serves the {label} stage")
        for stage_check in (lambda r: r.serves_encode, lambda r: r.serves_prefill,
                            lambda r: r.serves_decode):
            policies = {i.policy for i in self.instances if stage_check(i.role)}
            if len(policies) > 1:
                raise ConfigInfeasible("instances within one stage must share a policy")
        if not 0 <= self.kv_fraction <= 1:
            raise ConfigInfeasible("kv_fraction must be within [0, 1]")
        if self.role_switch is not None and not roles <= _ROLE_FAMILIES[0]:
            raise ConfigInfeasible("role switching requires dedicated E/P/D instances")


_SHAPE_TOKEN = re.compile(r"(\d+)(EP|E|P|D|M)")

_SHAPE_ROLES = {
    "E": StageRole.ENCODE,
    "P": StageRole.PREFILL,
    "D": StageRole.DECODE,
    "EP": StageRole.ENCODE_PREFILL,
    "M": StageRole.MONOLITHIC,
}


def parse_shape(shape: str) -> list[tuple[int, StageRole]]:
    """Expand shorthand like ``5E1P2D`` into (count, role) groups."""
    text = shape.strip().upper()
    pos = 0
    groups: list[tuple[int, StageRole]] = []
    while pos < len(text):
        match = _SHAPE_TOKEN.match(text, pos)
        if not match:
            raise ValueError(f"cannot parse deployment shape {shape!r} at {text[pos:]!r}")
        groups.append((int(match.group(1)), _SHAPE_ROLES[match.group(2)]))
        pos = match.end()
    if not groups:
        raise ValueError(f"empty deployment shape {shape!r}")
    return groups


def format_shape(instances) -> str:
    """Inverse of :func:`parse_shape` over an instance list (merging runs)."""
    parts: list[str] = []
    for inst in instances:
        symbol = inst.role.value
        if parts and parts[-1][1] == symbol:
            count, _ = parts[-1]
            parts[-1] = (count + 1, symbol)
        else:
            parts.append((1, symbol))
    return "".join(f"{count}{symbol}" for count, symbol in parts)


def expand_shape(shape: str, *, tp: Optional[dict[StageRole, int]] = None,
                 pp: Optional[dict[StageRole, int]] = None,
                 max_batch: Optional[dict[StageRole, int]] = None,
                 policy: SchedulePolicy = SchedulePolicy.FCFS) -> tuple[InstanceConfig, ...]:
    """Build instance configs from shorthand plus per-role settings."""
    tp = tp or {}
    pp = pp or {}
    max_batch = max_batch or {}
    out: list[InstanceConfig] = []
    for count, role in parse_shape(shape):
        for _ in range(count):
            out.append(InstanceConfig(
                role=role,
                tp=tp.get(role, 1),
                pp=pp.get(role, 1),
                max_batch=max_batch.get(role, 1),
                policy=policy,
            ))
    return tuple(out)


def disable_irp(config: SystemConfig) -> SystemConfig:
    """Split every multi-worker encode instance into width-1 instances.

    GPU count is conserved; each request's patches then run on one worker.
    """
    instances: list[InstanceConfig] = []
    for inst in config.instances:
        if inst.role is StageRole.ENCODE and inst.tp > 1:
            instances.extend(replace(inst, tp=1) for _ in range(inst.tp))
        else:
            instances.append(inst)
    return replace(config, instances=tuple(instances))


# --- config file I/O --------------------------------------------------------

def system_to_dict(config: SystemConfig) -> dict:
    return {
        "model": config.model.name,
        "hardware": {
            "gpu_memory": config.hardware.gpu_memory,
            "intra_node_bandwidth": config.hardware.intra_node_bandwidth,
            "inter_node_bandwidth": config.hardware.inter_node_bandwidth,
            "num_gpus": config.hardware.num_gpus,
        },
        "cost": {k: getattr(config.cost, k) for k in CostParams.__dataclass_fields__},
        "instances": [
            {"role": i.role.value, "tp": i.tp, "pp": i.pp,
             "max_batch": i.max_batch, "policy": i.policy.value}
            for i in config.instances
        ],
        "kv_fraction": config.kv_fraction,
        "mm_cache_tokens": config.mm_cache_tokens,
        "block_size": config.block_size,
        "transfer_channel": config.transfer_channel.value,
        "admission_control": config.admission_control,
    }


def system_from_dict(data: dict, catalog: dict[str, ModelSpec]) -> SystemConfig:
    model = catalog[data["model"]]
    hw = HardwareSpec(**data["hardware"])
    cost = CostParams(**data.get("cost", {}))
    if "shape" in data:
        instances = expand_shape(
            data["shape"],
            tp={StageRole(k): v for k, v in data.get("tp", {}).items()},
            pp={StageRole(k): v for k, v in data.get("pp", {}).items()},
            max_batch={StageRole(k): v for k, v in data.get("max_batch", {}).items()},
            policy=SchedulePolicy(data.get("policy", "fcfs")),
        )
    else:
        instances = tuple(
            InstanceConfig(
                role=StageRole(entry["role"]),
                tp=entry.get("tp", 1),
                pp=entry.get("pp", 1),
                max_batch=entry.get("max_batch", 1),
                policy=SchedulePolicy(entry.get("policy", "fcfs")),
            )
            for entry in data["instances"]
        )
    return SystemConfig(
        instances=instances,
        hardware=hw,
        model=model,
        cost=cost,
        kv_fraction=data.get("kv_fraction", 0.5),
        mm_cache_tokens=data.get("mm_cache_tokens", 48_000),
        block_size=data.get("block_size", 16),
        transfer_channel=Channel(data.get("transfer_channel", "intra")),
        admission_control=data.get("admission_control", True),
    )


def save_system_config(path, config: SystemConfig) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(system_to_dict(config), handle, indent=2, sort_keys=True)
        handle.write("\n")


def load_system_config(path, catalog: dict[str, ModelSpec]) -> SystemConfig:
    with open(path, "r", encoding="utf-8") as handle:
        return system_from_dict(json.load(handle), catalog)
