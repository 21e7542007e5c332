"""Shipped experiment presets: models, SLO limits, systems and workloads.

Per-stage latency coefficients are synthetic calibrations chosen so the
relative behavior of the deployments is meaningful at desk scale; they are
not measurements of any real accelerator.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional

from .controller import ControllerParams
from .costs import CostParams
from .models import HardwareSpec, ModelSpec, StageRole, builtin_model
from .optimizer import Candidate, ConfigSpace, restricted_space
from .simconfig import InstanceConfig, SchedulePolicy, SystemConfig
from .workload import Request, Slo, WorkloadSpec

MINICPM = "minicpm-v-2.6"
INTERNVL8 = "internvl2-8b"
INTERNVL26 = "internvl2-26b"

RES_4K = (4032, 3024)
RES_MID = (787, 444)
RES_LOW = (313, 234)

# TTFT / TPOT limits (seconds) keyed by (model, images per request).
SLO_TABLE: dict[tuple[str, int], Slo] = {
    (MINICPM, 2): Slo(1.40, 0.04),
    (MINICPM, 4): Slo(2.60, 0.04),
    (MINICPM, 6): Slo(3.90, 0.06),
    (MINICPM, 8): Slo(5.10, 0.06),
    (INTERNVL8, 2): Slo(1.20, 0.05),
    (INTERNVL8, 4): Slo(2.40, 0.06),
    (INTERNVL8, 6): Slo(3.55, 0.09),
    (INTERNVL8, 8): Slo(5.00, 0.18),
    (INTERNVL26, 2): Slo(3.50, 0.07),
    (INTERNVL26, 4): Slo(7.05, 0.08),
    (INTERNVL26, 6): Slo(11.00, 0.95),
    (INTERNVL26, 8): Slo(15.00, 0.15),
}


def slo_for(model_name: str, images_per_request: int) -> Slo:
    try:
        return SLO_TABLE[(model_name, images_per_request)]
    except KeyError:
        raise KeyError(f"no SLO entry for {model_name} at {images_per_request} images") from None


# Synthetic per-model stage calibrations (seconds).
SYNTHETIC_COSTS: dict[str, CostParams] = {
    MINICPM: CostParams(
        enc_base=0.1, enc_per_patch=0.05,
        prefill_base=0.05, prefill_per_token=2e-4, prefill_quad=1e-8,
        decode_base=0.01, decode_per_seq=0.002, decode_per_kv_token=1e-6),
    INTERNVL8: CostParams(
        enc_base=0.1, enc_per_patch=0.04,
        prefill_base=0.05, prefill_per_token=8e-5, prefill_quad=1e-9,
        decode_base=0.01, decode_per_seq=0.002, decode_per_kv_token=5e-7),
    INTERNVL26: CostParams(
        enc_base=0.1, enc_per_patch=0.1,
        prefill_base=0.05, prefill_per_token=2e-4, prefill_quad=2e-9,
        decode_base=0.012, decode_per_seq=0.003, decode_per_kv_token=5e-7),
}

EIGHT_GPU_NODE = HardwareSpec(
    gpu_memory=82e9,
    intra_node_bandwidth=300e9,
    inter_node_bandwidth=25e9,
    num_gpus=8,
)

# Heavy capacity profile: synthetic activation workspace coefficients that
# put the aggregated shapes under realistic memory pressure at 4K inputs.
HEAVY_PREFILL_ACT_BYTES = 100_000.0
HEAVY_ENCODE_ACT_BYTES = 50_000.0


@dataclass(frozen=True)
class ExperimentPreset:
    name: str
    model: ModelSpec
    hardware: HardwareSpec
    cost: CostParams
    workload: WorkloadSpec
    systems: dict[str, SystemConfig]
    rate_grid: tuple[float, ...]
    slo: Slo
    seed: int
    images_per_request: int
    notes: str = ""
    shifted_split: Optional[tuple[tuple[int, int], tuple[int, int]]] = None


def _instances(groups: list[tuple[int, StageRole, int, int, int]],
               policy: SchedulePolicy = SchedulePolicy.FCFS) -> tuple[InstanceConfig, ...]:
    out: list[InstanceConfig] = []
    for count, role, tp, pp, batch in groups:
        out.extend(InstanceConfig(role=role, tp=tp, pp=pp, max_batch=batch, policy=policy)
                   for _ in range(count))
    return tuple(out)


def build_epd(model: ModelSpec, cost: CostParams, hw: HardwareSpec = EIGHT_GPU_NODE, *,
              e_instances: int = 1, e_width: int = 4, e_batch: int = 1,
              p_instances: int = 2, p_tp: int = 1, p_batch: int = 1,
              d_instances: int = 2, d_tp: int = 1, d_batch: int = 1,
              policy: SchedulePolicy = SchedulePolicy.LEAST_LOADED,
              **kwargs) -> SystemConfig:
    instances = _instances([
        (e_instances, StageRole.ENCODE, e_width, 1, e_batch),
        (p_instances, StageRole.PREFILL, p_tp, 1, p_batch),
        (d_instances, StageRole.DECODE, d_tp, 1, d_batch),
    ], policy)
    return SystemConfig(instances=instances, hardware=hw, model=model, cost=cost, **kwargs)


def build_distserve(model: ModelSpec, cost: CostParams, hw: HardwareSpec = EIGHT_GPU_NODE, *,
                    ep_instances: int = 6, ep_tp: int = 1, ep_batch: int = 1,
                    d_instances: int = 2, d_batch: int = 1,
                    policy: SchedulePolicy = SchedulePolicy.LEAST_LOADED,
                    **kwargs) -> SystemConfig:
    instances = _instances([
        (ep_instances, StageRole.ENCODE_PREFILL, ep_tp, 1, ep_batch),
        (d_instances, StageRole.DECODE, 1, 1, d_batch),
    ], policy)
    return SystemConfig(instances=instances, hardware=hw, model=model, cost=cost, **kwargs)


def build_monolithic(model: ModelSpec, cost: CostParams, hw: HardwareSpec = EIGHT_GPU_NODE, *,
                     instances: int = 8, batch: int = 1,
                     policy: SchedulePolicy = SchedulePolicy.LEAST_LOADED,
                     **kwargs) -> SystemConfig:
    configs = _instances([(instances, StageRole.MONOLITHIC, 1, 1, batch)], policy)
    return SystemConfig(instances=configs, hardware=hw, model=model, cost=cost, **kwargs)


_FIG5_GRIDS = {
    MINICPM: (0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0),
    INTERNVL8: (0.05, 0.1, 0.15, 0.2, 0.3, 0.4, 0.5, 0.6),
    INTERNVL26: (0.02, 0.05, 0.08, 0.12, 0.16, 0.2, 0.3, 0.4, 0.6, 0.8),
}

_MODEL_ALIASES = {"minicpm": MINICPM, "internvl8": INTERNVL8, "internvl26": INTERNVL26}


def _slo_attainment_preset(model_name: str, images: int, seed: int = 20260808) -> ExperimentPreset:
    model = builtin_model(model_name)
    cost = SYNTHETIC_COSTS[model_name]
    slo = slo_for(model_name, images)
    workload = WorkloadSpec(
        rate_lambda=1.0, num_requests=100, prompt_tokens=22,
        images_per_request=images, resolution=RES_4K, output_tokens=10,
        seed=seed, slo=slo)
    systems = {
        "epd": build_epd(model, cost),
        "distserve": build_distserve(model, cost),
        "monolithic": build_monolithic(model, cost),
    }
    alias = {v: k for k, v in _MODEL_ALIASES.items()}[model_name]
    return ExperimentPreset(
        name=f"slo-{alias}-{images}img",
        model=model, hardware=EIGHT_GPU_NODE, cost=cost, workload=workload,
        systems=systems, rate_grid=_FIG5_GRIDS[model_name], slo=slo, seed=seed,
        images_per_request=images,
        notes="online SLO-attainment sweep; synthetic stage calibration")


def encode_heavy_preset(seed: int = 20260808) -> ExperimentPreset:
    """4 high-resolution images per request on the smallest model."""
    return _slo_attainment_preset(MINICPM, 4, seed)


def ttft_distribution_preset(model_name: str, images: int,
                             seed: int = 20260808) -> ExperimentPreset:
    """Fixed-rate run comparing TTFT distributions of the two splits."""
    model = builtin_model(model_name)
    cost = SYNTHETIC_COSTS[model_name]
    slo = slo_for(model_name, images)
    rate = 0.25 if model_name == MINICPM else 0.08
    workload = WorkloadSpec(
        rate_lambda=rate, num_requests=100, prompt_tokens=22,
        images_per_request=images, resolution=RES_4K, output_tokens=10,
        seed=seed, slo=slo)
    systems = {
        "epd": build_epd(model, cost),
        "distserve": build_distserve(model, cost),
    }
    alias = {v: k for k, v in _MODEL_ALIASES.items()}[model_name]
    return ExperimentPreset(
        name=f"ttft-{alias}-{images}img",
        model=model, hardware=EIGHT_GPU_NODE, cost=cost, workload=workload,
        systems=systems, rate_grid=(rate,), slo=slo, seed=seed,
        images_per_request=images,
        notes="TTFT distribution at a fixed arrival rate")


def switch_preset(seed: int = 20260808, role_switch: bool = True) -> ExperimentPreset:
    """Shifted-output workload served by an initially encode-heavy deployment."""
    model = builtin_model(MINICPM)
    cost = replace(SYNTHETIC_COSTS[MINICPM],
                   decode_base=0.004, decode_per_seq=0.002, decode_per_kv_token=4e-7)
    slo = Slo(5.0, 0.1)
    workload = WorkloadSpec(
        rate_lambda=3.0, num_requests=100, prompt_tokens=22,
        images_per_request=1, resolution=RES_4K, output_tokens=50,
        seed=seed, slo=slo)
    controller = ControllerParams(
        monitor_interval=1.0,
        imbalance_threshold=4.0,
        smoothing=4.0,
        min_instances_per_stage=2,
        cooldown=4.0,
        stage_work_scale={
            StageRole.ENCODE: 10.0,     # patches per request
            StageRole.PREFILL: 662.0,   # prefill tokens per request
            StageRole.DECODE: 1.0,      # sequences
        },
    ) if role_switch else None
    system = SystemConfig(
        instances=_instances([
            (5, StageRole.ENCODE, 1, 1, 1),
            (1, StageRole.PREFILL, 1, 1, 1),
            (2, StageRole.DECODE, 1, 1, 5),
        ], SchedulePolicy.LEAST_LOADED),
        hardware=EIGHT_GPU_NODE, model=model, cost=cost,
        role_switch=controller,
        role_max_batch={StageRole.ENCODE: 1, StageRole.PREFILL: 1, StageRole.DECODE: 5},
    )
    return ExperimentPreset(
        name="switch-shifted", model=model, hardware=EIGHT_GPU_NODE, cost=cost,
        workload=workload, systems={"epd": system}, rate_grid=(3.0,), slo=slo,
        seed=seed, images_per_request=1,
        notes="10 short-output then 90 long-output requests at a fixed rate",
        shifted_split=((10, 50), (90, 500)))


def optimizer_preset(seed: int = 20260808) -> ExperimentPreset:
    """Six-image workload used for configuration search experiments."""
    model = builtin_model(MINICPM)
    cost = SYNTHETIC_COSTS[MINICPM]
    slo = slo_for(MINICPM, 6)
    workload = WorkloadSpec(
        rate_lambda=1.0, num_requests=100, prompt_tokens=22,
        images_per_request=6, resolution=RES_4K, output_tokens=10,
        seed=seed, slo=slo)
    return ExperimentPreset(
        name="optimizer-restricted", model=model, hardware=EIGHT_GPU_NODE, cost=cost,
        workload=workload, systems={}, rate_grid=(0.2, 0.4, 0.6, 0.8, 1.0, 1.2, 1.4, 1.6),
        slo=slo, seed=seed, images_per_request=6,
        notes="restricted search space; all eight GPUs used by every candidate")


def candidate_builder(preset: ExperimentPreset) -> Callable[[Candidate], SystemConfig]:
    def build(candidate: Candidate) -> SystemConfig:
        return SystemConfig(
            instances=candidate.instance_configs(),
            hardware=preset.hardware, model=preset.model, cost=preset.cost)
    return build


def optimizer_space(gpu_budget: int = 8) -> ConfigSpace:
    """Named preset space: shared per-stage batches, TP/PP fixed to 1."""
    return restricted_space(gpu_budget)


def offline_preset(seed: int = 20260808, num_requests: int = 200) -> ExperimentPreset:
    """Batch-submitted workload for end-to-end throughput comparisons."""
    model = builtin_model(MINICPM)
    cost = SYNTHETIC_COSTS[MINICPM]
    slo = Slo(60.0, 1.0)  # throughput runs are not SLO-gated
    workload = WorkloadSpec(
        rate_lambda=1.0, num_requests=num_requests, prompt_tokens=7,
        images_per_request=1, resolution=RES_LOW, output_tokens=10,
        seed=seed, slo=slo)
    systems = {
        "epd-5e2p1d": build_epd(model, cost, e_instances=5, e_width=1, e_batch=8,
                                p_instances=2, p_batch=8, d_instances=1, d_batch=128),
        "distserve-7ep1d": build_distserve(model, cost, ep_instances=7, ep_batch=1,
                                           d_instances=1, d_batch=128),
    }
    return ExperimentPreset(
        name="offline-throughput", model=model, hardware=EIGHT_GPU_NODE, cost=cost,
        workload=workload, systems=systems, rate_grid=(1.0,), slo=slo, seed=seed,
        images_per_request=1,
        notes="all requests submitted at time zero; report requests per second")


def offline_requests(preset: ExperimentPreset) -> list[Request]:
    """All arrivals at time zero, ids ascending."""
    spec = preset.workload
    images = tuple(spec.resolution for _ in range(spec.images_per_request))
    return [
        Request(id=i, arrival_time=0.0, prompt_tokens=spec.prompt_tokens,
                images=images, output_tokens=spec.output_tokens, slo=spec.slo)
        for i in range(spec.num_requests)
    ]


def irp_ablation_preset(seed: int = 20260808) -> ExperimentPreset:
    """Fixed-rate workload family for the patch-sharding on/off comparison."""
    base = ttft_distribution_preset(MINICPM, 2, seed)
    return replace(base, name="irp-ablation",
                   notes="sweeps images/request with patch sharding on and off")


def _named_presets() -> dict[str, Callable[[], ExperimentPreset]]:
    presets: dict[str, Callable[[], ExperimentPreset]] = {
        "encode-heavy": encode_heavy_preset,
        "switch-shifted": switch_preset,
        "optimizer-restricted": optimizer_preset,
        "offline-throughput": offline_preset,
        "irp-ablation": irp_ablation_preset,
    }
    for alias, name in _MODEL_ALIASES.items():
        for images in (2, 4, 6, 8):
            presets[f"slo-{alias}-{images}img"] = (
                lambda n=name, i=images: _slo_attainment_preset(n, i))
            presets[f"ttft-{alias}-{images}img"] = (
                lambda n=name, i=images: ttft_distribution_preset(n, i))
    return presets


def preset_names() -> list[str]:
    return sorted(_named_presets())


def get_preset(name: str) -> ExperimentPreset:
    try:
        factory = _named_presets()[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; available: {preset_names()}") from None
    return factory()
