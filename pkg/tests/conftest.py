import pytest

from disaggsim.costs import CostParams
from disaggsim.models import HardwareSpec, ModelSpec


@pytest.fixture
def toy_model() -> ModelSpec:
    """Small geometry whose byte costs are easy to compute by hand."""
    return ModelSpec(
        name="toy",
        encoder_params=1_000_000,
        llm_params=4_000_000,
        num_layers=2,
        kv_heads=2,
        head_dim=4,
        hidden_dim=8,
        tokens_per_patch=4,
        max_context_tokens=10_000,
        patch_table={(100, 100): 6, (200, 200): 12},
        bytes_per_param=2,
    )


@pytest.fixture
def toy_hw() -> HardwareSpec:
    return HardwareSpec(
        gpu_memory=1e9,
        intra_node_bandwidth=1e8,
        inter_node_bandwidth=5e7,
        num_gpus=8,
    )


@pytest.fixture
def simple_cost() -> CostParams:
    return CostParams(
        enc_base=0.2, enc_per_patch=0.1,
        prefill_base=0.1, prefill_per_token=0.01, prefill_quad=1e-5,
        decode_base=0.05, decode_per_seq=0.01, decode_per_kv_token=0.0,
        transfer_setup=0.0,
    )
