import pytest

from tilesim import ArchConfig, preset


@pytest.fixture(scope="session")
def mesh32():
    return preset("mesh32x32")


@pytest.fixture(scope="session")
def tiny_cfg():
    # 4x4 mesh with the standard tile but no gemm fill, for fast
    # hand-checkable simulations.
    return ArchConfig(
        mesh_x=4, mesh_y=4,
        noc_link_bytes_per_cycle=128, l1_to_router_cycles=10, router_hop_cycles=4,
        hw_collectives=True, hw_reduce_hop_cycles=0,
        hbm_channels_west=2, hbm_channels_south=2,
        hbm_channel_bytes_per_cycle=64, hbm_access_latency_cycles=200,
        ce_rows=32, ce_cols=16, gemm_fill_cycles=0,
        vector_elems_per_cycle=64, exp_elems_per_cycle=16,
        l1_bytes=384 * 1024, l1_bytes_per_cycle=512, sync_overhead_cycles=50,
    )


@pytest.fixture(scope="session")
def single_tile_cfg():
    return ArchConfig(
        mesh_x=1, mesh_y=1,
        noc_link_bytes_per_cycle=128, l1_to_router_cycles=10, router_hop_cycles=4,
        hw_collectives=False, hw_reduce_hop_cycles=0,
        hbm_channels_west=1, hbm_channels_south=1,
        hbm_channel_bytes_per_cycle=64, hbm_access_latency_cycles=200,
        ce_rows=32, ce_cols=16, gemm_fill_cycles=0,
        vector_elems_per_cycle=64, exp_elems_per_cycle=16,
        l1_bytes=384 * 1024, l1_bytes_per_cycle=512, sync_overhead_cycles=50,
    )
