import math

import numpy as np
import pytest
import torch

from xbeam.config import ClusteredChannelParams, ScenarioConfig

torch.set_num_threads(1)


def single_path_params(**kw) -> ClusteredChannelParams:
    """One line-of-sight path with no spread, no Doppler and no delay spread."""
    base = dict(n_clusters=1, paths_per_cluster=1, azimuth_spread=0.0, elevation_spread=0.0,
                delay_spread=0.0, rician_k_db=math.inf, doppler_max_hz=0.0, rx_spread=0.0)
    base.update(kw)
    return ClusteredChannelParams(**base)


@pytest.fixture
def small_cfg() -> ScenarioConfig:
    return ScenarioConfig(nx_phys=4, ny_phys=4, nx_dig=2, ny_dig=2, n_rx=2, K=16, T=2,
                          L_max=4, N_CSI=8, N_CSI_pool=16, B_g=2, S_B=4, L_csi=2,
                          U_min=2, U_max=4, n_x0=4, n_y0=4, user_pool=1000)


@pytest.fixture
def cfg() -> ScenarioConfig:
    return ScenarioConfig()


@pytest.fixture
def ch() -> ClusteredChannelParams:
    return ClusteredChannelParams()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
