import os

# Keep BLAS single-threaded before numpy loads: deterministic and faster
# at this model's matrix sizes.
for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

import numpy as np
import pytest

from flowseg import netcore


@pytest.fixture(scope="session")
def tiny_params():
    return netcore.init_params(netcore.NetConfig.tiny(), seed=0)


@pytest.fixture(scope="session")
def small_params():
    """16x16-capable config, a bit wider than tiny; fast but realistic."""
    cfg = netcore.NetConfig(embed_dim=16, patch=4, heads=2, mlp_hidden=32,
                            pixel_hidden=8, calib_hidden=8)
    return netcore.init_params(cfg, seed=1)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
