import numpy as np
import pytest
import torch

# Keep CPU math reproducible regardless of the host's core count.
torch.set_num_threads(max(1, min(4, torch.get_num_threads())))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
