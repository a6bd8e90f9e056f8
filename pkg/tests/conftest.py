import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def scene():
    from semdepth.data import SceneConfig, generate_synthetic_scene

    return generate_synthetic_scene(3, SceneConfig(noise_radius=2))


@pytest.fixture
def rng():
    return np.random.default_rng(0)
