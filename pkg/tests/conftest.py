import numpy as np
import pytest

from budgetpose.scene import SceneConfig, generate_scene, sample_hypothesis_pool


@pytest.fixture(scope="session")
def clean_scene():
    return generate_scene(SceneConfig(noise_sigma=0.0, outlier_rate=0.0), seed=3)


@pytest.fixture(scope="session")
def noisy_scene():
    return generate_scene(SceneConfig(), seed=11)


@pytest.fixture(scope="session")
def noisy_pool(noisy_scene):
    return sample_hypothesis_pool(noisy_scene, 12, seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
