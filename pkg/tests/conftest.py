import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_pairs():
    from dbenet.synth import make_dataset

    return make_dataset("match", 4, 11, points_per_fragment=512)


@pytest.fixture(scope="session")
def desk_model():
    from dbenet.fusion import desk_scale, init_dbenet

    return init_dbenet(desk_scale(), seed=0)
