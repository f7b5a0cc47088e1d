import math

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
def sphere():
    from matforge.geometry import make_uv_sphere

    return make_uv_sphere()


@pytest.fixture(scope="session")
def front_camera():
    """Camera at +z looking down -z at the origin."""
    from matforge.geometry import Camera

    return Camera((0.0, 0.0, 3.0), resolution=(32, 32), vertical_fov=math.radians(40.0))
