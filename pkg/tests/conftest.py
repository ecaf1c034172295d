import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from densemap.geometry import PinholeCamera, RigidTransform, look_at
from densemap.world import AnalyticScene, Plane, Sphere

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def camera():
    return PinholeCamera.from_fov(80, 60, 70)


@pytest.fixture(scope="session")
def wall_scene():
    return AnalyticScene([Plane((0, 0, 0), (0, 0, 1))], bounds=((-2, -2, -0.1), (2, 2, 0.1)))


@pytest.fixture(scope="session")
def sphere_scene():
    return AnalyticScene(
        [Plane((0, 0, 0), (0, 0, 1)), Sphere((0, 0, 0.3), 0.3)],
        bounds=((-1, -1, -0.1), (1, 1, 1)),
    )


def random_transform(rng, scale=1.0) -> RigidTransform:
    return RigidTransform.from_axis_angle(rng.normal(size=3), scale * rng.normal(size=3))


def facing_down(height: float) -> RigidTransform:
    """Camera ``height`` meters above the origin looking straight down -z."""
    return look_at((0, 0, height), (0, 0, 0), up=(0, 1, 0))
