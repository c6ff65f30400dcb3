import numpy as np
import pytest

from core_engine.config import CameraConfig, RenderConfig
from core_engine.lighting.spherical_harmonics import SHLight
from evaluation.fixtures import smooth_light
from models.scene import SceneContext, SceneParams, assemble_scene
from models.synthetic import make_blocker_bundle, make_face_bundle, make_sphere_bundle

SPHERE_TRANS = (0.0, 0.0, -250.0)


@pytest.fixture(scope="session")
def face_bundle():
    return make_face_bundle(rows=17, cols=21, k_shape=4, k_expr=3, k_refl=4, texture_resolution=16, seed=0)


@pytest.fixture(scope="session")
def sphere_bundle():
    return make_sphere_bundle(rings=12, segments=24, texture_resolution=16)


@pytest.fixture(scope="session")
def blocker_bundle():
    return make_blocker_bundle(rows=13, cols=13, texture_resolution=16)


@pytest.fixture
def small_camera():
    """24 x 24 view in which the radius-50 sphere at distance 250 covers the centre."""
    return CameraConfig(focal=50.0, cx=12.0, cy=12.0, width=24, height=24)


@pytest.fixture
def face_camera():
    return CameraConfig(focal=70.0, cx=16.0, cy=16.0, width=32, height=32)


@pytest.fixture
def unshadowed():
    return RenderConfig(spp=4, seed=3, shadows=False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def white_light():
    return SHLight.constant(1.0).coeffs


def build_scene(bundle, camera, trans, sh=None, stage="coarse", roughness=0.5, **blocks):
    """(context, params, terms) for a bundle seen from `trans` under `sh` (smooth light by default)."""
    params = SceneParams.initial(bundle, trans=trans, sh=smooth_light() if sh is None else sh, roughness=roughness)
    if blocks:
        params = params.with_blocks(**blocks)
    context = SceneContext.build(bundle, camera, roughness)
    return context, params, assemble_scene(context, params.blocks(), stage)
