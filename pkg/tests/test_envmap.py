import math

import numpy as np
import pytest

from core_engine.autodiff import tape as ad
from core_engine.autodiff.gradcheck import check_gradients
from core_engine.lighting.envmap import (
    ENV_SIZE,
    bake_envmap,
    direction_to_texel,
    envmap_texels,
    lookup,
    texel_directions,
    texel_solid_angles,
)
from core_engine.lighting.spherical_harmonics import SHLight, sh_basis_array
from evaluation.fixtures import smooth_light


def test_solid_angles_cover_the_sphere():
    assert texel_solid_angles().sum() == pytest.approx(4.0 * math.pi)
    np.testing.assert_allclose(np.linalg.norm(texel_directions(), axis=-1), 1.0)


def test_constant_light_gives_a_flat_map():
    env = bake_envmap(SHLight.constant(0.7))
    assert env.radiance.shape == (ENV_SIZE, ENV_SIZE, 3)
    np.testing.assert_allclose(env.radiance, 0.7)
    np.testing.assert_allclose(env.energy(), 4.0 * math.pi * 0.7)


def test_clamping_removes_negative_radiance():
    coeffs = np.zeros((3, 81))
    coeffs[:, 2] = 1.0
    assert bake_envmap(SHLight(coeffs), clamp=False).radiance.min() < 0
    assert bake_envmap(SHLight(coeffs)).radiance.min() == 0.0


def test_projection_recovers_smooth_light():
    light = smooth_light()
    env = bake_envmap(SHLight(light), clamp=False)
    basis = sh_basis_array(texel_directions()).reshape(-1, light.shape[1])
    weights = texel_solid_angles().reshape(-1, 1)
    projected = (basis * weights).T.dot(env.radiance.reshape(-1, 3)).T
    np.testing.assert_allclose(projected[:, :9], light[:, :9], atol=1e-2)


def test_forward_direction_maps_to_the_centre():
    x, y = direction_to_texel(np.array([0.0, 0.0, -1.0]))
    assert float(x.value) == pytest.approx(ENV_SIZE / 2 - 0.5)
    assert float(y.value) == pytest.approx(ENV_SIZE / 2 - 0.5)


def test_lookup_at_texel_centres(rng):
    env = bake_envmap(SHLight(smooth_light()))
    rows, cols = rng.integers(1, ENV_SIZE - 1, size=(2, 6))
    dirs = texel_directions()[rows, cols]
    np.testing.assert_allclose(lookup(env.radiance, dirs).value, env.radiance[rows, cols], atol=1e-9)


def test_lookup_wraps_in_azimuth():
    env = bake_envmap(SHLight(smooth_light()))
    back = lookup(env.radiance, np.array([[0.0, 0.0, 1.0]])).value[0]
    edge = 0.5 * (env.radiance[ENV_SIZE // 2 - 1, [0, -1]] + env.radiance[ENV_SIZE // 2, [0, -1]]).mean(axis=0)
    np.testing.assert_allclose(back, edge, atol=1e-9)


def test_differentiable_texels_match_baking():
    light = smooth_light()
    texels = envmap_texels(light).value.reshape(ENV_SIZE, ENV_SIZE, 3)
    np.testing.assert_allclose(texels, bake_envmap(SHLight(light)).radiance)


def test_lookup_gradients(rng):
    dirs = rng.normal(size=(4, 3)) + np.array([0.0, 0.0, -2.0])
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)

    def loss(v, tape):
        return ad.sum_(lookup(envmap_texels(v["sh"], size=16), dirs, size=16, tape=tape))

    report = check_gradients(loss, {"sh": smooth_light()}, n_coords=12)
    assert report.passed
