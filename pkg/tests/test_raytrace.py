import numpy as np
import pytest

from conftest import SPHERE_TRANS, build_scene, white_light
from core_engine.autodiff.gradcheck import check_gradients
from core_engine.autodiff.tape import value_of
from core_engine.config import RenderConfig
from core_engine.errors import RenderError
from core_engine.raster.vertex_renderer import render_vertex_image
from core_engine.raytrace.bvh import LEAF_SIZE, brute_force, build_bvh, shadow_query
from core_engine.raytrace.sampling import cosine_hemisphere, orthonormal_frame, uniforms
from core_engine.raytrace.tracer import ray_photo_loss, trace
from core_engine.shading import shade_points
from evaluation.fixtures import smooth_light
from models.scene import assemble_scene

BLOCKER_TRANS = (0.0, 0.0, -300.0)
FACE_TRANS = (0.0, 0.0, -480.0)


def random_rays(rng, count, distance=200.0, spread=60.0):
    origins = rng.normal(size=(count, 3))
    origins *= distance / np.linalg.norm(origins, axis=1, keepdims=True)
    targets = rng.uniform(-spread, spread, size=(count, 3))
    directions = targets - origins
    return origins, directions / np.linalg.norm(directions, axis=1, keepdims=True)


@pytest.fixture(scope="module")
def sphere_bvh(sphere_bundle):
    vertices = sphere_bundle.mean_shape.reshape(-1, 3)
    return vertices, sphere_bundle.triangles, build_bvh(vertices, sphere_bundle.triangles)


def test_bvh_holds_every_triangle_once(sphere_bvh):
    _, triangles, bvh = sphere_bvh
    leaves = bvh.leaves()
    assert np.all(bvh.count[leaves] <= LEAF_SIZE)
    members = np.concatenate([bvh.order[bvh.first[k]:bvh.first[k] + bvh.count[k]] for k in leaves])
    np.testing.assert_array_equal(np.sort(members), np.arange(len(triangles)))


def test_bvh_matches_brute_force(sphere_bvh, rng):
    vertices, triangles, bvh = sphere_bvh
    origins, directions = random_rays(rng, 100_000)
    expected, any_hit = brute_force(vertices, triangles, origins, directions)
    hits = bvh.closest_hit(origins, directions)
    assert expected.mask.sum() > 10_000
    np.testing.assert_array_equal(hits.tri_id, expected.tri_id)
    np.testing.assert_array_equal(hits.t, expected.t)
    np.testing.assert_array_equal(bvh.occluded(origins, directions), any_hit)
    np.testing.assert_array_equal(bvh.closest_hit(origins, directions, deterministic=False).tri_id, hits.tri_id)


def test_ray_interval_is_open(sphere_bvh):
    _, _, bvh = sphere_bvh
    origin = np.array([1.3, 0.7, -200.0])
    forward = np.array([0.0, 0.0, 1.0])
    hit = bvh.closest_hit(origin[None], forward[None])
    assert hit.t[0] == pytest.approx(150.0, rel=1e-2)
    assert not shadow_query(bvh, origin, forward)
    assert shadow_query(bvh, origin, -forward)
    assert shadow_query(bvh, origin, forward, t_max=100.0)


def test_counter_based_uniforms_ignore_batching():
    full = uniforms(7, np.array([5, 9]), np.arange(3), 4)
    alone = uniforms(7, np.array([9]), np.array([2]), 4)
    np.testing.assert_array_equal(full[1, 2], alone[0, 0])
    assert np.all((full >= 0.0) & (full < 1.0))
    assert not np.array_equal(full, uniforms(8, np.array([5, 9]), np.arange(3), 4))


def test_cosine_hemisphere_moments():
    u = uniforms(0, np.arange(20000), np.arange(1), 2)[:, 0]
    local = cosine_hemisphere(u[:, 0], u[:, 1])
    np.testing.assert_allclose(np.linalg.norm(local, axis=-1), 1.0)
    assert np.all(local[:, 2] >= 0.0)
    assert local[:, 2].mean() == pytest.approx(2.0 / 3.0, abs=0.01)


def test_orthonormal_frame(rng):
    n = rng.normal(size=(8, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    t, b = (x.value for x in orthonormal_frame(n))
    frame = np.stack([t, b, n], axis=-1)
    np.testing.assert_allclose(np.einsum("pij,pik->pjk", frame, frame), np.broadcast_to(np.eye(3), (8, 3, 3)),
                               atol=1e-12)
    np.testing.assert_allclose(np.linalg.det(frame), 1.0)


def test_white_furnace(sphere_bundle, small_camera, unshadowed):
    _, _, terms = build_scene(sphere_bundle, small_camera, SPHERE_TRANS, sh=white_light())
    output = trace(terms, unshadowed)
    assert output.mask[12, 12]
    np.testing.assert_allclose(output.image[output.mask], 1.0, atol=1e-12)
    np.testing.assert_allclose(output.standard_error, 0.0, atol=1e-7)
    np.testing.assert_array_equal(output.image[~output.mask], 0.0)


def test_traced_and_vertex_images_agree(sphere_bundle, small_camera):
    _, _, terms = build_scene(sphere_bundle, small_camera, SPHERE_TRANS)
    traced = trace(terms, RenderConfig(spp=64, seed=5, shadows=False))
    vertex_image, vertex_mask = render_vertex_image(terms)
    both = traced.mask & vertex_mask
    assert both.sum() > 0.9 * traced.mask.sum()
    difference = traced.image[both] - vertex_image[both]
    assert np.abs(difference).mean() < 0.05
    assert abs(difference.mean()) < 0.02


def test_render_is_reproducible(sphere_bundle, small_camera):
    _, _, terms = build_scene(sphere_bundle, small_camera, SPHERE_TRANS)
    config = RenderConfig(spp=4, seed=11)
    first = trace(terms, config).image
    np.testing.assert_array_equal(first, trace(terms, config).image)
    assert not np.array_equal(first, trace(terms, config, seed=12).image)


def test_shadows_only_darken(sphere_bundle, small_camera):
    _, _, terms = build_scene(sphere_bundle, small_camera, SPHERE_TRANS)
    lit = trace(terms, RenderConfig(spp=8, seed=2, shadows=False)).image
    shadowed = trace(terms, RenderConfig(spp=8, seed=2, shadows=True)).image
    assert np.all(shadowed <= lit + 1e-12)


def test_wall_shadows_the_plane(blocker_bundle, small_camera):
    _, _, terms = build_scene(blocker_bundle, small_camera, BLOCKER_TRANS, sh=white_light())
    lit = trace(terms, RenderConfig(spp=16, seed=0, shadows=False))
    shadowed = trace(terms, RenderConfig(spp=16, seed=0, shadows=True))
    np.testing.assert_allclose(lit.image[lit.mask], 0.8)
    assert shadowed.image[shadowed.mask].mean() < 0.79
    assert np.all(shadowed.image <= lit.image + 1e-12)


def test_ray_photo_loss(sphere_bundle, small_camera, unshadowed):
    _, _, terms = build_scene(sphere_bundle, small_camera, SPHERE_TRANS)
    output = trace(terms, unshadowed)
    assert float(ray_photo_loss(output, output.image).value) == pytest.approx(0.0, abs=1e-9)
    mean = ray_photo_loss(output, output.image + 0.25, reduction="mean")
    assert float(mean.value) == pytest.approx(0.75)
    with pytest.raises(RenderError):
        ray_photo_loss(output, np.zeros((5, 5, 3)))


def test_trace_rejects_zero_spp(sphere_bundle, small_camera):
    _, _, terms = build_scene(sphere_bundle, small_camera, SPHERE_TRANS)
    with pytest.raises(RenderError):
        trace(terms, spp=0)


def test_ray_loss_gradients(sphere_bundle, small_camera, unshadowed, rng):
    context, params, terms = build_scene(sphere_bundle, small_camera, SPHERE_TRANS)
    target = trace(terms, RenderConfig(spp=16, seed=9, shadows=False)).image * 0.8 + 0.05

    def loss(v, tape):
        scene = assemble_scene(context, {**params.blocks(), **v}, "coarse", tape=tape)
        return ray_photo_loss(trace(scene, unshadowed, seed=tape.seed, tape=tape), target)

    report = check_gradients(loss, {"sh": params.sh, "trans": params.trans + rng.normal(size=3) * 0.5},
                             n_coords=16, seed=3)
    assert report.passed


def analytic_pixels(terms, output):
    """Closed-form SH shading at the traced hit points, one row per covered pixel."""
    surface = terms.surface(output.tri_ids, output.bary)
    view = value_of(terms.trans) - output.points
    view /= np.linalg.norm(view, axis=1, keepdims=True)
    return shade_points(value_of(terms.sh), terms.context.kernels, value_of(surface.normal),
                        value_of(surface.diffuse), value_of(surface.specular), view)


@pytest.mark.slow
def test_unshadowed_trace_converges_to_analytic_shading(sphere_bundle, small_camera):
    _, _, terms = build_scene(sphere_bundle, small_camera, SPHERE_TRANS, sh=smooth_light(strength=0.2))
    output = trace(terms, RenderConfig(spp=4096, seed=1, shadows=False))
    traced = output.image.reshape(-1, 3)[output.pixel_index]
    difference = np.abs(traced - analytic_pixels(terms, output))
    assert difference.max() < 1e-2
    assert np.median(difference) < 3e-3


def test_occluded_pixels_are_darker_than_analytic_shading(blocker_bundle, small_camera):
    _, _, terms = build_scene(blocker_bundle, small_camera, BLOCKER_TRANS, sh=white_light())
    lit = trace(terms, RenderConfig(spp=16, seed=0, shadows=False))
    shadowed = trace(terms, RenderConfig(spp=16, seed=0, shadows=True))
    analytic = analytic_pixels(terms, shadowed)
    traced = shadowed.image.reshape(-1, 3)[shadowed.pixel_index]
    occluded = np.any(traced < lit.image.reshape(-1, 3)[lit.pixel_index] - 1e-9, axis=1)
    assert occluded.sum() > 0
    assert np.all(traced[occluded] < analytic[occluded])
    assert np.all(traced <= analytic + 1e-9)


def test_flat_fine_stage_reproduces_the_medium_render(face_bundle, face_camera, unshadowed, rng):
    res = face_bundle.texture_resolution
    increment = rng.uniform(-0.05, 0.05, size=(res, res, 3))
    _, _, medium = build_scene(face_bundle, face_camera, FACE_TRANS, stage="medium", medium_diffuse_inc=increment)
    _, _, fine = build_scene(face_bundle, face_camera, FACE_TRANS, stage="fine", medium_diffuse_inc=increment)
    np.testing.assert_array_equal(trace(fine, unshadowed).image, trace(medium, unshadowed).image)
