import numpy as np
import pytest

from conftest import SPHERE_TRANS, build_scene, white_light
from core_engine.autodiff.gradcheck import check_gradients
from core_engine.errors import LossError, RenderError
from core_engine.raster.rasterizer import rasterize, rasterize_uv
from core_engine.raster.vertex_renderer import (
    landmark_loss,
    project_to_uv,
    render_vertex_image,
    vertex_photo_loss,
    vertex_visibility,
)
from evaluation.fixtures import smooth_light
from models.camera import project_points
from models.scene import assemble_scene

TRIANGLE = np.array([[0, 1, 2]])


def test_coverage_follows_pixel_centres():
    xy = np.array([[0.0, 0.0], [4.2, 0.0], [0.0, 4.2]])
    fragments = rasterize(xy, np.ones(3), TRIANGLE, 4, 4)
    rows, cols = np.mgrid[0:4, 0:4]
    np.testing.assert_array_equal(fragments.mask, rows + cols <= 3)
    assert np.all(np.isinf(fragments.depth[~fragments.mask]))
    np.testing.assert_allclose(fragments.bary[fragments.mask].sum(axis=-1), 1.0)


def test_nearest_triangle_wins_in_any_order():
    xy = np.tile(np.array([[0.0, 0.0], [8.0, 0.0], [0.0, 8.0]]), (2, 1))
    triangles = np.array([[0, 1, 2], [3, 4, 5]])
    near_second = rasterize(xy, np.array([5.0, 5.0, 5.0, 2.0, 2.0, 2.0]), triangles, 4, 4)
    near_first = rasterize(xy, np.array([2.0, 2.0, 2.0, 5.0, 5.0, 5.0]), triangles, 4, 4)
    assert set(np.unique(near_second.tri_id[near_second.mask])) == {1}
    assert set(np.unique(near_first.tri_id[near_first.mask])) == {0}


def test_equal_depth_resolves_to_the_lower_index():
    xy = np.tile(np.array([[0.0, 0.0], [8.0, 0.0], [0.0, 8.0]]), (2, 1))
    fragments = rasterize(xy, np.full(6, 3.0), np.array([[3, 4, 5], [0, 1, 2]]), 4, 4)
    assert set(np.unique(fragments.tri_id[fragments.mask])) == {0}


def test_triangles_behind_the_camera_are_skipped():
    xy = np.array([[0.0, 0.0], [8.0, 0.0], [0.0, 8.0]])
    assert not rasterize(xy, np.array([1.0, -1.0, 1.0]), TRIANGLE, 4, 4).mask.any()


def test_depth_is_perspective_correct():
    focal, centre = 20.0, 8.0
    points = np.array([[-3.0, -3.0, 10.0], [4.0, -2.0, 14.0], [-2.0, 5.0, 20.0]])
    xy = points[:, :2] / points[:, 2:] * focal + centre
    fragments = rasterize(xy, points[:, 2], TRIANGLE, 16, 16)
    normal = np.cross(points[1] - points[0], points[2] - points[0])
    rows, cols = np.nonzero(fragments.mask)
    rays = np.stack([(cols + 0.5 - centre) / focal, (rows + 0.5 - centre) / focal, np.ones(len(rows))], axis=1)
    expected = normal @ points[0] / (rays @ normal)
    np.testing.assert_allclose(fragments.depth[rows, cols], expected, rtol=1e-10)
    interpolated = np.einsum("pk,ki->pi", fragments.bary[rows, cols], points)
    np.testing.assert_allclose(interpolated, rays * expected[:, None], atol=1e-9)


def test_uv_rasterization_uses_unit_depth():
    fragments = rasterize_uv(np.array([[0.0, 0.0], [0.95, 0.0], [0.0, 0.95]]), TRIANGLE, 8)
    np.testing.assert_allclose(fragments.depth[fragments.mask], 1.0)
    assert fragments.mask.sum() == 28


@pytest.fixture
def sphere_terms(sphere_bundle, small_camera):
    return build_scene(sphere_bundle, small_camera, SPHERE_TRANS, sh=white_light())


def test_visible_vertices_face_the_camera(sphere_terms):
    _, params, terms = sphere_terms
    visible = vertex_visibility(terms)
    fraction = visible.mean()
    assert 0.3 < fraction < 0.6
    mesh = terms.mesh.arrays()
    towards = params.trans - mesh.vertices[visible]
    assert np.all(np.einsum("ni,ni->n", mesh.normals[visible], towards) > 0)


def test_vertex_image_under_white_light(sphere_terms):
    _, _, terms = sphere_terms
    image, mask = render_vertex_image(terms)
    assert mask[12, 12] and not mask[0, 0]
    np.testing.assert_allclose(image[mask], 1.0)
    np.testing.assert_array_equal(image[~mask], 0.0)


def test_vertex_photo_loss_reductions(sphere_terms, small_camera):
    _, _, terms = sphere_terms
    ones = np.ones((24, 24, 3))
    loss, visible = vertex_photo_loss(terms, ones)
    assert float(loss.value) == pytest.approx(0.0, abs=1e-9)
    loss_sum, _ = vertex_photo_loss(terms, np.zeros((24, 24, 3)))
    loss_mean, _ = vertex_photo_loss(terms, np.zeros((24, 24, 3)), reduction="mean")
    assert float(loss_sum.value) == pytest.approx(3.0 * visible.sum())
    assert float(loss_mean.value) == pytest.approx(3.0)
    with pytest.raises(RenderError):
        vertex_photo_loss(terms, np.ones((10, 10, 3)))


def test_landmark_loss(sphere_terms, sphere_bundle, small_camera):
    _, params, terms = sphere_terms
    points = terms.mesh.vertices[sphere_bundle.landmark_vertex_ids]
    pixels, _ = project_points(points, terms.rotation.value, params.trans, small_camera.focal,
                               small_camera.cx, small_camera.cy)
    assert float(landmark_loss(terms, pixels.value).value) == pytest.approx(0.0, abs=1e-18)
    assert float(landmark_loss(terms, pixels.value + [1.0, 0.0]).value) == pytest.approx(1.0)
    with pytest.raises(LossError):
        landmark_loss(terms, pixels.value[:10])


def test_uv_projection_of_a_flat_image(sphere_terms):
    context, _, terms = sphere_terms
    projected = project_to_uv(np.full((24, 24, 3), 0.5), terms)
    assert projected.valid.any()
    assert not np.any(projected.valid & ~context.atlas.coverage)
    np.testing.assert_allclose(projected.texture[projected.valid], 0.5)
    np.testing.assert_array_equal(projected.texture[~projected.valid], 0.0)


def test_vertex_photo_loss_gradients(sphere_bundle, small_camera):
    context, params, _ = build_scene(sphere_bundle, small_camera, SPHERE_TRANS)
    cols = np.arange(24) + 0.5
    ramp = np.broadcast_to((0.2 + 0.02 * cols)[None, :, None], (24, 24, 3)).copy()

    def loss(v, tape):
        terms = assemble_scene(context, {**params.blocks(), **v}, "coarse", tape=tape)
        return vertex_photo_loss(terms, ramp, tape=tape)[0]

    report = check_gradients(loss, {"sh": smooth_light(), "trans": np.array(SPHERE_TRANS)}, n_coords=24)
    assert report.passed
