import numpy as np
import pytest

from core_engine.autodiff.gradcheck import check_gradients
from core_engine.config import COARSE_BLOCKS, FINE_BLOCKS, CameraConfig, LossWeights, RenderConfig
from core_engine.errors import LossError
from evaluation.fixtures import project_landmarks, smooth_light
from losses.objectives import split_blocks, stage_loss, stage_objective
from losses.regularizers import (
    consistency_loss,
    laplacian_residual,
    prior_loss,
    smoothness_loss,
    softbox_loss,
    symmetry_loss,
)
from models.morphable import Adjacency, with_arrays
from models.scene import SceneContext, SceneParams
from models.uvmap import bake_vertex_attribute, build_atlas, grid_adjacency

FACE_TRANS = (0.0, 0.0, -480.0)
PATH = Adjacency(indices=np.array([1, 0, 2, 1]), offsets=np.array([0, 1, 3, 4]))


def test_prior_divides_by_variances(face_bundle):
    alpha = np.array([1.0, 2.0, 0.0, 0.0])
    beta = np.array([0.0, 0.0, 3.0, 0.0])
    assert float(prior_loss(alpha, beta, face_bundle).value) == pytest.approx(1.0 + 4.0 + 9.0)


def test_softbox_penalises_only_outside_the_box():
    assert float(softbox_loss(np.array([-0.5, 0.5, 1.5, 1.0, 0.0])).value) == pytest.approx(0.5)
    uv_map = np.array([[[2.0], [0.5]], [[-1.0], [0.5]]])
    valid = np.array([[True, True], [False, False]])
    assert float(softbox_loss(uv_map, valid).value) == pytest.approx(0.5)


def test_symmetry_of_mirrored_maps(rng, face_bundle):
    res = face_bundle.texture_resolution
    half = rng.uniform(size=(res, res // 2, 3))
    symmetric = np.concatenate([half, half[:, ::-1]], axis=1)
    assert float(symmetry_loss(symmetric, face_bundle).value) == 0.0
    split = np.zeros((res, res, 3))
    split[:, :res // 2] = 1.0
    assert float(symmetry_loss(split, face_bundle).value) == pytest.approx(1.0)


def test_symmetry_matches_a_texel_loop(rng, face_bundle):
    atlas = build_atlas(face_bundle)
    res = atlas.resolution
    uv_map = rng.uniform(size=(res, res, 2))
    total, count = 0.0, 0
    for i in range(res):
        for j in range(res):
            target = atlas.mirror[i, j]
            if target < 0:
                continue
            for c in range(2):
                total += abs(uv_map[i, j, c] - uv_map[target // res, target % res, c])
                count += 1
    assert float(symmetry_loss(uv_map, face_bundle, atlas).value) == pytest.approx(total / count, abs=1e-9)


def test_symmetry_follows_the_mirror_map_on_a_warped_chart(face_bundle):
    uv = face_bundle.uv.copy()
    uv[:, 0] = uv[:, 0] ** 1.5
    warped = with_arrays(face_bundle, uv=uv)
    atlas = build_atlas(warped, 64)
    vertices = warped.mean_shape.reshape(-1, 3)
    field = (vertices[:, 0] / np.abs(vertices[:, 0]).max()) ** 2 + 0.2 * vertices[:, 1] / np.abs(vertices[:, 1]).max()
    field = 0.5 * (field + field[warped.mirror])
    baked = bake_vertex_attribute(atlas, warped.triangles, np.repeat(field[:, None], 3, axis=1)).value

    both_sides = atlas.coverage & atlas.coverage[:, ::-1]
    assert np.abs(baked - baked[:, ::-1])[both_sides].mean() > 0.1
    assert float(symmetry_loss(baked, warped, atlas).value) < 0.03


def test_consistency_sums_channels_and_averages_texels(rng):
    base = rng.uniform(size=(3, 3, 3))
    assert float(consistency_loss(base + 0.1, base).value) == pytest.approx(0.3)
    valid = np.zeros((3, 3), dtype=bool)
    assert float(consistency_loss(base + 0.1, base, valid).value) == 0.0
    with pytest.raises(LossError):
        consistency_loss(np.zeros((4, 4, 3)), np.zeros((3, 3, 3)))


def test_map_losses_check_their_masks(face_bundle):
    with pytest.raises(LossError):
        symmetry_loss(np.zeros((4, 4, 3)), face_bundle, build_atlas(face_bundle, 5))
    with pytest.raises(LossError):
        symmetry_loss(np.zeros((4, 3, 3)), face_bundle)


def test_laplacian_on_a_path():
    residual = laplacian_residual(np.array([[0.0], [1.0], [5.0]]), PATH).value
    np.testing.assert_allclose(residual[:, 0], [-1.0, -1.5, 4.0])
    assert float(smoothness_loss(np.array([[0.0], [1.0], [5.0]]), PATH).value) == pytest.approx(19.25 / 3.0)


def test_isolated_elements_are_skipped():
    adjacency = Adjacency(indices=np.array([1, 0]), offsets=np.array([0, 1, 2, 2]))
    assert laplacian_residual(np.array([[1.0], [3.0], [100.0]]), adjacency).shape == (2, 1)
    with pytest.raises(LossError):
        smoothness_loss(np.zeros((5, 1)), adjacency)


def test_regulariser_gradients(rng, face_bundle):
    res = 6
    valid = np.ones((res, res), dtype=bool)
    valid[0] = False
    adjacency = grid_adjacency(res, valid)
    atlas = build_atlas(face_bundle, res)
    base = rng.uniform(size=(res, res, 3))

    def loss(v, tape):
        m = v["map"]
        return (symmetry_loss(m, face_bundle, atlas) + consistency_loss(m, base, valid) + smoothness_loss(m, adjacency)
                + softbox_loss(m, valid) + prior_loss(v["alpha"], v["beta"], face_bundle))

    params = {"map": rng.uniform(-0.2, 1.2, size=(res, res, 3)), "alpha": rng.normal(size=4),
              "beta": rng.normal(size=4)}
    assert check_gradients(loss, params, n_coords=40).passed


def test_split_blocks_rejects_unknown_names():
    train, frozen = split_blocks({"a": np.ones(2), "b": np.zeros(1)}, ["a"])
    assert list(train) == ["a"] and list(frozen) == ["b"]
    with pytest.raises(LossError):
        split_blocks({"a": np.ones(2)}, ["c"])


@pytest.fixture(scope="module")
def face_scene(face_bundle):
    camera = CameraConfig(focal=70.0, cx=16.0, cy=16.0, width=32, height=32)
    params = SceneParams.initial(face_bundle, trans=FACE_TRANS, sh=smooth_light())
    context = SceneContext.build(face_bundle, camera, 0.5)
    image = np.full((32, 32, 3), 0.4)
    landmarks = project_landmarks(face_bundle, params, camera) + 0.5
    return context, params, image, landmarks


@pytest.mark.parametrize("stage, expected", [
    ("coarse", {"photo_ray", "photo_vertex", "landmarks", "prior", "softbox"}),
    ("medium", {"photo_ray", "photo_vertex", "landmarks", "symmetry", "consistency_diffuse",
                "consistency_specular", "smoothness", "softbox"}),
    ("fine", {"photo_ray", "photo_vertex", "landmarks", "symmetry", "consistency_diffuse", "smoothness",
              "softbox"}),
])
def test_stage_terms(face_scene, stage, expected):
    context, params, image, landmarks = face_scene
    loss = stage_loss(stage, context, params.blocks(), image, landmarks, LossWeights(), RenderConfig(spp=2))
    values = loss.values()
    assert set(values) == expected | {"total"}
    assert values["total"] == pytest.approx(sum(v for k, v in values.items() if k != "total"))
    assert values["landmarks"] == pytest.approx(0.1 * 0.5)
    assert loss.render is not None and loss.visible is not None


def test_landmarks_are_required_when_weighted(face_scene):
    context, params, image, _ = face_scene
    with pytest.raises(LossError):
        stage_loss("coarse", context, params.blocks(), image, None, LossWeights(), RenderConfig(spp=1))
    unweighted = LossWeights(w_lm=0.0)
    loss = stage_loss("coarse", context, params.blocks(), image, None, unweighted, RenderConfig(spp=1))
    assert "landmarks" not in loss.terms


def test_medium_objective_gradients(face_scene, rng):
    context, params, image, landmarks = face_scene
    train, frozen = split_blocks(params.blocks(), ["medium_diffuse_inc"])
    # break the mirror symmetry so no symmetry difference sits on its kink
    train["medium_diffuse_inc"] = rng.uniform(-0.05, 0.05, size=train["medium_diffuse_inc"].shape)
    objective = stage_objective("medium", context, frozen, image, landmarks,
                                LossWeights(photometric_reduction="mean"), RenderConfig(spp=2, shadows=False),
                                seed=4)
    report = check_gradients(objective, train, n_coords=12, seed=4)
    assert report.passed


def test_smoothness_of_a_linear_grid_uses_in_grid_neighbours():
    res = 5
    rows, cols = np.meshgrid(np.arange(res, dtype=float), np.arange(res, dtype=float), indexing="ij")
    field = (2.0 * rows + 3.0 * cols)[..., None]
    adjacency = grid_adjacency(res)
    residual = laplacian_residual(field.reshape(-1, 1), adjacency).value.reshape(res, res)
    np.testing.assert_allclose(residual[1:-1, 1:-1], 0.0, atol=1e-12)
    # corner (0, 0) sees (0, 1) and (1, 0); edge (0, 2) sees (0, 1), (0, 3) and (1, 2)
    assert residual[0, 0] == pytest.approx(0.0 - (3.0 + 2.0) / 2.0)
    assert residual[0, 2] == pytest.approx(6.0 - (3.0 + 9.0 + 8.0) / 3.0)
    assert float(smoothness_loss(field, adjacency).value) == pytest.approx(np.mean(residual ** 2))


def test_coarse_objective_gradients(face_scene):
    context, params, image, landmarks = face_scene
    train, frozen = split_blocks(params.blocks(), COARSE_BLOCKS)
    objective = stage_objective("coarse", context, frozen, image, landmarks,
                                LossWeights(photometric_reduction="mean"), RenderConfig(spp=2, shadows=False),
                                seed=5)
    report = check_gradients(objective, train, n_coords=64, seed=5)
    assert report.passed


def test_fine_objective_gradients(face_scene, rng):
    context, params, image, landmarks = face_scene
    train, frozen = split_blocks(params.blocks(), FINE_BLOCKS)
    res = params.fine_normal_inc.shape[0]
    tilted = np.concatenate([rng.uniform(-0.1, 0.1, size=(res, res, 2)), np.ones((res, res, 1))], axis=-1)
    train["fine_normal_inc"] = tilted / np.linalg.norm(tilted, axis=-1, keepdims=True)
    train["fine_diffuse_inc"] = rng.uniform(-0.05, 0.05, size=(res, res, 3))
    objective = stage_objective("fine", context, frozen, image, landmarks,
                                LossWeights(photometric_reduction="mean"), RenderConfig(spp=2, shadows=False),
                                seed=6)
    report = check_gradients(objective, train, n_coords=64, seed=6)
    assert report.passed
