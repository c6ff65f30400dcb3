import json

import numpy as np
import pytest

from core_engine.autodiff import tape as ad
from core_engine.autodiff.gradcheck import check_gradients
from core_engine.errors import (
    BundleDimensionError,
    MirrorMapError,
    MissingBundleFileError,
    TriangleIndexError,
    UVRangeError,
)
from models.morphable import (
    N_LANDMARKS,
    eval_albedos,
    eval_geometry,
    load_bundle,
    mesh_adjacency,
    save_bundle,
    scene_scale,
    with_arrays,
)


def test_synthetic_face_bundle_is_valid(face_bundle):
    face_bundle.validate()
    assert face_bundle.n_vertices == 17 * 21
    assert (face_bundle.k_shape, face_bundle.k_expr, face_bundle.k_refl) == (4, 3, 4)
    assert len(face_bundle.landmark_vertex_ids) == N_LANDMARKS


def test_bundle_directory_round_trip(face_bundle, tmp_path):
    save_bundle(face_bundle, tmp_path / "bundle")
    loaded = load_bundle(tmp_path / "bundle")
    np.testing.assert_array_equal(loaded.shape_basis, face_bundle.shape_basis)
    np.testing.assert_array_equal(loaded.triangles, face_bundle.triangles)
    np.testing.assert_array_equal(loaded.mirror, face_bundle.mirror)
    assert loaded.texture_resolution == face_bundle.texture_resolution


def test_missing_array_file(face_bundle, tmp_path):
    path = save_bundle(face_bundle, tmp_path / "bundle")
    (path / "uv.f32").unlink()
    with pytest.raises(MissingBundleFileError):
        load_bundle(path)
    with pytest.raises(MissingBundleFileError):
        load_bundle(tmp_path / "nowhere")


def test_manifest_column_mismatch(face_bundle, tmp_path):
    path = save_bundle(face_bundle, tmp_path / "bundle")
    manifest = json.loads((path / "manifest.json").read_text())
    manifest["k_shape"] = 5
    (path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(BundleDimensionError, match="k_shape"):
        load_bundle(path)


def test_validation_errors_are_specific(face_bundle):
    mirror = face_bundle.mirror.copy()
    mirror[0] = 1 if mirror[0] != 1 else 2
    with pytest.raises(MirrorMapError):
        with_arrays(face_bundle, mirror=mirror)

    uv = face_bundle.uv.copy()
    uv[3, 0] = 1.2
    with pytest.raises(UVRangeError):
        with_arrays(face_bundle, uv=uv)

    triangles = face_bundle.triangles.copy()
    triangles[0, 0] = face_bundle.n_vertices
    with pytest.raises(TriangleIndexError):
        with_arrays(face_bundle, triangles=triangles)

    with pytest.raises(BundleDimensionError):
        with_arrays(face_bundle, landmark_vertex_ids=face_bundle.landmark_vertex_ids[:10])


def test_zero_coefficients_give_the_mean(face_bundle):
    mesh = eval_geometry(face_bundle, np.zeros(4), np.zeros(3))
    np.testing.assert_allclose(mesh.vertices, face_bundle.mean_shape.reshape(-1, 3))
    np.testing.assert_allclose(mesh.neutral, mesh.vertices)


def test_expression_leaves_the_neutral_shape(face_bundle, rng):
    alpha = rng.normal(size=4)
    neutral = eval_geometry(face_bundle, alpha, np.zeros(3)).vertices
    mesh = eval_geometry(face_bundle, alpha, rng.normal(size=3))
    np.testing.assert_allclose(mesh.neutral, neutral)
    assert not np.allclose(mesh.vertices, neutral)


def test_frames_are_orthonormal(face_bundle):
    frames = eval_geometry(face_bundle, np.zeros(4), np.zeros(3)).frames
    gram = np.einsum("nij,nik->njk", frames, frames)
    np.testing.assert_allclose(gram, np.broadcast_to(np.eye(3), gram.shape), atol=1e-9)


def test_wrong_coefficient_length(face_bundle):
    with pytest.raises(BundleDimensionError):
        eval_geometry(face_bundle, np.zeros(5), np.zeros(3))
    with pytest.raises(BundleDimensionError):
        eval_albedos(face_bundle, np.zeros(2))


def test_albedos_are_affine_in_beta(face_bundle, rng):
    beta = rng.normal(size=4)
    c0, s0 = eval_albedos(face_bundle, np.zeros(4))
    c1, s1 = eval_albedos(face_bundle, beta)
    c2, s2 = eval_albedos(face_bundle, 2 * beta)
    np.testing.assert_allclose(c2 - c0, 2 * (c1 - c0))
    np.testing.assert_allclose(s2 - s0, 2 * (s1 - s0))


def test_geometry_gradients(face_bundle, rng):
    weights = rng.normal(size=(face_bundle.n_vertices, 3))

    def loss(v, tape):
        mesh = eval_geometry(face_bundle, v["alpha"], v["delta"])
        return ad.sum_(mesh.vertices * weights) * 1e-3 + ad.sum_(mesh.normals * weights) + ad.sum_(mesh.tangents)

    report = check_gradients(loss, {"alpha": rng.normal(size=4) * 0.5, "delta": rng.normal(size=3) * 0.5})
    assert report.passed


def test_adjacency_of_a_quad():
    adjacency = mesh_adjacency(np.array([[0, 1, 2], [0, 2, 3]]), 4)
    np.testing.assert_array_equal(adjacency.degrees, [3, 2, 3, 2])
    np.testing.assert_array_equal(adjacency.indices[adjacency.offsets[1]:adjacency.offsets[2]], [0, 2])


def test_scene_scale_is_the_box_diagonal():
    assert scene_scale(np.array([[0.0, 0.0, 0.0], [3.0, 4.0, 0.0], [1.0, 1.0, 0.0]])) == 5.0
