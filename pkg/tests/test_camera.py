import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from core_engine.autodiff import tape as ad
from core_engine.autodiff.gradcheck import check_gradients
from core_engine.autodiff.tape import backward, record
from core_engine.config import CameraConfig
from core_engine.errors import CameraError
from models.camera import Camera, project, project_points, rotation_matrix, to_camera


@pytest.mark.parametrize("rot", [
    (0.3, -0.2, 0.5),
    (1e-5, 2e-5, -1e-5),
    (0.0, 0.0, 0.0),
    (2.5, 0.1, -1.0),
])
def test_rotation_matches_scipy(rot):
    R = rotation_matrix(np.array(rot)).value
    np.testing.assert_allclose(R, Rotation.from_rotvec(rot).as_matrix(), atol=1e-12)
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0)


def test_rotation_gradient_is_finite_at_identity():
    loss, tape = record(lambda v, t: ad.sum_(rotation_matrix(v["rot"]) * np.arange(9.0).reshape(3, 3)),
                        {"rot": np.zeros(3)})
    grad = backward(loss, tape).grads["rot"]
    assert np.all(np.isfinite(grad))
    # d/d rot of sum(W * [rot]_x) at zero
    np.testing.assert_allclose(grad, [7.0 - 5.0, 2.0 - 6.0, 3.0 - 1.0])


def test_rotation_gradients(rng):
    weights = rng.normal(size=(3, 3))
    report = check_gradients(lambda v, t: ad.sum_(rotation_matrix(v["rot"]) * weights),
                             {"rot": np.array([0.4, -0.3, 0.2])})
    assert report.passed


def test_to_camera_uses_the_transposed_rotation(rng):
    rot = np.array([0.1, 0.7, -0.3])
    trans = np.array([5.0, -2.0, 30.0])
    points = rng.normal(size=(4, 3)) * 10
    R = Rotation.from_rotvec(rot).as_matrix()
    cam = to_camera(points, rotation_matrix(rot), trans).value
    np.testing.assert_allclose(cam, (R.T @ (points - trans).T).T)


def test_projection_of_the_optical_axis():
    config = CameraConfig(focal=100.0, cx=20.0, cy=30.0, width=40, height=60)
    camera = Camera.from_config(config, rot=np.zeros(3), trans=np.array([0.0, 0.0, -50.0]))
    np.testing.assert_allclose(project(camera, np.zeros(3)), [20.0, 30.0])
    np.testing.assert_allclose(project(camera, np.array([5.0, -10.0, 0.0])), [30.0, 10.0])


def test_projection_gradients(rng):
    points = rng.normal(size=(5, 3)) + np.array([0.0, 0.0, 40.0])

    def loss(v, tape):
        pixels, z = project_points(points, rotation_matrix(v["rot"]), v["trans"], 80.0, 16.0, 16.0)
        return ad.sum_(pixels * pixels) * 1e-3 + ad.sum_(z)

    report = check_gradients(loss, {"rot": np.array([0.05, -0.02, 0.1]), "trans": np.array([0.5, -0.3, 1.0])})
    assert report.passed


def test_point_behind_the_camera():
    camera = Camera.from_config(CameraConfig(), rot=np.zeros(3), trans=np.zeros(3))
    with pytest.raises(CameraError):
        project(camera, np.array([0.0, 0.0, -5.0]))
    with pytest.raises(CameraError):
        project(camera, np.array([1.0, 1.0, 0.0]))

