"""
Pinhole camera with axis-angle rotation.

World space uses the camera convention: x right, y down, z forward. A world
point v maps to camera space as C(v) = R^T (v - T), so T is the camera
centre and R's columns are the camera axes in world coordinates. Pixel
coordinates are continuous; the centre of pixel (row i, column j) is
(j + 0.5, i + 0.5).
"""

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from core_engine.autodiff.tape import (
    DiffValue,
    Operand,
    lift,
    matmul,
    reshape,
    stack,
    sqrt,
    cos,
    sin,
    sum_,
    value_of,
    where,
)
from core_engine.config import CameraConfig
from core_engine.errors import CameraError

logger = logging.getLogger(__name__)

SERIES_THRESHOLD = 1e-8  # theta^2 below which Rodrigues coefficients use their series


def skew(rot: Operand) -> DiffValue:
    rot = lift(rot)
    x, y, z = rot[0], rot[1], rot[2]
    zero = x * 0.0
    return stack([stack([zero, -z, y]), stack([z, zero, -x]), stack([-y, x, zero])])


def rotation_matrix(rot: Operand) -> DiffValue:
    """
    R = exp([rot]_x) by Rodrigues' formula.

    Near the identity the coefficients sin(t)/t and (1 - cos t)/t^2 are
    replaced by their Taylor series so both value and gradient stay finite.
    """
    rot = lift(rot)
    theta2 = sum_(rot * rot)
    k = skew(rot)
    if float(theta2.value) < SERIES_THRESHOLD:
        a = 1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0
        b = 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0
    else:
        theta = sqrt(theta2)
        a = sin(theta) / theta
        b = (1.0 - cos(theta)) / theta2
    return np.eye(3) + k * a + matmul(k, k) * b


def to_camera(points: Operand, rotation: Operand, trans: Operand) -> DiffValue:
    """C(v) = R^T (v - T) for row-vector points (..., 3)."""
    points = lift(points)
    return matmul(reshape(points - trans, (-1, 3)), rotation).reshape(points.shape)


def project_points(points: Operand, rotation: Operand, trans: Operand,
                   focal: float, cx: float, cy: float) -> Tuple[DiffValue, DiffValue]:
    """
    Perspective projection of world points.

    Returns:
        (pixels (..., 2), camera-space depth z (...)); callers mask z <= 0
    """
    cam = to_camera(points, rotation, trans)
    z = cam[..., 2]
    safe_z = where(z.value > 0, z, 1.0)
    u = cam[..., 0] / safe_z * focal + cx
    v = cam[..., 1] / safe_z * focal + cy
    return stack([u, v], axis=-1), z


@dataclass
class Camera:
    """Pose (axis-angle rot, translation T) plus fixed intrinsics."""

    rot: np.ndarray
    trans: np.ndarray
    focal: float
    cx: float
    cy: float
    width: int
    height: int

    @classmethod
    def from_config(cls, config: CameraConfig, rot: np.ndarray, trans: np.ndarray) -> "Camera":
        return cls(rot=np.asarray(rot, dtype=np.float64), trans=np.asarray(trans, dtype=np.float64),
                   focal=config.focal, cx=config.cx, cy=config.cy, width=config.width, height=config.height)

    @property
    def R(self) -> np.ndarray:
        return rotation_matrix(self.rot).value


def project(camera: Camera, v: np.ndarray) -> np.ndarray:
    """
    Project one world point to pixel coordinates.

    Raises:
        CameraError: the point is on or behind the camera plane
    """
    pixel, z = project_points(np.asarray(v, dtype=np.float64), camera.R, camera.trans,
                              camera.focal, camera.cx, camera.cy)
    if float(value_of(z)) <= 0.0:
        raise CameraError(f"point {np.asarray(v).tolist()} lies behind the camera (z = {float(z.value):.4g})")
    return np.asarray(pixel.value)
