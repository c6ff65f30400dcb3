"""
Landmark-based initialisation of the scene before fitting.

Pose starts at the identity rotation; the camera centre T is solved in
closed form from the 68 image landmarks against the mean shape's landmark
vertices, and the light starts as a uniform gray environment whose
brightness matches the image.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from core_engine.config import CameraConfig
from core_engine.errors import LossError
from core_engine.lighting.spherical_harmonics import SHLight
from models.camera import project_points
from models.morphable import N_LANDMARKS, ModelBundle
from models.scene import SceneParams

logger = logging.getLogger(__name__)


@dataclass
class AlignmentResult:
    trans: np.ndarray
    residual_px: float
    sh: np.ndarray


class LandmarkAligner:
    def __init__(self, camera: CameraConfig, min_depth: float = 1.0):
        self.camera = camera
        self.min_depth = min_depth

    def align_translation(self, bundle: ModelBundle, landmarks: np.ndarray) -> np.ndarray:
        """
        Least-squares camera centre T for R = I.

        Each landmark (u, v) with model point X gives two equations linear in T:
            f (X_x - T_x) = (u - cx) (X_z - T_z)
            f (X_y - T_y) = (v - cy) (X_z - T_z)
        """
        landmarks = np.asarray(landmarks, dtype=np.float64)
        if landmarks.shape != (N_LANDMARKS, 2):
            raise LossError(f"expected {N_LANDMARKS} x 2 landmarks, got {landmarks.shape}")
        cam = self.camera
        points = bundle.mean_shape.reshape(-1, 3)[bundle.landmark_vertex_ids]
        du = landmarks[:, 0] - cam.cx
        dv = landmarks[:, 1] - cam.cy
        zeros = np.zeros(N_LANDMARKS)
        focal = np.full(N_LANDMARKS, cam.focal)

        rows = np.concatenate([
            np.stack([focal, zeros, -du], axis=1),
            np.stack([zeros, focal, -dv], axis=1),
        ])
        rhs = np.concatenate([cam.focal * points[:, 0] - du * points[:, 2],
                              cam.focal * points[:, 1] - dv * points[:, 2]])
        trans, *_ = np.linalg.lstsq(rows, rhs, rcond=None)

        nearest = float((points[:, 2] - trans[2]).min())
        if nearest < self.min_depth:
            logger.warning("landmark alignment put the face %.3g units from the camera; pushing it back", nearest)
            trans[2] = points[:, 2].min() - self.min_depth
        return trans

    def initial_light(self, bundle: ModelBundle, image: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
        """Gray DC light: mean image brightness divided by the mean diffuse albedo."""
        image = np.asarray(image, dtype=np.float64)
        pixels = image[mask] if mask is not None else image.reshape(-1, image.shape[-1])
        lit = pixels[pixels.sum(axis=-1) > 0]
        brightness = float(lit.mean()) if lit.size else 0.5
        albedo = float(np.clip(bundle.mean_diffuse, 1e-3, 1.0).mean())
        return SHLight.constant(brightness / albedo).coeffs

    def residual(self, bundle: ModelBundle, landmarks: np.ndarray, trans: np.ndarray) -> float:
        """RMS pixel distance of the projected landmark vertices."""
        cam = self.camera
        points = bundle.mean_shape.reshape(-1, 3)[bundle.landmark_vertex_ids]
        pixels, _ = project_points(points, np.eye(3), trans, cam.focal, cam.cx, cam.cy)
        return float(np.sqrt(np.mean(np.sum((pixels.value - landmarks) ** 2, axis=-1))))

    def align(self, bundle: ModelBundle, image: np.ndarray, landmarks: np.ndarray) -> AlignmentResult:
        trans = self.align_translation(bundle, landmarks)
        result = AlignmentResult(trans=trans, residual_px=self.residual(bundle, landmarks, trans),
                                 sh=self.initial_light(bundle, image))
        logger.info("landmark alignment: T = %s, RMS residual %.3f px", np.round(trans, 3).tolist(),
                    result.residual_px)
        return result

    def initialize(self, bundle: ModelBundle, image: np.ndarray, landmarks: np.ndarray,
                   roughness: float = 0.5) -> SceneParams:
        """alpha = delta = beta = 0, rot = 0, T and light from the alignment."""
        result = self.align(bundle, image, landmarks)
        return SceneParams.initial(bundle, trans=result.trans, sh=result.sh, roughness=roughness)
