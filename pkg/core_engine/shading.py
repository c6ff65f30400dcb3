"""
SH shading: B = (1 - s) B_d + s B_s, plus tangent-space normal mapping.

    B_d(n, c) = c * sum_lm A_l B_lm Y_lm(n)
    B_s(R)    =     sum_lm S_l B_lm Y_lm(R),   R = 2 (n.W) n - W

The scalar blend weight s is the mean of the specular albedo's RGB.
Functions accept numpy arrays or tape values; results are numpy arrays only
when every input is.
"""

import logging
from dataclasses import dataclass
from typing import Any, Union

import numpy as np

from core_engine.autodiff.functional import dot, normalize
from core_engine.autodiff.tape import DiffValue, Operand, lift, matmul, mean, relu, value_of
from core_engine.errors import ShadingError
from core_engine.lighting.spherical_harmonics import ConvolvedKernels, SHLight, sh_basis, sh_basis_diff

logger = logging.getLogger(__name__)

Light = Union[SHLight, Operand]


def _coeffs(light: Light) -> Operand:
    return light.coeffs if isinstance(light, SHLight) else light


def _any_diff(*values) -> bool:
    return any(isinstance(v, DiffValue) for v in values)


def _finish(result: DiffValue, *inputs) -> Any:
    return result if _any_diff(*inputs) else result.value


def _basis(dirs: Operand) -> Operand:
    if isinstance(dirs, DiffValue):
        return sh_basis_diff(dirs)
    return sh_basis(dirs)


def _irradiance(light: Light, per_band: np.ndarray, dirs: Operand) -> DiffValue:
    weighted = lift(_coeffs(light)) * per_band
    basis = lift(_basis(dirs)).reshape(-1, per_band.size)
    return matmul(basis, weighted.T).reshape(np.shape(value_of(dirs))[:-1] + (3,))


def shade_diffuse(light: Light, kernels: ConvolvedKernels, n: Operand, c: Operand) -> Any:
    """Per-channel c * sum A_l B_lm Y_lm(n) for unit normals (..., 3)."""
    result = lift(c) * _irradiance(light, kernels.diffuse_81, n)
    return _finish(result, _coeffs(light), n, c)


def shade_specular(light: Light, kernels: ConvolvedKernels, refl: Operand) -> Any:
    """Per-channel sum S_l B_lm Y_lm(R) for unit reflection directions (..., 3)."""
    return _finish(_irradiance(light, kernels.specular_81, refl), _coeffs(light), refl)


def specular_intensity(specular: Operand) -> Any:
    """Scalar blend weight s (..., 1): mean of the specular RGB."""
    return _finish(mean(lift(specular), axis=-1, keepdims=True), specular)


def reflect(n: Operand, view: Operand) -> Any:
    """R = 2 (n.W) n - W."""
    normal = lift(n)
    return _finish(normal * dot(normal, view) * 2.0 - view, n, view)


def blend(diffuse: Operand, specular_term: Operand, s: Operand) -> Any:
    result = (1.0 - lift(s)) * diffuse + lift(s) * specular_term
    return _finish(result, diffuse, specular_term, s)


@dataclass
class ShadePoint:
    """Everything needed to shade one point (or a batch along leading axes)."""

    normal: Any
    diffuse: Any
    specular: Any
    view: Any

    @property
    def intensity(self) -> Any:
        return specular_intensity(self.specular)

    @property
    def reflection(self) -> Any:
        return reflect(self.normal, self.view)

    def validate(self, tol: float = 1e-6) -> None:
        for name in ("normal", "view"):
            lengths = np.linalg.norm(value_of(getattr(self, name)), axis=-1)
            if np.any(np.abs(lengths - 1.0) > tol):
                raise ShadingError(f"{name} must be unit length")
        s = value_of(self.intensity)
        if np.any(s < 0.0) or np.any(s > 1.0):
            raise ShadingError("specular intensity must lie in [0, 1]")


def shade(point: ShadePoint, light: Light, kernels: ConvolvedKernels) -> Any:
    """(1 - s) B_d(n, c) + s B_s(R)."""
    diffuse = shade_diffuse(light, kernels, point.normal, point.diffuse)
    specular = shade_specular(light, kernels, point.reflection)
    return blend(diffuse, specular, point.intensity)


def map_normals(tangents: Operand, bitangents: Operand, normals: Operand, tangent_normal: Operand) -> Any:
    """
    m = normalize(t nx + b ny + n nz) with the tangent-space normal normalised first.

    With tangent_normal = (0, 0, 1) the result is normalize(n), bit for bit.
    """
    tn = normalize(tangent_normal)
    mapped = lift(tangents) * tn[..., 0:1] + lift(bitangents) * tn[..., 1:2] + lift(normals) * tn[..., 2:3]
    return _finish(normalize(mapped), tangents, bitangents, normals, tangent_normal)


def apply_normal_map(frame: Operand, tangent_normal: Operand, tol: float = 1e-6) -> Any:
    """
    m = T n_bar, renormalised, for column frames T = [t | b | n] of shape (..., 3, 3).

    Raises:
        ShadingError: the frame is degenerate
    """
    columns = lift(frame)
    if np.any(np.abs(np.linalg.det(columns.value)) < tol):
        raise ShadingError("degenerate tangent frame (determinant ~ 0)")
    mapped = map_normals(columns[..., :, 0], columns[..., :, 1], columns[..., :, 2], lift(tangent_normal))
    return _finish(mapped, frame, tangent_normal)


def shade_points(light: Light, kernels: ConvolvedKernels, normal: Operand, diffuse: Operand,
                 specular: Operand, view: Operand) -> Any:
    """Batched shade() with the result clamped at zero, as renderers use it."""
    point = ShadePoint(normal=normal, diffuse=diffuse, specular=specular, view=view)
    return _finish(relu(shade(point, light, kernels)), _coeffs(light), normal, diffuse, specular, view)
