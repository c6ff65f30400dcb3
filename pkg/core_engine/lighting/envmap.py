"""
64 x 64 lat-long environment map derived from SH light.

Rows run over the polar angle theta from "up" (-y) to "down" (+y); columns
run over the azimuth phi in [-pi, pi), with phi = 0 facing the camera (-z):

    dir(theta, phi) = (sin(theta) sin(phi), -cos(theta), -sin(theta) cos(phi))
"""

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Tuple

import numpy as np

from core_engine.autodiff.functional import bilinear_sample
from core_engine.autodiff.tape import DiffValue, Operand, Tape, arccos, arctan2, clip, lift, matmul, relu
from core_engine.lighting.spherical_harmonics import SHLight, sh_basis_array

logger = logging.getLogger(__name__)

ENV_SIZE = 64


def texel_directions(size: int = ENV_SIZE) -> np.ndarray:
    """Unit directions (size, size, 3) through texel centres."""
    theta = (np.arange(size) + 0.5) * math.pi / size
    phi = -math.pi + (np.arange(size) + 0.5) * 2.0 * math.pi / size
    phi, theta = np.meshgrid(phi, theta)
    return np.stack([np.sin(theta) * np.sin(phi), -np.cos(theta), -np.sin(theta) * np.cos(phi)], axis=-1)


def texel_solid_angles(size: int = ENV_SIZE) -> np.ndarray:
    """Exact solid angle (size, size) of each equal-angle texel; sums to 4 pi."""
    edges = np.arange(size + 1) * math.pi / size
    band = (2.0 * math.pi / size) * (np.cos(edges[:-1]) - np.cos(edges[1:]))
    return np.repeat(band[:, None], size, axis=1)


@lru_cache(maxsize=4)
def _texel_basis(size: int) -> np.ndarray:
    basis = sh_basis_array(texel_directions(size)).reshape(size * size, -1)
    basis.setflags(write=False)
    return basis


@dataclass
class EnvMap:
    """Clamped lat-long radiance (64, 64, 3) with texel solid angles."""

    radiance: np.ndarray
    solid_angles: np.ndarray

    @property
    def size(self) -> int:
        return self.radiance.shape[0]

    def energy(self) -> np.ndarray:
        """Per-channel integral of radiance over the sphere."""
        return np.einsum("ij,ijc->c", self.solid_angles, self.radiance)


def envmap_texels(sh: Operand, size: int = ENV_SIZE) -> DiffValue:
    """Clamped texel radiance (size*size, 3) from SH coefficients (3, 81), on a tape."""
    return relu(matmul(_texel_basis(size), lift(sh).T))


def bake_envmap(light: SHLight, size: int = ENV_SIZE, clamp: bool = True) -> EnvMap:
    """
    Sample the SH light at every texel centre and clamp at zero.

    Args:
        light: SH coefficients
        size: map side length
        clamp: disable to inspect the signed signal

    Returns:
        EnvMap
    """
    texels = _texel_basis(size) @ light.coeffs.T
    if clamp:
        texels = np.maximum(texels, 0.0)
    return EnvMap(radiance=texels.reshape(size, size, 3), solid_angles=texel_solid_angles(size))


def direction_to_texel(dirs: Operand, size: int = ENV_SIZE) -> Tuple[DiffValue, DiffValue]:
    """Continuous texel coordinates (column x, row y) of unit directions."""
    dirs = lift(dirs)
    theta = arccos(clip(-dirs[..., 1], -1.0 + 1e-12, 1.0 - 1e-12))
    phi = arctan2(dirs[..., 0], -dirs[..., 2])
    x = (phi + math.pi) * (size / (2.0 * math.pi)) - 0.5
    y = theta * (size / math.pi) - 0.5
    return x, y


def lookup(texels: Operand, dirs: Operand, size: int = ENV_SIZE, tape: Optional[Tape] = None) -> DiffValue:
    """
    Bilinear radiance lookup, wrapping in phi and clamping in theta.

    Args:
        texels: (size*size, 3) or (size, size, 3) radiance
        dirs: (..., 3) unit directions

    Returns:
        (..., 3) radiance
    """
    texels = lift(texels).reshape(size, size, 3)
    x, y = direction_to_texel(dirs, size)
    return bilinear_sample(texels, x, y, wrap_x=True, tape=tape, name="env-lookup")
