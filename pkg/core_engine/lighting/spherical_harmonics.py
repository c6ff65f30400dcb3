"""
Nine-band real spherical harmonics and convolution kernels.

The basis uses polar axis +z without the Condon-Shortley phase and is indexed
l^2 + l + m for l = 0..8, m = -l..l (81 functions). It is evaluated as
polynomials in (x, y, z): Re/Im of (x + iy)^m times a Legendre-type
polynomial in z, which keeps the same arithmetic valid for numpy arrays and
tape values alike.
"""

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import List

import numpy as np
from numpy.polynomial import legendre

from core_engine.autodiff.tape import DiffValue, Operand, lift, stack
from core_engine.errors import SHError

logger = logging.getLogger(__name__)

N_BANDS = 9
N_COEFFS = N_BANDS * N_BANDS
Y00 = 0.5 / math.sqrt(math.pi)


def sh_index(l: int, m: int) -> int:
    return l * l + l + m


@lru_cache(maxsize=None)
def _normalisation(l: int, m: int) -> float:
    return math.sqrt((2 * l + 1) / (4.0 * math.pi) * math.factorial(l - m) / math.factorial(l + m))


def _basis_terms(x, y, z) -> List:
    """The 81 basis values as a list, for arrays or DiffValues of equal shape."""
    terms = [None] * N_COEFFS
    cos_m = [x * 0.0 + 1.0]
    sin_m = [x * 0.0]
    for m in range(1, N_BANDS):
        cos_m.append(x * cos_m[m - 1] - y * sin_m[m - 1])
        sin_m.append(x * sin_m[m - 1] + y * cos_m[m - 1])

    for m in range(N_BANDS):
        # Q_l^m(z): associated Legendre without the (1 - z^2)^(m/2) factor
        double_factorial = float(np.prod(np.arange(2 * m - 1, 0, -2))) if m > 0 else 1.0
        q_prev = None
        q = z * 0.0 + double_factorial
        for l in range(m, N_BANDS):
            if l == m + 1:
                q_prev, q = q, z * q * (2 * m + 1)
            elif l > m + 1:
                q_prev, q = q, (z * q * (2 * l - 1) - q_prev * (l + m - 1)) / (l - m)
            k = _normalisation(l, m)
            if m == 0:
                terms[sh_index(l, 0)] = q * k
            else:
                scale = math.sqrt(2.0) * k
                terms[sh_index(l, m)] = cos_m[m] * q * scale
                terms[sh_index(l, -m)] = sin_m[m] * q * scale
    return terms


def sh_basis_array(dirs: np.ndarray) -> np.ndarray:
    """Basis values (..., 81) for unit directions (..., 3), unchecked."""
    dirs = np.asarray(dirs, dtype=np.float64)
    return np.stack(_basis_terms(dirs[..., 0], dirs[..., 1], dirs[..., 2]), axis=-1)


def sh_basis_diff(dirs: Operand) -> DiffValue:
    """Basis values (..., 81) for unit directions on a tape."""
    dirs = lift(dirs)
    return stack(_basis_terms(dirs[..., 0], dirs[..., 1], dirs[..., 2]), axis=-1)


def sh_basis(direction: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    """
    Real SH basis for one or more unit directions.

    Raises:
        SHError: a direction is not unit length within `tol`
    """
    direction = np.asarray(direction, dtype=np.float64)
    lengths = np.linalg.norm(direction, axis=-1)
    if np.any(np.abs(lengths - 1.0) > tol):
        raise SHError(f"sh_basis needs unit directions, got length(s) {np.atleast_1d(lengths)[:4]}")
    return sh_basis_array(direction)


def _band_expand(per_band: np.ndarray) -> np.ndarray:
    return np.repeat(per_band, [2 * l + 1 for l in range(N_BANDS)])


def _zonal_projection(kernel, order: int = 256) -> np.ndarray:
    """2*pi * integral over [0, 1] of kernel(x) P_l(x) dx, l = 0..8, by Gauss-Legendre."""
    nodes, weights = legendre.leggauss(order)
    x = 0.5 * (nodes + 1.0)
    w = 0.5 * weights
    values = kernel(x)
    out = np.empty(N_BANDS)
    for l in range(N_BANDS):
        p_l = legendre.legval(x, np.eye(N_BANDS)[l])
        out[l] = 2.0 * math.pi * np.sum(w * values * p_l)
    return out


@lru_cache(maxsize=1)
def _half_cosine() -> np.ndarray:
    return _zonal_projection(lambda x: x / math.pi)


def half_cosine_coeffs() -> np.ndarray:
    """A_l for the clamped cosine including the Lambertian 1/pi (A_0 = 1)."""
    return _half_cosine().copy()


def phong_exponent(roughness: float) -> float:
    return max(1.0, 2.0 / (roughness * roughness) - 2.0)


def brdf_kernel_coeffs(roughness: float) -> np.ndarray:
    """
    S_l of the normalised zonal lobe (e + 1)/(2 pi) max(0, cos)^e about the
    reflection direction, e = max(1, 2 / roughness^2 - 2). S_0 = 1.

    Raises:
        SHError: roughness outside (0, 1]
    """
    if not (0.0 < roughness <= 1.0):
        raise SHError(f"roughness must lie in (0, 1], got {roughness}")
    exponent = phong_exponent(roughness)
    return _zonal_projection(lambda x: (exponent + 1.0) / (2.0 * math.pi) * x ** exponent, order=512)


@dataclass
class ConvolvedKernels:
    """Per-band diffuse (A_l) and specular (S_l) convolution coefficients."""

    diffuse: np.ndarray
    specular: np.ndarray
    roughness: float

    @classmethod
    def for_roughness(cls, roughness: float) -> "ConvolvedKernels":
        return cls(diffuse=half_cosine_coeffs(), specular=brdf_kernel_coeffs(roughness), roughness=roughness)

    @property
    def diffuse_81(self) -> np.ndarray:
        return _band_expand(self.diffuse)

    @property
    def specular_81(self) -> np.ndarray:
        return _band_expand(self.specular)


@dataclass
class SHLight:
    """Light coefficients, 3 channels x 81."""

    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64)
        if self.coeffs.shape != (3, N_COEFFS):
            raise SHError(f"SH light must be 3 x {N_COEFFS}, got {self.coeffs.shape}")
        if not np.all(np.isfinite(self.coeffs)):
            raise SHError("SH light coefficients must be finite")

    @classmethod
    def constant(cls, radiance=1.0) -> "SHLight":
        """Uniform environment of the given RGB radiance."""
        coeffs = np.zeros((3, N_COEFFS))
        coeffs[:, 0] = np.broadcast_to(np.asarray(radiance, dtype=np.float64), (3,)) / Y00
        return cls(coeffs)

    def radiance(self, dirs: np.ndarray) -> np.ndarray:
        """Unclamped radiance (..., 3) toward unit directions."""
        return sh_basis_array(dirs) @ self.coeffs.T

    def to_list(self) -> list:
        return self.coeffs.tolist()
