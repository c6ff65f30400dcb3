"""
Counter-based random numbers and lobe sampling.

Every random number is a pure function of (seed, pixel, sample, dimension)
through a splitmix64 finaliser, so a pixel's sample stream never depends on
how pixels are batched or scheduled, and re-evaluating with the same seed
reuses the same samples.
"""

import math
from typing import Tuple

import numpy as np

from core_engine.autodiff.functional import components
from core_engine.autodiff.tape import DiffValue, Operand, lift, reshape, stack

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_PIXEL = np.uint64(0xD6E8FEB86659FD93)
_SAMPLE = np.uint64(0xA0761D6478BD642F)
_DIM = np.uint64(0xE7037ED1A0B428DB)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def uniforms(seed: int, pixels: np.ndarray, samples: np.ndarray, dims: int) -> np.ndarray:
    """
    Uniform numbers in [0, 1).

    Args:
        seed: stream seed
        pixels: (P,) global pixel ids
        samples: (K,) sample indices
        dims: numbers per (pixel, sample)

    Returns:
        (P, K, dims) array
    """
    pixels = np.asarray(pixels, dtype=np.uint64).reshape(-1, 1, 1)
    samples = np.asarray(samples, dtype=np.uint64).reshape(1, -1, 1)
    dim = np.arange(dims, dtype=np.uint64).reshape(1, 1, -1)
    key = _mix(np.full(1, seed, dtype=np.int64).astype(np.uint64) * _GOLDEN + _GOLDEN)
    counter = pixels * _PIXEL + samples * _SAMPLE + dim * _DIM
    bits = _mix(counter ^ key)
    return (bits >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def cosine_hemisphere(u1: np.ndarray, u2: np.ndarray) -> np.ndarray:
    """Local directions (..., 3) about +z with density cos(theta) / pi."""
    r = np.sqrt(u1)
    phi = 2.0 * math.pi * u2
    return np.stack([r * np.cos(phi), r * np.sin(phi), np.sqrt(np.maximum(1.0 - u1, 0.0))], axis=-1)


def phong_lobe(u1: np.ndarray, u2: np.ndarray, exponent: float) -> np.ndarray:
    """Local directions (..., 3) about +z with density (e + 1) / (2 pi) cos^e."""
    cos_theta = u1 ** (1.0 / (exponent + 1.0))
    sin_theta = np.sqrt(np.maximum(1.0 - cos_theta * cos_theta, 0.0))
    phi = 2.0 * math.pi * u2
    return np.stack([sin_theta * np.cos(phi), sin_theta * np.sin(phi), cos_theta], axis=-1)


def orthonormal_frame(n: Operand) -> Tuple[DiffValue, DiffValue]:
    """
    Tangent and bitangent completing unit vectors n (..., 3) to a right-handed frame.

    Branchless construction; the sign of n_z is taken as a constant so the
    frame is differentiable in n away from n_z = 0 crossings.
    """
    nx, ny, nz = components(n)
    sign = np.where(nz.value >= 0.0, 1.0, -1.0)
    a = -1.0 / (sign + nz)
    b = nx * ny * a
    tangent = stack([1.0 + sign * nx * nx * a, sign * b, -sign * nx], axis=-1)
    bitangent = stack([b, sign + ny * ny * a, -ny], axis=-1)
    return tangent, bitangent


def to_world(local: np.ndarray, n: Operand) -> DiffValue:
    """
    Rotate per-sample local directions into the frame about n.

    Args:
        local: (P, K, 3) directions about +z
        n: (P, 3) unit axes

    Returns:
        (P, K, 3) world directions
    """
    tangent, bitangent = orthonormal_frame(n)
    count = local.shape[0]
    axes = [reshape(axis, (count, 1, 3)) for axis in (tangent, bitangent, lift(n))]
    return axes[0] * local[..., 0:1] + axes[1] * local[..., 1:2] + axes[2] * local[..., 2:3]
