"""
Image metrics: SSIM on luma, photometric RMSE / PSNR, and shading leakage.
"""

import logging
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.stats import pearsonr

from core_engine.errors import MetricError

logger = logging.getLogger(__name__)

SSIM_WINDOW = 8
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
LUMA = np.array([0.299, 0.587, 0.114])


def luma(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    if image.shape[-1] == 1:
        return image[..., 0]
    return image[..., :3] @ LUMA


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise MetricError(f"images differ in shape: {a.shape} vs {b.shape}")


def ssim(a: np.ndarray, b: np.ndarray, window: int = SSIM_WINDOW) -> float:
    """
    Mean SSIM over all 8x8 windows (stride 1) of the luminance channel.

    Window statistics are population moments; inputs should lie in [0, 1].
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_pair(a, b)
    ya, yb = luma(a), luma(b)
    if min(ya.shape) < window:
        raise MetricError(f"image {ya.shape} is smaller than the {window}x{window} SSIM window")
    wa = sliding_window_view(ya, (window, window))
    wb = sliding_window_view(yb, (window, window))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = (wa * wa).mean(axis=(-2, -1)) - mu_a * mu_a
    var_b = (wb * wb).mean(axis=(-2, -1)) - mu_b * mu_b
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    numerator = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)
    denominator = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(numerator / denominator))


def rmse(a: np.ndarray, b: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    """Root mean squared difference over masked pixels and all channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_pair(a, b)
    diff = a - b
    if mask is not None:
        diff = diff[np.asarray(mask, dtype=bool)]
    if diff.size == 0:
        raise MetricError("RMSE over an empty mask")
    return float(np.sqrt(np.mean(diff * diff)))


def psnr(a: np.ndarray, b: np.ndarray, mask: Optional[np.ndarray] = None, peak: float = 1.0) -> float:
    error = rmse(a, b, mask)
    if error == 0.0:
        return float("inf")
    return float(20.0 * np.log10(peak / error))


def shading_leakage(fitted_diffuse: np.ndarray, true_diffuse: np.ndarray, shading: np.ndarray,
                    valid: Optional[np.ndarray] = None) -> float:
    """
    Pearson correlation between the fitted diffuse residual and the true shading pattern.

    High values mean shading was baked into the recovered albedo. Computed on
    the luma of (fitted - true) against the luma of the shading map.
    """
    fitted_diffuse = np.asarray(fitted_diffuse, dtype=np.float64)
    _check_pair(fitted_diffuse, np.asarray(true_diffuse))
    residual = luma(fitted_diffuse - true_diffuse)
    pattern = luma(np.asarray(shading, dtype=np.float64))
    if pattern.shape != residual.shape:
        raise MetricError(f"shading map {pattern.shape} does not match albedo {residual.shape}")
    if valid is not None:
        residual = residual[np.asarray(valid, dtype=bool)]
        pattern = pattern[np.asarray(valid, dtype=bool)]
    residual, pattern = residual.ravel(), pattern.ravel()
    if residual.size < 2 or np.ptp(residual) == 0 or np.ptp(pattern) == 0:
        return 0.0
    correlation, _ = pearsonr(residual, pattern)
    return float(correlation)
