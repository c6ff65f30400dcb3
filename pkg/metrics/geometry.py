"""
Geometric error metrics: vertex position error and angular normal error.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np
import pandas as pd

from core_engine.errors import MetricError

logger = logging.getLogger(__name__)

ANGLE_THRESHOLDS = (20.0, 25.0, 30.0)
UNIT_TOLERANCE = 1e-6


@dataclass
class MetricReport:
    """Mean and std of an error, with the share of samples strictly below each threshold (percent)."""

    name: str
    mean: float
    std: float
    count: int
    thresholds: Dict[float, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "metric": self.name,
            "mean": self.mean,
            "std": self.std,
            "count": self.count,
            "below": {f"{threshold:g}": share for threshold, share in self.thresholds.items()},
        }

    def to_frame(self) -> pd.DataFrame:
        row = {"metric": self.name, "mean": self.mean, "std": self.std, "count": self.count}
        row.update({f"below_{threshold:g}": share for threshold, share in self.thresholds.items()})
        return pd.DataFrame([row])


def _summarise(name: str, errors: np.ndarray, thresholds: Sequence[float] = ()) -> MetricReport:
    return MetricReport(
        name=name,
        mean=float(errors.mean()),
        std=float(errors.std()),
        count=int(errors.size),
        thresholds={float(t): float(100.0 * np.mean(errors < t)) for t in thresholds},
    )


def vertex_position_error(pred: np.ndarray, gt: np.ndarray, correspondence: Optional[np.ndarray] = None,
                          mask: Optional[np.ndarray] = None) -> MetricReport:
    """
    Euclidean distance between corresponding vertices, in model units.

    Args:
        pred: (N, 3) predicted vertices
        gt: (M, 3) ground-truth vertices
        correspondence: gt index per predicted vertex (identity when omitted)
        mask: (N,) predicted vertices to include

    Raises:
        MetricError: shapes disagree or the mask selects nothing
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if correspondence is None:
        if pred.shape != gt.shape:
            raise MetricError(f"vertex counts differ ({len(pred)} vs {len(gt)}) and no correspondence given")
        matched = gt
    else:
        matched = gt[np.asarray(correspondence, dtype=np.int64)]
    distances = np.linalg.norm(pred - matched, axis=-1)
    if mask is not None:
        distances = distances[np.asarray(mask, dtype=bool)]
    if distances.size == 0:
        raise MetricError("vertex position error over an empty mask")
    return _summarise("vertex_position_error", distances)


def _unit(normals: np.ndarray, name: str) -> np.ndarray:
    lengths = np.linalg.norm(normals, axis=-1, keepdims=True)
    if np.any(lengths == 0):
        raise MetricError(f"{name} contains zero-length normals")
    if np.any(np.abs(lengths - 1.0) > UNIT_TOLERANCE):
        logger.warning("%s: renormalising %d non-unit normals", name,
                       int((np.abs(lengths - 1.0) > UNIT_TOLERANCE).sum()))
    return normals / lengths


def normal_angular_error(pred: np.ndarray, gt: np.ndarray, mask: Optional[np.ndarray] = None,
                         thresholds: Sequence[float] = ANGLE_THRESHOLDS) -> MetricReport:
    """
    Per-pixel angle arccos(clamp(n_p . n_g)) in degrees inside the mask.

    Threshold percentages count errors strictly below each threshold.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise MetricError(f"normal images differ in shape: {pred.shape} vs {gt.shape}")
    if mask is None:
        mask = np.ones(pred.shape[:-1], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise MetricError("angular error over an empty mask")
    p = _unit(pred[mask], "predicted normals")
    g = _unit(gt[mask], "ground-truth normals")
    cosine = np.clip(np.einsum("pi,pi->p", p, g), -1.0, 1.0)
    return _summarise("normal_angular_error", np.degrees(np.arccos(cosine)), thresholds)
