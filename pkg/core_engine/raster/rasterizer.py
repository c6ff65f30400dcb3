"""
Triangle rasterization with a z-buffer.

The kernel is compiled with numba and runs serially over triangles in index
order, which makes the strict depth comparison resolve ties to the lower
triangle index. Barycentrics are perspective-correct (1/z interpolation).
The same kernel rasterizes the uv atlas by passing z = 1 everywhere.
"""

import logging
from dataclasses import dataclass

import numpy as np
from numba import njit

logger = logging.getLogger(__name__)

NEAR = 1e-6


@dataclass
class Fragments:
    """Per-pixel nearest surface: depth (inf where empty), triangle id (-1), barycentrics."""

    depth: np.ndarray
    tri_id: np.ndarray
    bary: np.ndarray

    @property
    def mask(self) -> np.ndarray:
        return self.tri_id >= 0

    @property
    def shape(self):
        return self.tri_id.shape


@njit(cache=True)
def _rasterize_kernel(xy, z, triangles, width, height, depth, tri_id, bary):
    for f in range(triangles.shape[0]):
        i0 = triangles[f, 0]
        i1 = triangles[f, 1]
        i2 = triangles[f, 2]
        z0 = z[i0]
        z1 = z[i1]
        z2 = z[i2]
        if z0 <= NEAR or z1 <= NEAR or z2 <= NEAR:
            continue
        x0 = xy[i0, 0]
        y0 = xy[i0, 1]
        x1 = xy[i1, 0]
        y1 = xy[i1, 1]
        x2 = xy[i2, 0]
        y2 = xy[i2, 1]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if abs(area) < 1e-12:
            continue
        col_lo = max(int(np.ceil(min(x0, x1, x2) - 0.5)), 0)
        col_hi = min(int(np.floor(max(x0, x1, x2) - 0.5)), width - 1)
        row_lo = max(int(np.ceil(min(y0, y1, y2) - 0.5)), 0)
        row_hi = min(int(np.floor(max(y0, y1, y2) - 0.5)), height - 1)
        for row in range(row_lo, row_hi + 1):
            py = row + 0.5
            for col in range(col_lo, col_hi + 1):
                px = col + 0.5
                w0 = ((x1 - px) * (y2 - py) - (x2 - px) * (y1 - py)) / area
                w1 = ((x2 - px) * (y0 - py) - (x0 - px) * (y2 - py)) / area
                w2 = 1.0 - w0 - w1
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                q0 = w0 / z0
                q1 = w1 / z1
                q2 = w2 / z2
                zz = 1.0 / (q0 + q1 + q2)
                if zz < depth[row, col]:
                    depth[row, col] = zz
                    tri_id[row, col] = f
                    bary[row, col, 0] = q0 * zz
                    bary[row, col, 1] = q1 * zz
                    bary[row, col, 2] = q2 * zz


def rasterize(xy: np.ndarray, z: np.ndarray, triangles: np.ndarray, width: int, height: int) -> Fragments:
    """
    Rasterize projected triangles.

    Args:
        xy: (N, 2) continuous pixel coordinates of the vertices
        z: (N,) camera-space depth (triangles touching z <= 0 are skipped)
        triangles: (F, 3) vertex indices
        width: image width
        height: image height

    Returns:
        Fragments with the nearest triangle per pixel centre
    """
    depth = np.full((height, width), np.inf)
    tri_id = np.full((height, width), -1, dtype=np.int64)
    bary = np.zeros((height, width, 3))
    _rasterize_kernel(np.ascontiguousarray(xy, dtype=np.float64), np.ascontiguousarray(z, dtype=np.float64),
                      np.ascontiguousarray(triangles, dtype=np.int64), width, height, depth, tri_id, bary)
    logger.debug("rasterized %d triangles into %dx%d, %d pixels covered",
                 len(triangles), width, height, int((tri_id >= 0).sum()))
    return Fragments(depth=depth, tri_id=tri_id, bary=bary)


def rasterize_uv(uv: np.ndarray, triangles: np.ndarray, resolution: int) -> Fragments:
    """Rasterize the uv atlas at `resolution` x `resolution` texels (row = v, column = u)."""
    return rasterize(np.asarray(uv) * resolution, np.ones(len(uv)), triangles, resolution, resolution)
