"""
uv-space maps: atlas rasterization, baking and sampling.

Maps are (res, res, C) arrays with row index along v and column index along
u; texel (i, j) is centred at uv = ((j + 0.5) / res, (i + 0.5) / res).
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from core_engine.autodiff.functional import bilinear_sample, interpolate_corners
from core_engine.autodiff.tape import DiffValue, Operand, Tape, lift, reshape
from core_engine.raster.rasterizer import rasterize_uv
from models.morphable import Adjacency, ModelBundle

logger = logging.getLogger(__name__)


@dataclass
class UVAtlas:
    """
    Rasterized uv layout of a bundle.

    `source` maps every texel to the covered texel whose surface point it
    uses: itself when covered, the nearest covered texel otherwise, so baked
    maps have no holes at chart borders.

    `mirror` maps every texel to the flat index of the texel holding the
    bilaterally mirrored surface point, or -1 when either side is uncovered.
    """

    resolution: int
    tri_id: np.ndarray
    bary: np.ndarray
    coverage: np.ndarray
    source: np.ndarray
    mirror: np.ndarray

    @property
    def symmetric_coverage(self) -> np.ndarray:
        """Texels whose mirrored surface point lands on a covered texel."""
        return self.mirror >= 0

    def texel_centres(self) -> np.ndarray:
        centres = (np.arange(self.resolution) + 0.5) / self.resolution
        u, v = np.meshgrid(centres, centres)
        return np.stack([u, v], axis=-1)

    def filled(self):
        """(tri_id, bary) for every texel after hole filling, flattened."""
        src = self.source.ravel()
        return self.tri_id.ravel()[src], self.bary.reshape(-1, 3)[src]


def build_atlas(bundle: ModelBundle, resolution: Optional[int] = None) -> UVAtlas:
    res = resolution or bundle.texture_resolution
    fragments = rasterize_uv(bundle.uv, bundle.triangles, res)
    coverage = fragments.mask
    if not coverage.any():
        source = np.arange(res * res).reshape(res, res)
    else:
        rows, cols = ndimage.distance_transform_edt(~coverage, return_distances=False, return_indices=True)
        source = rows * res + cols
    mirror = mirror_texels(bundle, fragments.tri_id, fragments.bary, coverage)
    logger.debug("uv atlas %dx%d: %.1f%% covered, %.1f%% mirrored", res, res, 100.0 * coverage.mean(),
                 100.0 * (mirror >= 0).mean())
    return UVAtlas(resolution=res, tri_id=fragments.tri_id, bary=fragments.bary, coverage=coverage, source=source,
                   mirror=mirror)


def mirror_texels(bundle: ModelBundle, tri_id: np.ndarray, bary: np.ndarray, coverage: np.ndarray) -> np.ndarray:
    """
    Texel -> texel mirror index built from the bundle's per-vertex mirror map.

    A covered texel's surface point is re-expressed on the mirrored corner
    vertices; the texel containing that point's uv is its mirror.
    """
    res = coverage.shape[0]
    mirror = np.full(res * res, -1, dtype=np.int64)
    covered = np.flatnonzero(coverage.ravel())
    if covered.size == 0:
        return mirror.reshape(res, res)
    corners = bundle.mirror[bundle.triangles[tri_id.ravel()[covered]]]
    uv = np.einsum("pk,pkc->pc", bary.reshape(-1, 3)[covered], bundle.uv[corners])
    cols = np.clip(np.floor(uv[:, 0] * res).astype(np.int64), 0, res - 1)
    rows = np.clip(np.floor(uv[:, 1] * res).astype(np.int64), 0, res - 1)
    target = rows * res + cols
    hit = coverage.ravel()[target]
    mirror[covered[hit]] = target[hit]
    return mirror.reshape(res, res)


def bake_vertex_attribute(atlas: UVAtlas, triangles: np.ndarray, values: Operand) -> DiffValue:
    """
    Rasterize per-vertex values (N, C) into a (res, res, C) uv map.

    Linear in `values`, so gradients reach the coefficients that produced them.
    """
    values = lift(values)
    tri_ids, bary = atlas.filled()
    baked = interpolate_corners(values, triangles, tri_ids, bary)
    return reshape(baked, (atlas.resolution, atlas.resolution, values.shape[-1]))


def sample_uv_map(uv_map: Operand, uv: Operand, tape: Optional[Tape] = None) -> DiffValue:
    """
    Bilinear, clamp-to-edge lookup of a uv map.

    Args:
        uv_map: (res, res, C) map
        uv: (..., 2) coordinates in [0, 1]^2

    Returns:
        (..., C) samples
    """
    uv_map = lift(uv_map)
    res = uv_map.shape[0]
    uv = lift(uv)
    return bilinear_sample(uv_map, uv[..., 0] * res - 0.5, uv[..., 1] * res - 0.5, tape=tape, name="uv-lookup")


def grid_adjacency(resolution: int, mask: Optional[np.ndarray] = None) -> Adjacency:
    """
    4-neighbourhood of texels, restricted to in-range texels (and to `mask`).

    Texels outside the mask have no neighbours and are not anyone's neighbour.
    """
    res = resolution
    valid = np.ones((res, res), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    index = np.arange(res * res).reshape(res, res)
    pairs = []
    for d_row, d_col in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        src = index[max(0, -d_row):res - max(0, d_row), max(0, -d_col):res - max(0, d_col)]
        dst = index[max(0, d_row):res - max(0, -d_row), max(0, d_col):res - max(0, -d_col)]
        keep = valid.ravel()[src] & valid.ravel()[dst]
        pairs.append(np.stack([src[keep], dst[keep]], axis=1))
    edges = np.concatenate(pairs)
    edges = edges[np.lexsort((edges[:, 1], edges[:, 0]))]
    offsets = np.concatenate([[0], np.cumsum(np.bincount(edges[:, 0], minlength=res * res))])
    return Adjacency(indices=edges[:, 1].copy(), offsets=offsets)


def texel_surface(atlas: UVAtlas, triangles: np.ndarray, vertex_values: np.ndarray) -> np.ndarray:
    """Per-texel interpolation of per-vertex arrays (no hole filling); zeros where uncovered."""
    res = atlas.resolution
    out = np.zeros((res, res, vertex_values.shape[-1]))
    covered = atlas.coverage
    corners = vertex_values[triangles[atlas.tri_id[covered]]]
    out[covered] = np.einsum("pk,pkc->pc", atlas.bary[covered], corners)
    return out
