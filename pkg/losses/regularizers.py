"""
Priors and map regularisers.

All functions take numpy arrays or tape values and return scalar DiffValues.
uv maps are (res, res, C); `valid` masks are (res, res) booleans selecting the
texels a term is evaluated on.
"""

import logging
from typing import Optional

import numpy as np

from core_engine.autodiff.tape import DiffValue, Operand, abs_, index_add, lift, relu, reshape, square, sum_, take
from core_engine.errors import LossError
from models.morphable import Adjacency, ModelBundle
from models.uvmap import UVAtlas, build_atlas

logger = logging.getLogger(__name__)


def prior_loss(alpha: Operand, beta: Operand, bundle: ModelBundle) -> DiffValue:
    """sum alpha_k^2 / var_shape_k + sum beta_k^2 / var_refl_k."""
    shape_term = sum_(square(alpha) / bundle.prior_var_shape)
    refl_term = sum_(square(beta) / bundle.prior_var_refl)
    return shape_term + refl_term


def softbox_loss(values: Operand, valid: Optional[np.ndarray] = None) -> DiffValue:
    """
    Hinge penalty keeping values in [0, 1]: sum max(0, -x)^2 + max(0, x - 1)^2.

    With a texel mask the penalty is averaged over the masked texel-channel
    entries instead of summed, matching the other map regularisers.
    """
    values = lift(values)
    if valid is not None:
        values = _masked_rows(values, valid)
    penalty = square(relu(-values)) + square(relu(values - 1.0))
    if valid is None:
        return sum_(penalty)
    return sum_(penalty) / float(max(penalty.value.size, 1))


def _masked_rows(uv_map: DiffValue, valid: np.ndarray) -> DiffValue:
    res = uv_map.shape[0]
    rows = np.flatnonzero(np.asarray(valid, dtype=bool).ravel())
    return take(reshape(uv_map, (res * res, -1)), rows)


def _check_map(name: str, uv_map: DiffValue, valid: Optional[np.ndarray]) -> None:
    if uv_map.ndim != 3 or uv_map.shape[0] != uv_map.shape[1]:
        raise LossError(f"{name} expects a square (res, res, C) map, got {uv_map.shape}")
    if valid is not None and np.shape(valid) != uv_map.shape[:2]:
        raise LossError(f"{name}: mask {np.shape(valid)} does not match map {uv_map.shape[:2]}")


def symmetry_loss(uv_map: Operand, bundle: ModelBundle, atlas: Optional[UVAtlas] = None) -> DiffValue:
    """
    Mean |map(t) - map(mirror(t))| over texel-channel entries.

    mirror(t) is the texel holding the mirrored surface point of t, taken from
    the bundle's per-vertex mirror map; texels without a covered mirror are
    skipped.

    Args:
        uv_map: (res, res, C) map
        bundle: model whose mirror map and uv layout define mirror(t)
        atlas: the bundle's atlas at the map's resolution, built when omitted
    """
    uv_map = lift(uv_map)
    _check_map("symmetry_loss", uv_map, None)
    res = uv_map.shape[0]
    if atlas is None:
        atlas = build_atlas(bundle, res)
    if atlas.resolution != res:
        raise LossError(f"symmetry_loss: atlas resolution {atlas.resolution} does not match map {uv_map.shape[:2]}")
    mirror = atlas.mirror.ravel()
    rows = np.flatnonzero(mirror >= 0)
    if rows.size == 0:
        return lift(0.0)
    flat = reshape(uv_map, (res * res, -1))
    difference = abs_(take(flat, rows) - take(flat, mirror[rows]))
    return sum_(difference) / float(difference.value.size)


def consistency_loss(refined: Operand, base: Operand, valid: Optional[np.ndarray] = None) -> DiffValue:
    """
    Mean over valid texels of the channel-summed L1 distance between two maps.

    Raises:
        LossError: the maps differ in resolution
    """
    refined, base = lift(refined), lift(base)
    if refined.shape != base.shape:
        raise LossError(f"consistency_loss: resolution mismatch {refined.shape} vs {base.shape}")
    _check_map("consistency_loss", refined, valid)
    difference = abs_(refined - base)
    if valid is not None:
        difference = _masked_rows(difference, valid)
    texels = int(np.prod(difference.shape[:-1]))
    if texels == 0:
        return lift(0.0)
    return sum_(difference) / float(texels)


def laplacian_residual(values: Operand, adjacency: Adjacency) -> DiffValue:
    """
    value_i - mean(neighbours of i) for every element with at least one neighbour.

    Args:
        values: (N, C) per-element field
        adjacency: CSR neighbour lists over the N elements

    Returns:
        (M, C) residuals for the M elements that have neighbours, in index order
    """
    values = lift(values)
    n = len(values)
    degrees = adjacency.degrees
    owners = np.repeat(np.arange(n), degrees)
    neighbour_sum = index_add(owners, take(values, adjacency.indices), n)
    has_neighbours = np.flatnonzero(degrees > 0)
    mean = take(neighbour_sum, has_neighbours) / degrees[has_neighbours][:, None].astype(np.float64)
    return take(values, has_neighbours) - mean


def smoothness_loss(values: Operand, adjacency: Adjacency) -> DiffValue:
    """
    Mean over elements of ||value_i - mean(neighbours)||^2.

    Per-vertex fields use the mesh first ring; uv maps (res, res, C) are
    flattened to texels and use the 4-neighbourhood adjacency.
    """
    values = lift(values)
    if values.ndim == 3:
        values = reshape(values, (values.shape[0] * values.shape[1], values.shape[2]))
    if len(adjacency.offsets) != len(values) + 1:
        raise LossError(f"smoothness_loss: adjacency covers {len(adjacency.offsets) - 1} elements, "
                        f"field has {len(values)}")
    residual = laplacian_residual(values, adjacency)
    if len(residual) == 0:
        return lift(0.0)
    return sum_(square(residual)) / float(len(residual))
