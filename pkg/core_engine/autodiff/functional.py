"""
Composite differentiable helpers built from tape primitives.

Every helper accepts numpy arrays or DiffValues; numpy-only inputs produce
constant DiffValues, so callers read `.value` when they need plain arrays.
"""

from typing import Optional, Tuple

import numpy as np

from core_engine.autodiff.tape import (
    DiffValue,
    Operand,
    Tape,
    clip,
    lift,
    reshape,
    sqrt,
    square,
    stack,
    sum_,
    take,
    value_of,
)


def dot(a: Operand, b: Operand, keepdims: bool = True) -> DiffValue:
    """Dot product along the last axis."""
    return sum_(lift(a) * b, axis=-1, keepdims=keepdims)


def norm(a: Operand, keepdims: bool = True) -> DiffValue:
    return sqrt(sum_(square(a), axis=-1, keepdims=keepdims))


def normalize(a: Operand) -> DiffValue:
    """Scale vectors along the last axis to unit length."""
    a = lift(a)
    return a / norm(a)


def components(a: Operand) -> Tuple[DiffValue, DiffValue, DiffValue]:
    """Split (..., 3) into three (...) component values."""
    a = lift(a)
    return a[..., 0], a[..., 1], a[..., 2]


def bilinear_sample(table: Operand,
                    x: Operand,
                    y: Operand,
                    wrap_x: bool = False,
                    tape: Optional[Tape] = None,
                    name: str = "bilinear") -> DiffValue:
    """
    Bilinearly sample an (H, W, C) table at continuous texel coordinates.

    Texel (i, j) has its centre at (x=j, y=i). Rows are clamped to the edge;
    columns are clamped too unless `wrap_x` is set. Gradients flow to the
    table entries and to the coordinates through the interpolation weights;
    the chosen cells are recorded as discrete decisions.

    Args:
        table: (H, W, C) values
        x: column coordinates of any shape S
        y: row coordinates of shape S
        wrap_x: wrap columns around (longitude lookups)
        tape: tape receiving the lookup-cell decision
        name: decision label

    Returns:
        Samples of shape S + (C,)
    """
    table = lift(table)
    height, width, channels = table.value.shape
    x, y = lift(x), lift(y)

    y = clip(y, 0.0, height - 1.0)
    row0 = np.clip(np.floor(y.value), 0, max(height - 2, 0)).astype(np.int64)
    row1 = np.minimum(row0 + 1, height - 1)
    fy = y - row0

    if wrap_x:
        col0_raw = np.floor(x.value).astype(np.int64)
        fx = x - col0_raw
        col0 = np.mod(col0_raw, width)
        col1 = np.mod(col0_raw + 1, width)
    else:
        x = clip(x, 0.0, width - 1.0)
        col0 = np.clip(np.floor(x.value), 0, max(width - 2, 0)).astype(np.int64)
        col1 = np.minimum(col0 + 1, width - 1)
        fx = x - col0

    if tape is not None:
        tape.decide(name, np.stack([row0, col0]))

    flat = reshape(table, (height * width, channels))
    fx = reshape(fx, fx.shape + (1,))
    fy = reshape(fy, fy.shape + (1,))
    top = take(flat, row0 * width + col0) * (1.0 - fx) + take(flat, row0 * width + col1) * fx
    bottom = take(flat, row1 * width + col0) * (1.0 - fx) + take(flat, row1 * width + col1) * fx
    return top * (1.0 - fy) + bottom * fy


def interpolate_corners(values: Operand, triangles: np.ndarray, tri_ids: np.ndarray, bary: Operand) -> DiffValue:
    """
    Barycentric interpolation of per-vertex values over selected triangles.

    Args:
        values: (N, C) per-vertex values
        triangles: (F, 3) vertex indices
        tri_ids: (P,) triangle per sample
        bary: (P, 3) barycentric weights

    Returns:
        (P, C) interpolated values
    """
    corners = take(values, triangles[tri_ids])
    bary = lift(bary)
    weights = reshape(bary, bary.shape + (1,))
    return sum_(corners * weights, axis=1)


def as_array(x: Operand) -> np.ndarray:
    return np.asarray(value_of(x))


def stack_last(items) -> DiffValue:
    return stack(items, axis=-1)
