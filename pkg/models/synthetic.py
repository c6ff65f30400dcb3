"""
Procedurally generated model bundles.

Real morphable-model data is licensed, so the toolkit ships generators for
small bundles in the same format:

- `make_face_bundle`: an ellipsoidal face patch with nose, brow, eye and mouth
  relief, bilaterally symmetric bases and 68 landmark vertices.
- `make_sphere_bundle`: a closed lat-long sphere (convex, no self-shadowing).
- `make_blocker_bundle`: a back plane with a wall standing on it, for
  self-shadowing checks.

All float arrays are rounded to float32 so a saved bundle reloads bit for bit.
Model units are millimetres; surfaces face the camera along -z.
"""

import logging
import math
from typing import List, Tuple

import numpy as np

from models.morphable import N_LANDMARKS, ModelBundle

logger = logging.getLogger(__name__)

FACE_AXES = (70.0, 90.0, 60.0)
PHI_MAX = 1.1
PSI_MAX = 0.9
UV_MARGIN = 0.02


def _f32(array: np.ndarray) -> np.ndarray:
    return np.asarray(array, dtype=np.float32).astype(np.float64)


def _grid_triangles(rows: int, cols: int, offset: int = 0) -> np.ndarray:
    index = np.arange(rows * cols).reshape(rows, cols) + offset
    a, b = index[:-1, :-1].ravel(), index[:-1, 1:].ravel()
    c, d = index[1:, :-1].ravel(), index[1:, 1:].ravel()
    return np.concatenate([np.stack([a, b, c], axis=1), np.stack([b, d, c], axis=1)])


def _orient_towards(vertices: np.ndarray, triangles: np.ndarray, towards: np.ndarray) -> np.ndarray:
    """Flip triangles whose face normal points away from `towards` (per face)."""
    corners = vertices[triangles]
    normals = np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0])
    flip = np.einsum("fi,fi->f", normals, towards) < 0
    out = triangles.copy()
    out[flip] = out[flip][:, [0, 2, 1]]
    return out


def _gaussian(phi: np.ndarray, psi: np.ndarray, centre: Tuple[float, float], width: Tuple[float, float]) -> np.ndarray:
    return np.exp(-0.5 * (((phi - centre[0]) / width[0]) ** 2 + ((psi - centre[1]) / width[1]) ** 2))


def _symmetric_bump(phi, psi, centre, width):
    if centre[0] == 0.0:
        return _gaussian(phi, psi, centre, width)
    return _gaussian(phi, psi, centre, width) + _gaussian(phi, psi, (-centre[0], centre[1]), width)


def _face_surface(phi: np.ndarray, psi: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Ellipsoid points with facial relief, and the ellipsoid's outward normals."""
    a, b, c = FACE_AXES
    base = np.stack([a * np.cos(psi) * np.sin(phi), b * np.sin(psi), -c * np.cos(psi) * np.cos(phi)], axis=-1)
    outward = base / np.array([a * a, b * b, c * c])
    outward /= np.linalg.norm(outward, axis=-1, keepdims=True)
    relief = (
        22.0 * _gaussian(phi, psi, (0.0, 0.08), (0.13, 0.2))
        + 6.0 * _symmetric_bump(phi, psi, (0.33, -0.38), (0.22, 0.06))
        - 8.0 * _symmetric_bump(phi, psi, (0.33, -0.2), (0.13, 0.08))
        + 4.0 * _gaussian(phi, psi, (0.0, 0.45), (0.25, 0.06))
        + 5.0 * _gaussian(phi, psi, (0.0, 0.72), (0.3, 0.12))
    )
    return base + outward * relief[..., None], outward


def _face_landmarks() -> List[Tuple[float, float]]:
    """68 (phi, psi) landmark targets in the usual contour/brow/nose/eye/mouth order."""
    points = []
    for t in np.linspace(-1.0, 1.0, 17):
        points.append((0.92 * PHI_MAX * math.sin(t * math.pi / 2), 0.05 + 0.75 * math.cos(t * math.pi / 2)))
    for side in (-1.0, 1.0):
        for phi in np.linspace(0.6, 0.12, 5):
            points.append((side * phi, -0.4))
    for psi in np.linspace(-0.28, 0.08, 4):
        points.append((0.0, psi))
    for phi in np.linspace(-0.12, 0.12, 5):
        points.append((phi, 0.2))
    for side in (-1.0, 1.0):
        for angle in np.linspace(0.0, 2 * math.pi, 6, endpoint=False):
            points.append((side * 0.33 + 0.12 * math.cos(angle + math.pi), -0.2 + 0.05 * math.sin(angle)))
    for angle in np.linspace(0.0, 2 * math.pi, 12, endpoint=False):
        points.append((0.25 * math.cos(angle + math.pi), 0.45 + 0.08 * math.sin(angle)))
    for angle in np.linspace(0.0, 2 * math.pi, 8, endpoint=False):
        points.append((0.15 * math.cos(angle + math.pi), 0.45 + 0.03 * math.sin(angle)))
    return points


def _smooth_fields(phi, psi, rng: np.random.Generator, count: int, width_range=(0.15, 0.4)) -> np.ndarray:
    """Random mirror-symmetric scalar fields over the face grid, (count, ...)."""
    if count == 0:
        return np.zeros((0,) + np.shape(phi))
    fields = []
    for _ in range(count):
        centre = (abs(rng.uniform(-0.7, 0.7)), rng.uniform(-0.7, 0.7))
        width = (rng.uniform(*width_range), rng.uniform(*width_range))
        field = _symmetric_bump(phi, psi, centre, width)
        fields.append(field / np.abs(field).max())
    return np.stack(fields)


def make_face_bundle(rows: int = 51, cols: int = 61, k_shape: int = 8, k_expr: int = 6, k_refl: int = 8,
                     texture_resolution: int = 64, seed: int = 0) -> ModelBundle:
    """
    Synthetic face-patch bundle.

    Args:
        rows: vertex rows (along psi / v)
        cols: vertex columns (along phi / u); odd keeps a centre column
        k_shape: identity basis size
        k_expr: expression basis size
        k_refl: reflectance basis size
        texture_resolution: uv map side length
        seed: seed for the random basis fields

    Returns:
        Validated ModelBundle
    """
    rng = np.random.default_rng(seed)
    u = UV_MARGIN + (1.0 - 2 * UV_MARGIN) * np.arange(cols) / (cols - 1)
    v = UV_MARGIN + (1.0 - 2 * UV_MARGIN) * np.arange(rows) / (rows - 1)
    uu, vv = np.meshgrid(u, v)
    phi = (uu - 0.5) / (0.5 - UV_MARGIN) * PHI_MAX
    psi = (vv - 0.5) / (0.5 - UV_MARGIN) * PSI_MAX
    # exact mirror symmetry of the parameter grid
    phi = 0.5 * (phi - phi[:, ::-1])

    surface, outward = _face_surface(phi, psi)
    vertices = surface.reshape(-1, 3)
    normals = outward.reshape(-1, 3)
    n = len(vertices)

    triangles = _grid_triangles(rows, cols)
    towards_camera = np.tile([0.0, 0.0, -1.0], (len(triangles), 1))
    triangles = _orient_towards(vertices, triangles, towards_camera)

    index = np.arange(n).reshape(rows, cols)
    mirror = index[:, ::-1].ravel()

    # identity: symmetric normal displacements plus a width mode
    shape_fields = _smooth_fields(phi, psi, rng, max(k_shape - 1, 0))
    shape_columns = [(normals * 4.0 * f.reshape(-1, 1)).ravel() for f in shape_fields]
    if k_shape > 0:
        width_mode = np.zeros_like(vertices)
        width_mode[:, 0] = 0.06 * vertices[:, 0]
        shape_columns.insert(0, width_mode.ravel())
    shape_basis = np.stack(shape_columns[:k_shape], axis=1) if k_shape else np.zeros((3 * n, 0))

    expr_fields = _smooth_fields(phi, psi, rng, k_expr, width_range=(0.1, 0.25))
    expr_basis = (np.stack([(normals * 5.0 * f.reshape(-1, 1)).ravel() for f in expr_fields], axis=1)
                  if k_expr else np.zeros((3 * n, 0)))

    skin = np.array([0.72, 0.52, 0.42])
    lips = _gaussian(phi, psi, (0.0, 0.45), (0.22, 0.05)).reshape(-1, 1)
    brows = _symmetric_bump(phi, psi, (0.33, -0.38), (0.2, 0.04)).reshape(-1, 1)
    mean_diffuse = skin + lips * np.array([0.1, -0.18, -0.12]) - brows * np.array([0.35, 0.28, 0.24])
    tint = rng.uniform(-1.0, 1.0, size=(k_refl, 3))
    refl_fields = _smooth_fields(phi, psi, rng, k_refl)
    diffuse_basis = (np.stack([(0.05 * f.reshape(-1, 1) * t).ravel() for f, t in zip(refl_fields, tint)], axis=1)
                     if k_refl else np.zeros((3 * n, 0)))
    t_zone = _gaussian(phi, psi, (0.0, -0.1), (0.15, 0.45)).reshape(-1, 1)
    mean_specular = np.repeat(0.15 + 0.1 * t_zone, 3, axis=1)
    specular_basis = (np.stack([(0.02 * f.reshape(-1, 1) * np.ones(3)).ravel() for f in refl_fields], axis=1)
                      if k_refl else np.zeros((3 * n, 0)))

    landmark_ids = []
    for target_phi, target_psi in _face_landmarks():
        distance = (phi - target_phi) ** 2 + (psi - target_psi) ** 2
        landmark_ids.append(int(np.argmin(distance)))

    bundle = ModelBundle(
        mean_shape=_f32(vertices.ravel()),
        shape_basis=_f32(shape_basis),
        expr_basis=_f32(expr_basis),
        mean_diffuse=_f32(mean_diffuse.ravel()),
        diffuse_basis=_f32(diffuse_basis),
        mean_specular=_f32(mean_specular.ravel()),
        specular_basis=_f32(specular_basis),
        prior_var_shape=np.ones(k_shape),
        prior_var_refl=np.ones(k_refl),
        triangles=triangles.astype(np.int64),
        uv=_f32(np.stack([uu.ravel(), vv.ravel()], axis=1)),
        landmark_vertex_ids=np.asarray(landmark_ids, dtype=np.int64),
        mirror=mirror.astype(np.int64),
        texture_resolution=texture_resolution,
    )
    bundle.validate()
    logger.info("generated face bundle: N=%d, F=%d", n, len(triangles))
    return bundle


def _constant_bases(n: int, diffuse, specular) -> dict:
    return dict(
        shape_basis=np.zeros((3 * n, 1)),
        expr_basis=np.zeros((3 * n, 1)),
        mean_diffuse=_f32(np.tile(diffuse, n)),
        diffuse_basis=np.zeros((3 * n, 1)),
        mean_specular=_f32(np.tile(specular, n)),
        specular_basis=np.zeros((3 * n, 1)),
        prior_var_shape=np.ones(1),
        prior_var_refl=np.ones(1),
    )


def make_sphere_bundle(radius: float = 50.0, rings: int = 24, segments: int = 48, albedo: float = 1.0,
                       specular: float = 0.0, texture_resolution: int = 32) -> ModelBundle:
    """Closed sphere centred at the origin with a lat-long uv layout (seam duplicated)."""
    theta = np.arange(1, rings) * math.pi / rings
    phi = -math.pi + np.arange(segments + 1) * 2.0 * math.pi / segments
    pp, tt = np.meshgrid(phi, theta)
    ring_vertices = radius * np.stack([np.sin(tt) * np.sin(pp), -np.cos(tt), -np.sin(tt) * np.cos(pp)], axis=-1)
    cols = segments + 1
    rows = rings - 1
    uv_rings = np.stack([(pp + math.pi) / (2 * math.pi), tt / math.pi], axis=-1)

    top, bottom = rows * cols, rows * cols + 1
    vertices = np.concatenate([ring_vertices.reshape(-1, 3), [[0.0, -radius, 0.0], [0.0, radius, 0.0]]])
    uv = np.concatenate([uv_rings.reshape(-1, 2), [[0.5, 0.0], [0.5, 1.0]]])
    triangles = [_grid_triangles(rows, cols)]
    first, last = np.arange(cols - 1), (rows - 1) * cols + np.arange(cols - 1)
    triangles.append(np.stack([np.full(cols - 1, top), first + 1, first], axis=1))
    triangles.append(np.stack([np.full(cols - 1, bottom), last, last + 1], axis=1))
    triangles = np.concatenate(triangles)
    corners = vertices[triangles]
    triangles = _orient_towards(vertices, triangles, corners.mean(axis=1))

    index = np.arange(rows * cols).reshape(rows, cols)
    mirror = np.concatenate([index[:, ::-1].ravel(), [top, bottom]])
    n = len(vertices)
    front = np.argsort(vertices[:, 2])[:N_LANDMARKS]
    bundle = ModelBundle(
        mean_shape=_f32(vertices.ravel()),
        triangles=triangles.astype(np.int64),
        uv=_f32(np.clip(uv, 0.0, 1.0)),
        landmark_vertex_ids=front.astype(np.int64),
        mirror=mirror.astype(np.int64),
        texture_resolution=texture_resolution,
        **_constant_bases(n, [albedo] * 3, [specular] * 3),
    )
    bundle.validate()
    return bundle


def make_blocker_bundle(size: float = 120.0, wall_height: float = 50.0, rows: int = 25, cols: int = 25,
                        albedo: float = 0.8, texture_resolution: int = 32) -> ModelBundle:
    """
    Back plane at z = 0 facing the camera, with a wall in the x = 0 plane
    reaching from the plane towards the camera.
    """
    half = size / 2.0
    xs = np.linspace(-half, half, cols)
    ys = np.linspace(-half, half, rows)
    gx, gy = np.meshgrid(xs, ys)
    plane = np.stack([gx, gy, np.zeros_like(gx)], axis=-1).reshape(-1, 3)
    plane_uv = np.stack([0.02 + 0.56 * (gx + half) / size, 0.02 + 0.96 * (gy + half) / size], axis=-1).reshape(-1, 2)

    wall_cols = max(rows // 2, 3)
    zs = np.linspace(0.0, -wall_height, wall_cols)
    wz, wy = np.meshgrid(zs, ys)
    wall = np.stack([np.zeros_like(wz), wy, wz], axis=-1).reshape(-1, 3)
    wall_uv = np.stack([0.62 + 0.36 * (-wz) / wall_height, 0.02 + 0.96 * (wy + half) / size], axis=-1).reshape(-1, 2)

    plane_tris = _grid_triangles(rows, cols)
    plane_tris = _orient_towards(plane, plane_tris, np.tile([0.0, 0.0, -1.0], (len(plane_tris), 1)))
    vertices = np.concatenate([plane, wall])
    wall_tris = _grid_triangles(rows, wall_cols, offset=len(plane))
    wall_tris = _orient_towards(vertices, wall_tris, np.tile([1.0, 0.0, 0.0], (len(wall_tris), 1)))
    triangles = np.concatenate([plane_tris, wall_tris])

    plane_index = np.arange(rows * cols).reshape(rows, cols)
    mirror = np.concatenate([plane_index[:, ::-1].ravel(), len(plane) + np.arange(len(wall))])
    n = len(vertices)
    bundle = ModelBundle(
        mean_shape=_f32(vertices.ravel()),
        triangles=triangles.astype(np.int64),
        uv=_f32(np.concatenate([plane_uv, wall_uv])),
        landmark_vertex_ids=np.arange(N_LANDMARKS, dtype=np.int64),
        mirror=mirror.astype(np.int64),
        texture_resolution=texture_resolution,
        **_constant_bases(n, [albedo] * 3, [0.0] * 3),
    )
    bundle.validate()
    return bundle
