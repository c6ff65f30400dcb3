"""
Vertex-based differentiable renderer.

Each vertex is shaded analytically and compared with the input image sampled
(bilinearly, so differentiably in the projected position) where the vertex
projects. Only visible vertices take part: front-facing, inside the image and
not hidden behind the front-most triangle of the depth buffer. Visibility is
a detached decision.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from core_engine.autodiff.functional import bilinear_sample, normalize
from core_engine.autodiff.tape import DiffValue, Tape, abs_, lift, square, sum_, take, value_of
from core_engine.errors import LossError, RenderError
from core_engine.raster.rasterizer import Fragments, rasterize
from core_engine.shading import shade_points
from models.camera import project_points
from models.morphable import N_LANDMARKS, scene_scale
from models.scene import SceneTerms

logger = logging.getLogger(__name__)

OCCLUSION_TOLERANCE = 1e-3
TAP_DEPTH_TOLERANCE = 0.01


@dataclass
class Projection:
    """Camera-space view of the mesh for one evaluation (plain arrays)."""

    pixels: np.ndarray
    depth: np.ndarray
    camera_points: np.ndarray
    fragments: Fragments


def _camera_points(terms: SceneTerms) -> np.ndarray:
    vertices = value_of(terms.mesh.vertices)
    return (vertices - value_of(terms.trans)) @ value_of(terms.rotation)


def project_mesh(terms: SceneTerms) -> Projection:
    cam = terms.context.camera
    points = _camera_points(terms)
    z = points[:, 2]
    safe = np.where(z > 0, z, 1.0)
    pixels = np.stack([points[:, 0] / safe * cam.focal + cam.cx, points[:, 1] / safe * cam.focal + cam.cy], axis=1)
    fragments = rasterize(pixels, z, terms.bundle.triangles, cam.width, cam.height)
    return Projection(pixels=pixels, depth=z, camera_points=points, fragments=fragments)


def rasterize_depth(terms: SceneTerms) -> Fragments:
    """Nearest camera-space depth per pixel (inf where empty), ties to the lower triangle."""
    return project_mesh(terms).fragments


def occlusion_mask(sample_points: np.ndarray, sample_pixels: np.ndarray, projection: Projection,
                   triangles: np.ndarray, tolerance: float) -> np.ndarray:
    """
    True where a camera-space sample is not behind the front-most triangle at its pixel.

    The front triangle's plane is intersected with the sample's own camera
    ray, so samples on the front surface pass regardless of depth-buffer
    discretisation.
    """
    height, width = projection.fragments.shape
    cols = np.floor(sample_pixels[:, 0]).astype(np.int64)
    rows = np.floor(sample_pixels[:, 1]).astype(np.int64)
    inside = (cols >= 0) & (cols < width) & (rows >= 0) & (rows < height)
    visible = np.zeros(len(sample_points), dtype=bool)
    front = np.full(len(sample_points), -1, dtype=np.int64)
    front[inside] = projection.fragments.tri_id[rows[inside], cols[inside]]
    visible[inside & (front < 0)] = True

    check = np.flatnonzero(inside & (front >= 0))
    corners = projection.camera_points[triangles[front[check]]]
    plane_normal = np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0])
    points = sample_points[check]
    rays = points / points[:, 2:3]
    denom = np.einsum("pi,pi->p", plane_normal, rays)
    numer = np.einsum("pi,pi->p", plane_normal, corners[:, 0])
    grazing = np.abs(denom) < 1e-12
    plane_depth = np.where(grazing, np.inf, numer / np.where(grazing, 1.0, denom))
    plane_depth = np.where(plane_depth > 0, plane_depth, np.inf)
    visible[check] = points[:, 2] <= plane_depth + tolerance
    return visible


def vertex_visibility(terms: SceneTerms, projection: Optional[Projection] = None) -> np.ndarray:
    """Front-facing, in-image, unoccluded vertices."""
    projection = projection or project_mesh(terms)
    vertices = value_of(terms.mesh.vertices)
    normals = value_of(terms.mesh.normals)
    cam = terms.context.camera
    towards_camera = value_of(terms.trans) - vertices
    front_facing = np.einsum("ni,ni->n", normals, towards_camera) > 0
    in_front = projection.depth > 0
    px, py = projection.pixels[:, 0], projection.pixels[:, 1]
    in_image = (px >= 0) & (px < cam.width) & (py >= 0) & (py < cam.height)
    candidates = front_facing & in_front & in_image
    visible = np.zeros(len(vertices), dtype=bool)
    idx = np.flatnonzero(candidates)
    tolerance = OCCLUSION_TOLERANCE * scene_scale(vertices)
    visible[idx] = occlusion_mask(projection.camera_points[idx], projection.pixels[idx], projection,
                                  terms.bundle.triangles, tolerance)
    return visible


def shade_vertices(terms: SceneTerms) -> DiffValue:
    """Clamped analytic radiance (N, 3) at every vertex."""
    surface = terms.vertex_surface()
    view = normalize(terms.trans - terms.mesh.vertices)
    return lift(shade_points(terms.sh, terms.context.kernels, surface.normal, surface.diffuse,
                             surface.specular, view))


def vertex_photo_loss(terms: SceneTerms, image: np.ndarray, reduction: str = "sum",
                      tape: Optional[Tape] = None) -> Tuple[DiffValue, np.ndarray]:
    """
    Sum (or mean) over visible vertices of |B_i - I(projection of v_i)|, L1 over channels.

    Args:
        terms: stage scene
        image: (H, W, 3) linear target
        reduction: "sum" or "mean" (divide by the visible vertex count)
        tape: tape receiving the visibility decision

    Returns:
        (loss, visibility mask)
    """
    cam = terms.context.camera
    image = np.asarray(image, dtype=np.float64)
    if image.shape[:2] != (cam.height, cam.width):
        raise RenderError(f"image is {image.shape[:2]}, camera expects {(cam.height, cam.width)}")
    projection = project_mesh(terms)
    visible = vertex_visibility(terms, projection)
    if tape is not None:
        tape.decide("vertex-visibility", visible)
    idx = np.flatnonzero(visible)
    if idx.size == 0:
        raise RenderError("no visible vertices (degenerate pose)")

    pixels, _ = project_points(take(terms.mesh.vertices, idx), terms.rotation, terms.trans,
                               cam.focal, cam.cx, cam.cy)
    sampled = bilinear_sample(image, pixels[:, 0] - 0.5, pixels[:, 1] - 0.5, tape=tape, name="image-lookup")
    shaded = take(shade_vertices(terms), idx)
    loss = sum_(abs_(shaded - sampled))
    if reduction == "mean":
        loss = loss / float(idx.size)
    return loss, visible


def landmark_loss(terms: SceneTerms, landmarks: np.ndarray) -> DiffValue:
    """Mean squared pixel distance between the 68 landmarks and their projected vertices."""
    landmarks = np.asarray(landmarks, dtype=np.float64)
    if landmarks.shape != (N_LANDMARKS, 2):
        raise LossError(f"expected {N_LANDMARKS} x 2 landmarks, got {landmarks.shape}")
    cam = terms.context.camera
    points = take(terms.mesh.vertices, terms.bundle.landmark_vertex_ids)
    pixels, _ = project_points(points, terms.rotation, terms.trans, cam.focal, cam.cx, cam.cy)
    return sum_(square(pixels - landmarks)) / float(N_LANDMARKS)


@dataclass
class UVProjection:
    """Input image resampled into uv space, with the texels that could be filled."""

    texture: np.ndarray
    valid: np.ndarray


def project_to_uv(image: np.ndarray, terms: SceneTerms) -> UVProjection:
    """
    Resample the image at each texel's surface point.

    A texel is valid when its surface point is front-facing, unoccluded, and
    all four bilinear taps fall on covered pixels whose depth is within 1 % of
    the point's depth.
    """
    image = np.asarray(image, dtype=np.float64)
    atlas = terms.context.atlas
    triangles = terms.bundle.triangles
    cam = terms.context.camera
    res = atlas.resolution
    projection = project_mesh(terms)

    covered = np.flatnonzero(atlas.coverage.ravel())
    tri_ids = atlas.tri_id.ravel()[covered]
    bary = atlas.bary.reshape(-1, 3)[covered]
    vertices = value_of(terms.mesh.vertices)
    normals = value_of(terms.mesh.normals)
    world = np.einsum("pk,pki->pi", bary, vertices[triangles[tri_ids]])
    normal = np.einsum("pk,pki->pi", bary, normals[triangles[tri_ids]])
    points = np.einsum("pi,ij->pj", world - value_of(terms.trans), value_of(terms.rotation))
    z = points[:, 2]
    safe = np.where(z > 0, z, 1.0)
    pixels = np.stack([points[:, 0] / safe * cam.focal + cam.cx, points[:, 1] / safe * cam.focal + cam.cy], axis=1)

    valid = (z > 0) & (np.einsum("pi,pi->p", normal, value_of(terms.trans) - world) > 0)
    tolerance = OCCLUSION_TOLERANCE * scene_scale(vertices)
    candidates = np.flatnonzero(valid)
    valid[candidates] = occlusion_mask(points[candidates], pixels[candidates], projection, triangles, tolerance)

    depth = projection.fragments.depth
    col0 = np.floor(pixels[:, 0] - 0.5).astype(np.int64)
    row0 = np.floor(pixels[:, 1] - 0.5).astype(np.int64)
    for d_row in (0, 1):
        for d_col in (0, 1):
            rows, cols = row0 + d_row, col0 + d_col
            inside = (rows >= 0) & (rows < cam.height) & (cols >= 0) & (cols < cam.width)
            tap = np.full(len(z), np.inf)
            tap[inside] = depth[rows[inside], cols[inside]]
            valid &= inside & np.isfinite(tap) & (np.abs(tap - z) <= TAP_DEPTH_TOLERANCE * np.abs(z))

    texture = np.zeros((res * res, image.shape[-1]))
    keep = np.flatnonzero(valid)
    if keep.size:
        samples = bilinear_sample(image, pixels[keep, 0] - 0.5, pixels[keep, 1] - 0.5)
        texture[covered[keep]] = samples.value
    mask = np.zeros(res * res, dtype=bool)
    mask[covered[keep]] = True
    logger.debug("uv projection: %d of %d covered texels valid", keep.size, covered.size)
    return UVProjection(texture=texture.reshape(res, res, -1), valid=mask.reshape(res, res))


def render_vertex_image(terms: SceneTerms) -> Tuple[np.ndarray, np.ndarray]:
    """
    Image I_R: per-vertex shaded radiance interpolated over rasterized triangles.

    Returns:
        (image (H, W, 3), coverage mask (H, W))
    """
    cam = terms.context.camera
    fragments = rasterize_depth(terms)
    radiance = value_of(shade_vertices(terms))
    image = np.zeros((cam.height, cam.width, 3))
    mask = fragments.mask
    corners = radiance[terms.bundle.triangles[fragments.tri_id[mask]]]
    image[mask] = np.einsum("pk,pkc->pc", fragments.bary[mask], corners)
    return image, mask
