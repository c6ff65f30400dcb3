"""
Monte-Carlo direct-illumination ray tracer (image I_S).

One primary ray per pixel centre finds the nearest triangle through the BVH.
The hit is then re-derived on the tape with a differentiable Moller-Trumbore
solve for that triangle, so barycentrics (and everything interpolated with
them) carry gradients to geometry and pose. Radiance is estimated as

    B = (1 - s) c mean_k L(w_k) V(w_k) + s mean_k L(w'_k) V(w'_k)

with w_k cosine-distributed about the shading normal and w'_k drawn from the
specular lobe about the reflection direction; both pdfs cancel the BRDF
kernels exactly. L is the clamped environment map and V a detached shadow
query against the BVH.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from core_engine.autodiff.functional import dot, normalize
from core_engine.autodiff.tape import (
    DiffValue,
    Tape,
    abs_,
    concatenate,
    cross,
    lift,
    matmul,
    reshape,
    sum_,
    take,
    transpose,
    value_of,
)
from core_engine.config import RenderConfig
from core_engine.errors import RenderError
from core_engine.lighting.envmap import ENV_SIZE, envmap_texels, lookup
from core_engine.lighting.spherical_harmonics import phong_exponent
from core_engine.raytrace.bvh import Bvh, build_bvh
from core_engine.raytrace.sampling import cosine_hemisphere, phong_lobe, to_world, uniforms
from core_engine.shading import blend, reflect, specular_intensity
from models.scene import SceneTerms

logger = logging.getLogger(__name__)

CHUNK_ROWS = 1 << 17


@dataclass
class RenderOutput:
    """
    A traced image with its per-pixel hit records.

    Per-hit arrays are ordered like `pixel_index` (row-major ids of the
    covered pixels); `radiance` holds the same values as `image` at those
    pixels, on the tape.
    """

    image: np.ndarray
    mask: np.ndarray
    pixel_index: np.ndarray
    tri_ids: np.ndarray
    bary: np.ndarray
    points: np.ndarray
    normals: np.ndarray
    uv: np.ndarray
    radiance: DiffValue
    standard_error: np.ndarray
    spp: int
    seed: int

    @property
    def shape(self) -> Tuple[int, int]:
        return self.mask.shape

    @property
    def covered(self) -> int:
        return int(self.pixel_index.size)


def camera_directions(width: int, height: int, focal: float, cx: float, cy: float) -> np.ndarray:
    """Unit camera-space directions (H * W, 3) through pixel centres, row-major."""
    cols, rows = np.meshgrid(np.arange(width) + 0.5, np.arange(height) + 0.5)
    dirs = np.stack([(cols - cx) / focal, (rows - cy) / focal, np.ones_like(cols)], axis=-1).reshape(-1, 3)
    return dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)


def intersect_triangles(origin, direction, v0, v1, v2) -> Tuple[DiffValue, DiffValue]:
    """
    Differentiable Moller-Trumbore for known ray/triangle pairs.

    Returns:
        (distance t (P, 1), barycentrics (P, 3))
    """
    direction = lift(direction)
    e1 = lift(v1) - v0
    e2 = lift(v2) - v0
    p = cross(direction, e2)
    det = dot(e1, p)
    offset = lift(origin) - v0
    u = dot(offset, p) / det
    q = cross(offset, e1)
    v = dot(direction, q) / det
    t = dot(e2, q) / det
    return t, concatenate([1.0 - u - v, u, v], axis=-1)


def geometric_normals(vertices: np.ndarray, triangles: np.ndarray, tri_ids: np.ndarray,
                      towards: np.ndarray) -> np.ndarray:
    """Unit face normals of the hit triangles, flipped into the hemisphere of `towards`."""
    corners = vertices[triangles[tri_ids]]
    face = np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0])
    face /= np.maximum(np.linalg.norm(face, axis=-1, keepdims=True), 1e-300)
    flip = np.einsum("pi,pi->p", face, towards) < 0.0
    face[flip] *= -1.0
    return face


def _visibility(bvh: Bvh, origins: np.ndarray, directions: np.ndarray, geo_normal: np.ndarray,
                deterministic: bool) -> np.ndarray:
    """Detached V in {0, 1} of shape (P, K, 1); directions below the geometric horizon count as blocked."""
    count, samples = directions.shape[:2]
    above = np.einsum("pki,pi->pk", directions, geo_normal) > 0.0
    rays_o = np.repeat(origins, samples, axis=0)
    occluded = bvh.occluded(rays_o, directions.reshape(-1, 3), 0.0, np.inf, deterministic).reshape(count, samples)
    return (above & ~occluded).astype(np.float64)[..., None]


def trace(terms: SceneTerms, config: Optional[RenderConfig] = None, spp: Optional[int] = None,
          seed: Optional[int] = None, tape: Optional[Tape] = None, bvh: Optional[Bvh] = None) -> RenderOutput:
    """
    Render I_S for a stage scene.

    Args:
        terms: assembled stage scene
        config: spp, seed, shadow and determinism options
        spp: overrides config.spp
        seed: overrides config.seed
        tape: tape receiving hit and visibility decisions
        bvh: prebuilt hierarchy for the current vertex positions

    Returns:
        RenderOutput
    """
    config = config or RenderConfig()
    spp = config.spp if spp is None else int(spp)
    seed = config.seed if seed is None else int(seed)
    if spp < 1:
        raise RenderError(f"spp must be at least 1, got {spp}")

    cam = terms.context.camera
    triangles = terms.bundle.triangles
    vertices = value_of(terms.mesh.vertices)
    rotation = value_of(terms.rotation)
    centre = value_of(terms.trans)
    bvh = bvh or build_bvh(vertices, triangles)

    dirs_cam = camera_directions(cam.width, cam.height, cam.focal, cam.cx, cam.cy)
    hits = bvh.closest_hit(centre, dirs_cam @ rotation.T, 0.0, np.inf, config.deterministic)
    if tape is not None:
        tape.decide("primary-hits", hits.tri_id)
    pixel_index = np.flatnonzero(hits.mask)
    tri_ids = hits.tri_id[pixel_index]
    count = pixel_index.size

    image = np.zeros((cam.height * cam.width, 3))
    normals_image = np.zeros((cam.height * cam.width, 3))
    std_err = np.zeros((cam.height * cam.width, 3))
    if count == 0:
        logger.debug("trace: no pixel hits the mesh")
        return RenderOutput(
            image=image.reshape(cam.height, cam.width, 3),
            mask=hits.mask.reshape(cam.height, cam.width),
            pixel_index=pixel_index,
            tri_ids=tri_ids,
            bary=np.zeros((0, 3)),
            points=np.zeros((0, 3)),
            normals=normals_image.reshape(cam.height, cam.width, 3),
            uv=np.zeros((0, 2)),
            radiance=lift(np.zeros((0, 3))),
            standard_error=std_err.reshape(cam.height, cam.width, 3),
            spp=spp,
            seed=seed,
        )

    direction = matmul(lift(dirs_cam[pixel_index]), transpose(terms.rotation))
    corners = [take(terms.mesh.vertices, triangles[tri_ids, k]) for k in range(3)]
    distance, bary = intersect_triangles(terms.trans, direction, *corners)
    surface = terms.surface(tri_ids, bary)
    view = -direction
    intensity = specular_intensity(surface.specular)
    reflection = normalize(reflect(surface.normal, view))
    points = value_of(terms.trans) + value_of(distance) * value_of(direction)

    texels = envmap_texels(terms.sh, ENV_SIZE)
    exponent = phong_exponent(terms.context.kernels.roughness)
    shading_normal = value_of(surface.normal)
    geo_normal = geometric_normals(vertices, triangles, tri_ids, shading_normal)
    shadow_origins = points + geo_normal * (config.shadow_epsilon * terms.scale())
    s_value = value_of(intensity)
    c_value = value_of(surface.diffuse)

    chunk = max(1, CHUNK_ROWS // count)
    diffuse_sum = specular_sum = None
    moment1 = np.zeros((count, 3))
    moment2 = np.zeros((count, 3))
    for start in range(0, spp, chunk):
        samples = np.arange(start, min(start + chunk, spp))
        k = samples.size
        u = uniforms(seed, pixel_index, samples, 4)
        w_diffuse = to_world(cosine_hemisphere(u[..., 0], u[..., 1]), surface.normal)
        w_specular = to_world(phong_lobe(u[..., 2], u[..., 3], exponent), reflection)
        l_diffuse = reshape(lookup(texels, reshape(w_diffuse, (count * k, 3)), tape=tape), (count, k, 3))
        l_specular = reshape(lookup(texels, reshape(w_specular, (count * k, 3)), tape=tape), (count, k, 3))
        if config.shadows:
            v_diffuse = _visibility(bvh, shadow_origins, w_diffuse.value, geo_normal, config.deterministic)
            v_specular = _visibility(bvh, shadow_origins, w_specular.value, geo_normal, config.deterministic)
            if tape is not None:
                tape.decide("shadow-rays", np.packbits(np.concatenate([v_diffuse, v_specular]) > 0))
            l_diffuse = l_diffuse * v_diffuse
            l_specular = l_specular * v_specular
        part_d = sum_(l_diffuse, axis=1)
        part_s = sum_(l_specular, axis=1)
        diffuse_sum = part_d if diffuse_sum is None else diffuse_sum + part_d
        specular_sum = part_s if specular_sum is None else specular_sum + part_s

        per_sample = (1.0 - s_value[:, None]) * c_value[:, None] * l_diffuse.value + s_value[:, None] * l_specular.value
        moment1 += per_sample.sum(axis=1)
        moment2 += (per_sample * per_sample).sum(axis=1)

    diffuse = surface.diffuse * (diffuse_sum / float(spp))
    specular = specular_sum / float(spp)
    radiance = lift(blend(diffuse, specular, intensity))

    mean = moment1 / spp
    variance = np.maximum(moment2 / spp - mean * mean, 0.0) * spp / max(spp - 1, 1)
    image[pixel_index] = radiance.value
    normals_image[pixel_index] = shading_normal
    std_err[pixel_index] = np.sqrt(variance / spp)
    logger.debug("traced %d covered pixels at %d spp (seed %d)", count, spp, seed)
    return RenderOutput(
        image=image.reshape(cam.height, cam.width, 3),
        mask=hits.mask.reshape(cam.height, cam.width),
        pixel_index=pixel_index,
        tri_ids=tri_ids,
        bary=value_of(bary),
        points=points,
        normals=normals_image.reshape(cam.height, cam.width, 3),
        uv=value_of(surface.uv),
        radiance=radiance,
        standard_error=std_err.reshape(cam.height, cam.width, 3),
        spp=spp,
        seed=seed,
    )


def ray_photo_loss(output: RenderOutput, image: np.ndarray, reduction: str = "sum") -> DiffValue:
    """
    L1 over covered pixels and channels between traced radiance and the target.

    Raises:
        RenderError: the target does not match the render's resolution
    """
    image = np.asarray(image, dtype=np.float64)
    height, width = output.shape
    if image.shape[:2] != (height, width):
        raise RenderError(f"image is {image.shape[:2]}, render is {(height, width)}")
    if output.covered == 0:
        return lift(0.0)
    target = image.reshape(height * width, -1)[output.pixel_index]
    loss = sum_(abs_(output.radiance - target))
    if reduction == "mean":
        loss = loss / float(output.covered)
    return loss
