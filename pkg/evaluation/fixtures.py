"""
Synthetic scenes with known ground truth.

A fixture is rendered by the toolkit's own forward model from sampled
parameters, so a fit on it has an exact answer to recover:

- "face": the synthetic face bundle with sampled coefficients under a side
  light. With detail it adds smooth symmetric albedo detail and
  tangent-space detail normals and renders at the fine stage; without, it
  renders at the coarse stage, which the coarse model can match exactly.
  Optionally an asymmetric shading pattern is baked into the diffuse map
  (shading-leakage experiments).
- "sphere": a convex sphere (no self-shadowing) rendered at the coarse stage.
- "blocker": a plane with a wall casting self-shadows.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Literal, Optional, Sequence, Union

import numpy as np
from scipy import ndimage

from core_engine.config import CameraConfig, FitConfig, RenderConfig, per_image_config
from core_engine.lighting.spherical_harmonics import N_COEFFS, Y00, sh_basis
from core_engine.raytrace.tracer import RenderOutput, trace
from models.camera import project_points, rotation_matrix
from models.morphable import Mesh, ModelBundle, eval_geometry, save_bundle
from models.scene import SceneContext, SceneParams, assemble_scene, project_normal_map
from models.synthetic import make_blocker_bundle, make_face_bundle, make_sphere_bundle
from preprocessing.image_io import write_landmarks, write_mask, write_obj, write_pfm, write_png

logger = logging.getLogger(__name__)

FixtureKind = Literal["face", "sphere", "blocker"]

FACE_DISTANCE = 480.0
SPHERE_DISTANCE = 250.0
BLOCKER_DISTANCE = 300.0
DETAIL_AMPLITUDE = 0.35
DETAIL_FREQUENCY = 6
BAKED_SHADOW_DEPTH = 0.35
TARGET_SPP = 256


def smooth_light(ambient: float = 0.8, direction: Sequence[float] = (0.3, -0.4, -0.85), strength: float = 0.4,
                 tint: Sequence[float] = (1.0, 0.95, 0.9)) -> np.ndarray:
    """
    Nonnegative band-limited light: a constant plus a linear lobe.

    L(w) = tint * (ambient + strength * dot(d, w)); `strength <= ambient`
    keeps the radiance nonnegative everywhere.
    """
    if strength > ambient:
        raise ValueError("strength above ambient makes the radiance negative")
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    lobe = np.zeros(N_COEFFS)
    lobe[1:4] = sh_basis(d)[1:4] * (4.0 * np.pi / 3.0)
    coeffs = np.zeros(N_COEFFS)
    coeffs[0] = ambient / Y00
    coeffs += strength * lobe
    return np.asarray(tint, dtype=np.float64)[:, None] * coeffs[None, :]


def face_light() -> np.ndarray:
    """Side-lit face light; detail normals across u change the shading visibly."""
    return smooth_light(ambient=0.6, direction=(0.6, 0.0, -0.8), strength=0.5)


def fixture_config(width: int = 128, height: Optional[int] = None, focal: Optional[float] = None, spp: int = 8,
                   seed: int = 0, shadows: bool = True) -> FitConfig:
    """The per-image profile with the camera scaled to the requested image size."""
    height = height or width
    focal = focal if focal is not None else 280.0 * width / 128.0
    camera = CameraConfig(focal=focal, cx=width / 2.0, cy=height / 2.0, width=width, height=height)
    return per_image_config().model_copy(update={
        "camera": camera,
        "render": RenderConfig(spp=spp, seed=seed, shadows=shadows),
    })


def detail_normals(resolution: int, amplitude: float = DETAIL_AMPLITUDE,
                   frequency: int = DETAIL_FREQUENCY) -> np.ndarray:
    """
    Mirror-symmetric tangent-space ripple map (res, res, 3) with unit texels.

    The ripple tilts normals across u only; the tangent x component is odd
    about u = 0.5, which is what a mirrored surface bump looks like.
    """
    centres = (np.arange(resolution) + 0.5) / resolution
    u, _ = np.meshgrid(centres, centres)
    ripple = np.stack([
        amplitude * np.sin(2.0 * np.pi * frequency * (u - 0.5)),
        np.zeros_like(u),
        np.ones_like(u),
    ], axis=-1)
    return project_normal_map(ripple)


def albedo_detail(resolution: int, rng: np.random.Generator, scale: float = 0.04) -> np.ndarray:
    """Smooth mirror-symmetric colour detail outside the model's span."""
    noise = ndimage.gaussian_filter(rng.normal(size=(resolution, resolution, 3)), sigma=(2.0, 2.0, 0.0))
    noise = 0.5 * (noise + noise[:, ::-1])
    return scale * noise / max(np.abs(noise).max(), 1e-12)


def baked_shading(resolution: int, depth: float = BAKED_SHADOW_DEPTH) -> np.ndarray:
    """Asymmetric darkening (res, res, 1): 1 on the left half, falling to 1 - depth towards the right edge."""
    centres = (np.arange(resolution) + 0.5) / resolution
    u, _ = np.meshgrid(centres, centres)
    ramp = np.clip((u - 0.5) / 0.35, 0.0, 1.0)
    return (1.0 - depth * ramp * ramp * (3.0 - 2.0 * ramp))[..., None]


@dataclass
class Fixture:
    """A rendered target with the parameters and maps that produced it."""

    kind: str
    bundle: ModelBundle
    params: SceneParams
    config: FitConfig
    stage: str
    render: RenderOutput
    landmarks: np.ndarray
    true_diffuse: Optional[np.ndarray] = None
    shading: Optional[np.ndarray] = None
    seed: int = 0

    @property
    def image(self) -> np.ndarray:
        return self.render.image

    @property
    def mask(self) -> np.ndarray:
        return self.render.mask

    @property
    def normals(self) -> np.ndarray:
        """Per-pixel shading normals of the target (zero outside the mask)."""
        return self.render.normals

    def mesh(self) -> Mesh:
        return eval_geometry(self.bundle, self.params.alpha, self.params.delta)

    def context(self) -> SceneContext:
        return SceneContext.build(self.bundle, self.config.camera, self.params.roughness)

    def save(self, out_dir: Union[str, Path]) -> Dict[str, Path]:
        """Write bundle, target, landmarks and ground truth; returns the artifact paths by role."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        truth = out_dir / "ground_truth"
        truth.mkdir(exist_ok=True)
        paths = {
            "bundle": save_bundle(self.bundle, out_dir / "bundle"),
            "target_png": write_png(out_dir / "target.png", self.image),
            "target_pfm": write_pfm(out_dir / "target.pfm", self.image),
            "mask": write_mask(out_dir / "mask.png", self.mask),
            "landmarks": write_landmarks(out_dir / "landmarks.txt", self.landmarks),
            "params": self.params.save(truth / "params.json"),
            "normals": write_pfm(truth / "normals.pfm", self.normals),
            "mesh": write_obj(truth / "mesh.obj", self.mesh().vertices, self.bundle.triangles, self.bundle.uv),
        }
        if self.true_diffuse is not None:
            paths["true_diffuse"] = write_pfm(truth / "diffuse.pfm", self.true_diffuse)
        if self.shading is not None:
            paths["shading"] = write_pfm(truth / "shading.pfm", self.shading)
        config_path = out_dir / "config.json"
        config_path.write_text(json.dumps(self.config.model_dump(mode="json"), indent=2), encoding="utf-8")
        paths["config"] = config_path
        logger.info("fixture '%s' written to %s", self.kind, out_dir)
        return paths


def project_landmarks(bundle: ModelBundle, params: SceneParams, camera: CameraConfig) -> np.ndarray:
    vertices = eval_geometry(bundle, params.alpha, params.delta).vertices
    pixels, _ = project_points(vertices[bundle.landmark_vertex_ids], rotation_matrix(params.rot).value, params.trans,
                               camera.focal, camera.cx, camera.cy)
    return np.asarray(pixels.value)


def diffuse_map(context: SceneContext, params: SceneParams, stage: str = "fine") -> np.ndarray:
    """The stage's effective diffuse uv map (unclamped) as a numpy array."""
    scene = assemble_scene(context, params.blocks(), stage)
    if scene.diffuse_map is None:
        raise ValueError(f"stage '{stage}' has no diffuse map")
    return np.asarray(scene.diffuse_map.value)


def _face_params(bundle: ModelBundle, rng: np.random.Generator, config: FitConfig, detail: bool) -> SceneParams:
    params = SceneParams.initial(bundle, trans=(0.0, 0.0, -FACE_DISTANCE), sh=face_light(),
                                 roughness=config.render.roughness)
    updates = {
        "alpha": rng.normal(0.0, 0.5, bundle.k_shape),
        "delta": rng.normal(0.0, 0.3, bundle.k_expr),
        "beta": rng.normal(0.0, 0.5, bundle.k_refl),
        "rot": rng.normal(0.0, 0.04, 3),
        "trans": params.trans + np.array([rng.uniform(-5.0, 5.0), rng.uniform(-5.0, 5.0), 0.0]),
    }
    if detail:
        res = bundle.texture_resolution
        updates["medium_diffuse_inc"] = albedo_detail(res, rng)
        updates["fine_normal_inc"] = detail_normals(res)
    return params.with_blocks(**updates)


def make_fixture(kind: FixtureKind = "face", seed: int = 7, config: Optional[FitConfig] = None,
                 bundle: Optional[ModelBundle] = None, detail: bool = True, baked: bool = False,
                 target_spp: int = TARGET_SPP) -> Fixture:
    """
    Sample ground-truth parameters and render the target.

    Args:
        kind: "face", "sphere" or "blocker"
        seed: seed for parameters and the target's Monte-Carlo samples
        config: camera and render options (`fixture_config()` when omitted)
        bundle: model bundle; the kind's synthetic default when omitted
        detail: add albedo detail and detail normals (face only)
        baked: bake an asymmetric shading pattern into the diffuse map (face only)
        target_spp: samples per pixel of the target render

    Returns:
        Fixture
    """
    config = config or fixture_config()
    rng = np.random.default_rng(seed)
    true_diffuse = shading = None
    if kind == "face":
        bundle = bundle or make_face_bundle(seed=seed)
        params = _face_params(bundle, rng, config, detail)
        stage = "fine" if detail or baked else "coarse"
    elif kind == "sphere":
        bundle = bundle or make_sphere_bundle()
        params = SceneParams.initial(bundle, trans=(0.0, 0.0, -SPHERE_DISTANCE), sh=smooth_light(),
                                     roughness=config.render.roughness)
        stage = "coarse"
    elif kind == "blocker":
        bundle = bundle or make_blocker_bundle()
        params = SceneParams.initial(bundle, trans=(0.0, 0.0, -BLOCKER_DISTANCE),
                                     sh=smooth_light(ambient=0.5, direction=(0.9, 0.0, -0.45), strength=0.5),
                                     roughness=config.render.roughness)
        stage = "coarse"
    else:
        raise ValueError(f"unknown fixture kind '{kind}'")

    context = SceneContext.build(bundle, config.camera, params.roughness)
    if kind == "face" and baked:
        true_diffuse = diffuse_map(context, params)
        shading = baked_shading(bundle.texture_resolution)
        params = params.with_blocks(medium_diffuse_inc=params.medium_diffuse_inc + true_diffuse * (shading - 1.0))
    elif kind == "face":
        true_diffuse = diffuse_map(context, params)

    scene = assemble_scene(context, params.blocks(), stage)
    render = trace(scene, config.render, spp=target_spp, seed=seed)
    landmarks = project_landmarks(bundle, params, config.camera)
    logger.info("fixture '%s' (seed %d): %d covered pixels", kind, seed, render.covered)
    return Fixture(kind=kind, bundle=bundle, params=params, config=config, stage=stage, render=render,
                   landmarks=landmarks, true_diffuse=true_diffuse, shading=shading, seed=seed)


def offset_init(fixture: Fixture, seed: int = 0, trans_offset: float = 6.0, rot_offset: float = 0.05,
                light_scale: float = 0.8) -> SceneParams:
    """
    Mean-face starting point near the truth: perturbed pose, dimmed light,
    zero coefficients and zero increments.
    """
    rng = np.random.default_rng(seed)
    truth = fixture.params
    return SceneParams.initial(
        fixture.bundle,
        trans=truth.trans + rng.normal(0.0, trans_offset, 3) * np.array([1.0, 1.0, 2.0]),
        sh=truth.sh * light_scale,
        roughness=truth.roughness,
    ).with_blocks(rot=truth.rot + rng.normal(0.0, rot_offset, 3))
