"""
Scene parameters and their per-stage assembly into renderable terms.

`SceneParams` holds the optimised unknowns as numpy arrays. `assemble_scene`
turns a dictionary of parameter blocks (numpy arrays or tape values) into a
`SceneTerms` for one stage: the evaluated mesh, pose, light, and the albedo
and normal sources the renderers sample.

Stage maps:
    coarse  per-vertex albedos c, s (clamped to [0, 1])
    medium  D_hat = bake(c) + medium_diffuse_inc, S_hat = bake(s) + medium_specular_inc
    fine    D_bar = D_hat + fine_diffuse_inc, S_bar = S_hat + fine_specular_inc,
            shading normals from the tangent-space map fine_normal_inc
"""

import json
import logging
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np

from core_engine.autodiff.functional import interpolate_corners, normalize
from core_engine.autodiff.tape import DiffValue, Operand, Tape, clip, lift, value_of
from core_engine.config import CameraConfig
from core_engine.errors import BundleDimensionError
from core_engine.lighting.spherical_harmonics import N_COEFFS, ConvolvedKernels, SHLight
from core_engine.shading import map_normals
from models.camera import rotation_matrix
from models.morphable import Adjacency, Mesh, ModelBundle, eval_albedos, eval_geometry, mesh_adjacency, scene_scale
from models.uvmap import UVAtlas, bake_vertex_attribute, build_atlas, grid_adjacency, sample_uv_map

logger = logging.getLogger(__name__)

MAP_BLOCKS = ("medium_diffuse_inc", "medium_specular_inc", "fine_normal_inc", "fine_diffuse_inc", "fine_specular_inc")
MIN_NORMAL_Z = 1e-3


@dataclass
class SceneParams:
    """Optimised unknowns: coefficients, pose, light and per-stage uv increments."""

    alpha: np.ndarray
    delta: np.ndarray
    beta: np.ndarray
    rot: np.ndarray
    trans: np.ndarray
    sh: np.ndarray
    medium_diffuse_inc: np.ndarray
    medium_specular_inc: np.ndarray
    fine_normal_inc: np.ndarray
    fine_diffuse_inc: np.ndarray
    fine_specular_inc: np.ndarray
    roughness: float = 0.5

    @classmethod
    def initial(cls, bundle: ModelBundle, trans=(0.0, 0.0, 0.0), sh: Optional[np.ndarray] = None,
                roughness: float = 0.5) -> "SceneParams":
        res = bundle.texture_resolution
        flat_normal = np.zeros((res, res, 3))
        flat_normal[..., 2] = 1.0
        return cls(
            alpha=np.zeros(bundle.k_shape),
            delta=np.zeros(bundle.k_expr),
            beta=np.zeros(bundle.k_refl),
            rot=np.zeros(3),
            trans=np.asarray(trans, dtype=np.float64).copy(),
            sh=np.zeros((3, N_COEFFS)) if sh is None else np.asarray(sh, dtype=np.float64).copy(),
            medium_diffuse_inc=np.zeros((res, res, 3)),
            medium_specular_inc=np.zeros((res, res, 3)),
            fine_normal_inc=flat_normal,
            fine_diffuse_inc=np.zeros((res, res, 3)),
            fine_specular_inc=np.zeros((res, res, 3)),
            roughness=roughness,
        )

    def blocks(self) -> Dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "roughness"}

    def with_blocks(self, **updates: np.ndarray) -> "SceneParams":
        return replace(self, **{name: np.array(value, dtype=np.float64) for name, value in updates.items()})

    def copy(self) -> "SceneParams":
        return self.with_blocks(**self.blocks())

    @property
    def light(self) -> SHLight:
        return SHLight(self.sh)

    def validate(self, bundle: Optional[ModelBundle] = None, tol: float = 1e-6) -> None:
        for name, value in self.blocks().items():
            if not np.all(np.isfinite(value)):
                raise ValueError(f"scene parameter '{name}' holds non-finite values")
        if bundle is not None:
            expected = {"alpha": (bundle.k_shape,), "delta": (bundle.k_expr,), "beta": (bundle.k_refl,)}
            for name, shape in expected.items():
                if getattr(self, name).shape != shape:
                    raise BundleDimensionError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        lengths = np.linalg.norm(self.fine_normal_inc, axis=-1)
        if np.any(np.abs(lengths - 1.0) > tol) or np.any(self.fine_normal_inc[..., 2] <= 0):
            raise ValueError("fine_normal_inc texels must be unit vectors with positive z")

    def to_dict(self) -> Dict[str, Any]:
        data = {name: value.tolist() for name, value in self.blocks().items()}
        data["roughness"] = self.roughness
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SceneParams":
        values = {f.name: np.asarray(data[f.name], dtype=np.float64) for f in fields(cls) if f.name != "roughness"}
        return cls(roughness=float(data.get("roughness", 0.5)), **values)

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict()), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "SceneParams":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def project_normal_map(normal_map: np.ndarray) -> np.ndarray:
    """Renormalise tangent-space texels and keep them in the upper hemisphere."""
    out = np.array(normal_map, dtype=np.float64)
    out[..., 2] = np.maximum(out[..., 2], MIN_NORMAL_Z)
    return out / np.linalg.norm(out, axis=-1, keepdims=True)


@dataclass
class SceneContext:
    """Per-bundle precomputation shared by every evaluation of a fit."""

    bundle: ModelBundle
    camera: CameraConfig
    kernels: ConvolvedKernels
    atlas: UVAtlas
    vertex_adjacency: Adjacency
    texel_adjacency: Adjacency

    @classmethod
    def build(cls, bundle: ModelBundle, camera: CameraConfig, roughness: float) -> "SceneContext":
        atlas = build_atlas(bundle)
        return cls(
            bundle=bundle,
            camera=camera,
            kernels=ConvolvedKernels.for_roughness(roughness),
            atlas=atlas,
            vertex_adjacency=mesh_adjacency(bundle.triangles, bundle.n_vertices),
            texel_adjacency=grid_adjacency(atlas.resolution, atlas.coverage),
        )


@dataclass
class Surface:
    """Shading inputs at a batch of surface samples."""

    normal: DiffValue
    diffuse: DiffValue
    specular: DiffValue
    uv: DiffValue


@dataclass
class SceneTerms:
    """A stage's scene evaluated from parameter blocks."""

    stage: str
    context: SceneContext
    mesh: Mesh
    rotation: DiffValue
    trans: DiffValue
    sh: DiffValue
    vertex_diffuse: DiffValue
    vertex_specular: DiffValue
    diffuse_base: Optional[DiffValue] = None
    specular_base: Optional[DiffValue] = None
    diffuse_map: Optional[DiffValue] = None
    specular_map: Optional[DiffValue] = None
    normal_map: Optional[DiffValue] = None
    medium_diffuse: Optional[DiffValue] = None
    medium_specular: Optional[DiffValue] = None
    tape: Optional[Tape] = None

    @property
    def bundle(self) -> ModelBundle:
        return self.context.bundle

    @property
    def uses_maps(self) -> bool:
        return self.diffuse_map is not None

    def scale(self) -> float:
        return scene_scale(value_of(self.mesh.vertices))

    def _shading_normal(self, tangents, bitangents, normals, uv) -> DiffValue:
        if self.normal_map is None:
            return normalize(normals)
        texels = sample_uv_map(self.normal_map, uv, tape=self.tape)
        return lift(map_normals(tangents, bitangents, normals, texels))

    def _albedos(self, uv, vertex_diffuse, vertex_specular):
        if not self.uses_maps:
            return vertex_diffuse, vertex_specular
        diffuse = clip(sample_uv_map(self.diffuse_map, uv, tape=self.tape), 0.0, 1.0)
        specular = clip(sample_uv_map(self.specular_map, uv, tape=self.tape), 0.0, 1.0)
        return diffuse, specular

    def vertex_surface(self) -> Surface:
        """Shading inputs at every mesh vertex."""
        uv = lift(self.bundle.uv)
        normal = self._shading_normal(self.mesh.tangents, self.mesh.bitangents, self.mesh.normals, uv)
        diffuse, specular = self._albedos(uv, self.vertex_diffuse, self.vertex_specular)
        return Surface(normal=normal, diffuse=diffuse, specular=specular, uv=uv)

    def surface(self, tri_ids: np.ndarray, bary: Operand) -> Surface:
        """Shading inputs at points given by triangle ids and barycentrics."""
        triangles = self.bundle.triangles
        uv = interpolate_corners(self.bundle.uv, triangles, tri_ids, bary)
        normals = normalize(interpolate_corners(self.mesh.normals, triangles, tri_ids, bary))
        tangents = bitangents = None
        if self.normal_map is not None:
            tangents = normalize(interpolate_corners(self.mesh.tangents, triangles, tri_ids, bary))
            bitangents = normalize(interpolate_corners(self.mesh.bitangents, triangles, tri_ids, bary))
        normal = self._shading_normal(tangents, bitangents, normals, uv)
        vertex_diffuse = vertex_specular = None
        if not self.uses_maps:
            vertex_diffuse = interpolate_corners(self.vertex_diffuse, triangles, tri_ids, bary)
            vertex_specular = interpolate_corners(self.vertex_specular, triangles, tri_ids, bary)
        diffuse, specular = self._albedos(uv, vertex_diffuse, vertex_specular)
        return Surface(normal=normal, diffuse=diffuse, specular=specular, uv=uv)


def assemble_scene(context: SceneContext, blocks: Dict[str, Operand], stage: str,
                   tape: Optional[Tape] = None) -> SceneTerms:
    """
    Evaluate the stage's scene from parameter blocks.

    Args:
        context: per-bundle precomputation
        blocks: every SceneParams block, trainable ones as tape values
        stage: "coarse", "medium" or "fine"
        tape: tape receiving discrete decisions

    Returns:
        SceneTerms
    """
    bundle = context.bundle
    alpha, delta, beta = lift(blocks["alpha"]), lift(blocks["delta"]), lift(blocks["beta"])
    mesh = eval_geometry(bundle, alpha, delta)
    diffuse, specular = eval_albedos(bundle, beta)
    terms = SceneTerms(
        stage=stage,
        context=context,
        mesh=mesh,
        rotation=rotation_matrix(blocks["rot"]),
        trans=lift(blocks["trans"]),
        sh=lift(blocks["sh"]),
        vertex_diffuse=clip(diffuse, 0.0, 1.0),
        vertex_specular=clip(specular, 0.0, 1.0),
        tape=tape,
    )
    if stage == "coarse":
        return terms

    atlas, triangles = context.atlas, bundle.triangles
    terms.diffuse_base = bake_vertex_attribute(atlas, triangles, terms.vertex_diffuse)
    terms.specular_base = bake_vertex_attribute(atlas, triangles, terms.vertex_specular)
    terms.medium_diffuse = terms.diffuse_base + blocks["medium_diffuse_inc"]
    terms.medium_specular = terms.specular_base + blocks["medium_specular_inc"]
    if stage == "medium":
        terms.diffuse_map, terms.specular_map = terms.medium_diffuse, terms.medium_specular
        return terms

    terms.diffuse_map = terms.medium_diffuse + blocks["fine_diffuse_inc"]
    terms.specular_map = terms.medium_specular + blocks["fine_specular_inc"]
    terms.normal_map = lift(blocks["fine_normal_inc"])
    return terms
