"""
Statistical face model: bundle storage, mesh and albedo evaluation.

A model bundle is a directory holding `manifest.json` and one raw
little-endian array file per field. Float arrays are stored as 32-bit floats
and held as float64 in memory; integer arrays (triangles, landmark ids, mirror
map) are 32-bit integers. Per-vertex 3-vectors are interleaved (x, y, z) per
vertex, so a 3N vector reshapes row-major to (N, 3).
"""

import json
import logging
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Dict, NamedTuple, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from core_engine.autodiff.functional import dot, normalize
from core_engine.autodiff.tape import (
    DiffValue,
    Operand,
    cross,
    index_add,
    lift,
    matmul,
    reshape,
    stack,
    take,
    value_of,
)
from core_engine.errors import (
    BundleDimensionError,
    BundleError,
    MirrorMapError,
    MissingBundleFileError,
    TriangleIndexError,
    UVRangeError,
)

logger = logging.getLogger(__name__)

N_LANDMARKS = 68
FORMAT_VERSION = 1


class BundleManifest(BaseModel):
    """Contents of a bundle's manifest.json."""

    model_config = ConfigDict(extra="forbid")

    format_version: int = FORMAT_VERSION
    n_vertices: int = Field(gt=0)
    n_triangles: int = Field(gt=0)
    k_shape: int = Field(ge=0)
    k_expr: int = Field(ge=0)
    k_refl: int = Field(ge=0)
    n_landmarks: int = N_LANDMARKS
    texture_resolution: int = Field(gt=1)
    arrays: Dict[str, str]


# name -> (dtype, shape from manifest)
ARRAY_LAYOUT = {
    "mean_shape": ("<f4", lambda m: (3 * m.n_vertices,)),
    "shape_basis": ("<f4", lambda m: (3 * m.n_vertices, m.k_shape)),
    "expr_basis": ("<f4", lambda m: (3 * m.n_vertices, m.k_expr)),
    "mean_diffuse": ("<f4", lambda m: (3 * m.n_vertices,)),
    "diffuse_basis": ("<f4", lambda m: (3 * m.n_vertices, m.k_refl)),
    "mean_specular": ("<f4", lambda m: (3 * m.n_vertices,)),
    "specular_basis": ("<f4", lambda m: (3 * m.n_vertices, m.k_refl)),
    "prior_var_shape": ("<f4", lambda m: (m.k_shape,)),
    "prior_var_refl": ("<f4", lambda m: (m.k_refl,)),
    "triangles": ("<i4", lambda m: (m.n_triangles, 3)),
    "uv": ("<f4", lambda m: (m.n_vertices, 2)),
    "landmark_vertex_ids": ("<i4", lambda m: (m.n_landmarks,)),
    "mirror": ("<i4", lambda m: (m.n_vertices,)),
}

MANIFEST_DIMENSIONS = {
    "shape_basis": "k_shape",
    "expr_basis": "k_expr",
    "diffuse_basis": "k_refl",
    "specular_basis": "k_refl",
}


@dataclass
class ModelBundle:
    """The statistical prior: means, bases, topology, uv atlas, landmarks, mirror map."""

    mean_shape: np.ndarray
    shape_basis: np.ndarray
    expr_basis: np.ndarray
    mean_diffuse: np.ndarray
    diffuse_basis: np.ndarray
    mean_specular: np.ndarray
    specular_basis: np.ndarray
    prior_var_shape: np.ndarray
    prior_var_refl: np.ndarray
    triangles: np.ndarray
    uv: np.ndarray
    landmark_vertex_ids: np.ndarray
    mirror: np.ndarray
    texture_resolution: int

    @property
    def n_vertices(self) -> int:
        return self.mean_shape.size // 3

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def k_shape(self) -> int:
        return self.shape_basis.shape[1]

    @property
    def k_expr(self) -> int:
        return self.expr_basis.shape[1]

    @property
    def k_refl(self) -> int:
        return self.diffuse_basis.shape[1]

    def manifest(self) -> BundleManifest:
        suffix = {"<f4": ".f32", "<i4": ".i32"}
        return BundleManifest(
            n_vertices=self.n_vertices,
            n_triangles=self.n_triangles,
            k_shape=self.k_shape,
            k_expr=self.k_expr,
            k_refl=self.k_refl,
            n_landmarks=len(self.landmark_vertex_ids),
            texture_resolution=self.texture_resolution,
            arrays={name: name + suffix[dtype] for name, (dtype, _) in ARRAY_LAYOUT.items()},
        )

    def validate(self) -> None:
        """Check the bundle invariants, raising a distinct error per violation."""
        n = self.n_vertices
        for name, dimension in MANIFEST_DIMENSIONS.items():
            rows = getattr(self, name).shape[0]
            if rows != 3 * n:
                raise BundleDimensionError(f"{name} has {rows} rows, expected 3N = {3 * n}")
        if self.specular_basis.shape[1] != self.k_refl:
            raise BundleDimensionError(
                f"specular_basis has {self.specular_basis.shape[1]} columns, diffuse_basis has {self.k_refl}")
        if self.prior_var_shape.shape != (self.k_shape,) or self.prior_var_refl.shape != (self.k_refl,):
            raise BundleDimensionError("prior variance lengths do not match basis column counts")
        if np.any(self.prior_var_shape <= 0) or np.any(self.prior_var_refl <= 0):
            raise BundleError("prior variances must be positive")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise BundleDimensionError(f"triangles must be (F, 3), got {self.triangles.shape}")
        if self.triangles.min() < 0 or self.triangles.max() >= n:
            raise TriangleIndexError(f"triangle indices must lie in [0, {n}), got range "
                                     f"[{self.triangles.min()}, {self.triangles.max()}]")
        if np.unique(self.triangles).size != n:
            raise TriangleIndexError("every vertex must belong to at least one triangle")
        if self.uv.shape != (n, 2):
            raise BundleDimensionError(f"uv must be (N, 2) = ({n}, 2), got {self.uv.shape}")
        if np.any(self.uv < 0.0) or np.any(self.uv > 1.0):
            raise UVRangeError("uv coordinates must lie in [0, 1]^2")
        if self.mirror.shape != (n,) or self.mirror.min() < 0 or self.mirror.max() >= n:
            raise MirrorMapError("mirror map must hold one valid vertex index per vertex")
        if not np.array_equal(self.mirror[self.mirror], np.arange(n)):
            bad = int(np.flatnonzero(self.mirror[self.mirror] != np.arange(n))[0])
            raise MirrorMapError(f"mirror map is not an involution (vertex {bad} -> {self.mirror[bad]} "
                                 f"-> {self.mirror[self.mirror[bad]]})")
        if len(self.landmark_vertex_ids) != N_LANDMARKS:
            raise BundleDimensionError(f"expected {N_LANDMARKS} landmark vertex ids, "
                                       f"got {len(self.landmark_vertex_ids)}")
        if self.landmark_vertex_ids.min() < 0 or self.landmark_vertex_ids.max() >= n:
            raise BundleDimensionError("landmark vertex ids out of range")
        if self.texture_resolution < 2:
            raise BundleError("texture_resolution must be at least 2")


def load_bundle(path: Union[str, Path]) -> ModelBundle:
    """
    Load and validate a model bundle directory.

    Args:
        path: directory containing manifest.json and the raw array files

    Returns:
        Validated ModelBundle
    """
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise MissingBundleFileError(f"bundle manifest not found: {manifest_path}")
    try:
        manifest = BundleManifest.model_validate(json.loads(manifest_path.read_text(encoding="utf-8")))
    except (ValidationError, json.JSONDecodeError) as exc:
        raise BundleError(f"invalid bundle manifest {manifest_path}: {exc}") from exc

    arrays: Dict[str, np.ndarray] = {}
    for name, (dtype, shape_of) in ARRAY_LAYOUT.items():
        if name not in manifest.arrays:
            raise MissingBundleFileError(f"manifest does not name a file for '{name}'")
        file_path = path / manifest.arrays[name]
        if not file_path.exists():
            raise MissingBundleFileError(f"bundle array file missing: {file_path}")
        raw = np.fromfile(file_path, dtype=dtype)
        shape = shape_of(manifest)
        if raw.size != int(np.prod(shape)):
            if name in MANIFEST_DIMENSIONS and raw.size % shape[0] == 0:
                raise BundleDimensionError(
                    f"{name} has {raw.size // shape[0]} columns but the manifest declares "
                    f"{MANIFEST_DIMENSIONS[name]}={shape[1]}")
            raise BundleDimensionError(f"{name} holds {raw.size} values, manifest implies shape {shape}")
        raw = raw.reshape(shape)
        arrays[name] = raw.astype(np.float64) if dtype == "<f4" else raw.astype(np.int64)

    bundle = ModelBundle(texture_resolution=manifest.texture_resolution, **arrays)
    bundle.validate()
    logger.info("loaded bundle %s: N=%d, F=%d, K_s=%d, K_e=%d, K_r=%d", path, bundle.n_vertices,
                bundle.n_triangles, bundle.k_shape, bundle.k_expr, bundle.k_refl)
    return bundle


def save_bundle(bundle: ModelBundle, path: Union[str, Path]) -> Path:
    """Write a bundle directory (manifest plus raw little-endian arrays)."""
    bundle.validate()
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = bundle.manifest()
    for name, (dtype, _) in ARRAY_LAYOUT.items():
        np.ascontiguousarray(getattr(bundle, name), dtype=dtype).tofile(path / manifest.arrays[name])
    (path / "manifest.json").write_text(json.dumps(manifest.model_dump(), indent=2), encoding="utf-8")
    return path


@dataclass
class Mesh:
    """
    Evaluated geometry. Fields are numpy arrays for plain evaluation and
    DiffValues when evaluated on a tape.
    """

    vertices: Any
    neutral: Any
    normals: Any
    tangents: Any
    bitangents: Any

    def arrays(self) -> "Mesh":
        return Mesh(**{f.name: np.asarray(value_of(getattr(self, f.name))) for f in fields(self)})

    @property
    def frames(self) -> np.ndarray:
        """(N, 3, 3) column frames [t | b | n]."""
        m = self.arrays()
        return np.stack([m.tangents, m.bitangents, m.normals], axis=-1)


class Adjacency(NamedTuple):
    """CSR neighbour lists: neighbours of i are indices[offsets[i]:offsets[i + 1]]."""

    indices: np.ndarray
    offsets: np.ndarray

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.offsets)


def mesh_adjacency(triangles: np.ndarray, n_vertices: int) -> Adjacency:
    """First-ring vertex neighbours from triangle edges."""
    tri = np.asarray(triangles, dtype=np.int64)
    edges = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
    edges = np.concatenate([edges, edges[:, ::-1]])
    edges = np.unique(edges, axis=0)
    offsets = np.concatenate([[0], np.cumsum(np.bincount(edges[:, 0], minlength=n_vertices))])
    return Adjacency(indices=edges[:, 1].copy(), offsets=offsets)


def scene_scale(vertices: np.ndarray) -> float:
    """Diagonal of the axis-aligned bounding box."""
    vertices = np.asarray(vertices)
    return float(np.linalg.norm(vertices.max(axis=0) - vertices.min(axis=0)))


def _check_length(name: str, coeffs: Operand, expected: int) -> None:
    shape = np.shape(value_of(coeffs))
    if shape != (expected,):
        raise BundleDimensionError(f"{name} must have length {expected}, got shape {shape}")


def vertex_normals(vertices: Operand, triangles: np.ndarray) -> DiffValue:
    """Area-weighted vertex normals (sum of unnormalised face normals)."""
    vertices = lift(vertices)
    corners = take(vertices, triangles)
    face = cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0])
    accumulated = index_add(triangles, stack([face, face, face], axis=1), len(vertices))
    return normalize(accumulated)


def tangent_frames(vertices: Operand, normals: Operand, triangles: np.ndarray,
                   uv: np.ndarray) -> Tuple[DiffValue, DiffValue]:
    """
    Per-vertex tangents and bitangents from uv gradients.

    Face tangents are accumulated at the vertices, orthogonalised against the
    normal (Gram-Schmidt) and the bitangent is n x t with the handedness of the
    accumulated uv bitangent.
    """
    vertices, normals = lift(vertices), lift(normals)
    n_vertices = len(vertices)
    corners = take(vertices, triangles)
    e1 = corners[:, 1] - corners[:, 0]
    e2 = corners[:, 2] - corners[:, 0]

    tex = uv[triangles]
    du1, dv1 = tex[:, 1, 0] - tex[:, 0, 0], tex[:, 1, 1] - tex[:, 0, 1]
    du2, dv2 = tex[:, 2, 0] - tex[:, 0, 0], tex[:, 2, 1] - tex[:, 0, 1]
    det = du1 * dv2 - du2 * dv1
    inv = np.where(np.abs(det) > 1e-20, 1.0 / np.where(det == 0, 1.0, det), 0.0)

    t_face = (e1 * dv2[:, None] - e2 * dv1[:, None]) * inv[:, None]
    b_face = (e2 * du1[:, None] - e1 * du2[:, None]) * inv[:, None]
    t_acc = index_add(triangles, stack([t_face, t_face, t_face], axis=1), n_vertices)
    b_acc = index_add(triangles, stack([b_face, b_face, b_face], axis=1), n_vertices)

    tangents = normalize(t_acc - normals * dot(normals, t_acc))
    handedness = np.sign(np.sum(np.cross(normals.value, tangents.value) * b_acc.value, axis=-1))
    handedness[handedness == 0] = 1.0
    bitangents = cross(normals, tangents) * handedness[:, None]
    return tangents, bitangents


def eval_geometry(bundle: ModelBundle, alpha: Operand, delta: Operand) -> Mesh:
    """
    v = a_s + S_s alpha + S_e delta, with normals and tangent frames.

    Args:
        bundle: model bundle
        alpha: identity coefficients (K_s,)
        delta: expression coefficients (K_e,)

    Returns:
        Mesh; DiffValue fields if either coefficient vector is a DiffValue
    """
    _check_length("alpha", alpha, bundle.k_shape)
    _check_length("delta", delta, bundle.k_expr)
    on_tape = isinstance(alpha, DiffValue) or isinstance(delta, DiffValue)
    n = bundle.n_vertices

    neutral = reshape(bundle.mean_shape + matmul(bundle.shape_basis, lift(alpha)), (n, 3))
    vertices = neutral + reshape(matmul(bundle.expr_basis, lift(delta)), (n, 3))
    normals = vertex_normals(vertices, bundle.triangles)
    tangents, bitangents = tangent_frames(vertices, normals, bundle.triangles, bundle.uv)
    mesh = Mesh(vertices=vertices, neutral=neutral, normals=normals, tangents=tangents, bitangents=bitangents)
    return mesh if on_tape else mesh.arrays()


def eval_albedos(bundle: ModelBundle, beta: Operand) -> Tuple[Any, Any]:
    """
    Diffuse and specular albedo from the single reflectance vector beta.

    Values are not clamped here; renderers clamp to [0, 1].

    Returns:
        (c, s), each (N, 3)
    """
    _check_length("beta", beta, bundle.k_refl)
    n = bundle.n_vertices
    b = lift(beta)
    diffuse = reshape(bundle.mean_diffuse + matmul(bundle.diffuse_basis, b), (n, 3))
    specular = reshape(bundle.mean_specular + matmul(bundle.specular_basis, b), (n, 3))
    if isinstance(beta, DiffValue):
        return diffuse, specular
    return diffuse.value, specular.value


def with_arrays(bundle: ModelBundle, **changes: np.ndarray) -> ModelBundle:
    """Copy of a bundle with some arrays replaced (validated)."""
    updated = replace(bundle, **changes)
    updated.validate()
    return updated
