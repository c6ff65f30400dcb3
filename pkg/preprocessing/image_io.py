"""
Reading and writing of the toolkit's file formats.

- PNG: 8-bit sRGB-ish images. Linear radiance is tone mapped with a 2.2 gamma
  on write and linearised on read.
- PFM: float32 maps (uv maps, env maps, renders), little endian, rows stored
  bottom to top as the format requires.
- Landmarks: 68 rows of "x y" pixel coordinates.
- OBJ: fitted mesh with uv coordinates and a material pointing at the
  diffuse map.
"""

import logging
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
from PIL import Image

from core_engine.errors import ImageIOError
from models.morphable import N_LANDMARKS

logger = logging.getLogger(__name__)

GAMMA = 2.2
PathLike = Union[str, Path]


def to_display(image: np.ndarray, gamma: float = GAMMA) -> np.ndarray:
    """Clamp linear values to [0, 1] and apply the display gamma."""
    return np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) ** (1.0 / gamma)


def to_linear(image: np.ndarray, gamma: float = GAMMA) -> np.ndarray:
    return np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) ** gamma


def write_png(path: PathLike, image: np.ndarray, linear: bool = True) -> Path:
    """
    Write an (H, W), (H, W, 1) or (H, W, 3) image in [0, 1] as 8-bit PNG.

    Args:
        path: destination
        image: pixel values
        linear: tone map linear radiance with the display gamma first
    """
    path = Path(path)
    values = to_display(image) if linear else np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if values.ndim == 3 and values.shape[-1] == 1:
        values = values[..., 0]
    data = np.round(values * 255.0).astype(np.uint8)
    Image.fromarray(data).save(path)
    logger.debug("wrote %s %s", path, data.shape)
    return path


def read_png(path: PathLike, linear: bool = True) -> np.ndarray:
    """Read a PNG as float64 RGB in [0, 1], linearised unless `linear` is False."""
    path = Path(path)
    if not path.exists():
        raise ImageIOError(f"image not found: {path}")
    with Image.open(path) as handle:
        data = np.asarray(handle.convert("RGB"), dtype=np.float64) / 255.0
    return to_linear(data) if linear else data


def write_mask(path: PathLike, mask: np.ndarray) -> Path:
    path = Path(path)
    Image.fromarray(np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)).save(path)
    return path


def read_mask(path: PathLike) -> np.ndarray:
    with Image.open(path) as handle:
        return np.asarray(handle.convert("L")) > 127


def write_pfm(path: PathLike, data: np.ndarray) -> Path:
    """Write an (H, W) or (H, W, 3) float map; top row of `data` is the top of the image."""
    path = Path(path)
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 3 and data.shape[-1] == 1:
        data = data[..., 0]
    if data.ndim == 2:
        header = "Pf"
    elif data.ndim == 3 and data.shape[-1] == 3:
        header = "PF"
    else:
        raise ImageIOError(f"PFM needs (H, W) or (H, W, 3) data, got {data.shape}")
    height, width = data.shape[:2]
    with path.open("wb") as handle:
        handle.write(f"{header}\n{width} {height}\n-1.0\n".encode("ascii"))
        handle.write(np.ascontiguousarray(np.flipud(data)).astype("<f4").tobytes())
    logger.debug("wrote %s %s", path, data.shape)
    return path


def _header_token(handle) -> str:
    token = b""
    while True:
        char = handle.read(1)
        if not char:
            break
        if char.isspace():
            if token:
                break
            continue
        token += char
    return token.decode("ascii")


def read_pfm(path: PathLike) -> np.ndarray:
    """Read a PFM written by any conforming writer (either byte order)."""
    path = Path(path)
    if not path.exists():
        raise ImageIOError(f"PFM not found: {path}")
    with path.open("rb") as handle:
        kind = _header_token(handle)
        if kind not in ("PF", "Pf"):
            raise ImageIOError(f"{path} is not a PFM file (header {kind!r})")
        width, height = int(_header_token(handle)), int(_header_token(handle))
        scale = float(_header_token(handle))
        dtype = "<f4" if scale < 0 else ">f4"
        channels = 3 if kind == "PF" else 1
        data = np.frombuffer(handle.read(), dtype=dtype, count=width * height * channels)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return np.flipud(data.reshape(shape)).astype(np.float64)


def write_landmarks(path: PathLike, landmarks: np.ndarray) -> Path:
    path = Path(path)
    np.savetxt(path, np.asarray(landmarks, dtype=np.float64).reshape(-1, 2), fmt="%.6f")
    return path


def read_landmarks(path: PathLike) -> np.ndarray:
    """Read 68 "x y" rows; anything else is an error."""
    path = Path(path)
    if not path.exists():
        raise ImageIOError(f"landmark file not found: {path}")
    landmarks = np.loadtxt(path, dtype=np.float64, ndmin=2)
    if landmarks.shape != (N_LANDMARKS, 2):
        raise ImageIOError(f"{path}: expected {N_LANDMARKS} rows of x y, got shape {landmarks.shape}")
    return landmarks


def write_obj(path: PathLike, vertices: np.ndarray, triangles: np.ndarray, uv: Optional[np.ndarray] = None,
              texture: Optional[str] = None) -> Path:
    """
    Export a triangle mesh. With `texture`, a sibling .mtl file references it as map_Kd.

    OBJ images put v = 0 at the bottom; the toolkit's uv v axis grows with
    image rows, so v is flipped on export.
    """
    path = Path(path)
    lines = []
    if texture is not None:
        material = path.with_suffix(".mtl")
        material.write_text(f"newmtl face\nKa 0 0 0\nKd 1 1 1\nKs 0 0 0\nmap_Kd {texture}\n", encoding="utf-8")
        lines += [f"mtllib {material.name}", "usemtl face"]
    lines += [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in np.asarray(vertices, dtype=np.float64)]
    faces = np.asarray(triangles, dtype=np.int64) + 1
    if uv is not None:
        lines += [f"vt {u:.6f} {1.0 - v:.6f}" for u, v in np.asarray(uv, dtype=np.float64)]
        lines += [f"f {a}/{a} {b}/{b} {c}/{c}" for a, b, c in faces]
    else:
        lines += [f"f {a} {b} {c}" for a, b, c in faces]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.debug("wrote %s (%d vertices, %d triangles)", path, len(vertices), len(faces))
    return path


def read_obj(path: PathLike) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    """
    Read vertices, triangles and (if present) per-vertex uv from an OBJ.

    Only the subset `write_obj` produces is supported: triangles whose
    vertex and uv indices coincide.
    """
    path = Path(path)
    if not path.exists():
        raise ImageIOError(f"mesh not found: {path}")
    vertices, uvs, faces = [], [], []
    for line in path.read_text(encoding="utf-8").splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            vertices.append([float(value) for value in parts[1:4]])
        elif parts[0] == "vt":
            uvs.append([float(parts[1]), 1.0 - float(parts[2])])
        elif parts[0] == "f":
            if len(parts) != 4:
                raise ImageIOError(f"{path}: only triangle faces are supported")
            faces.append([int(corner.split("/")[0]) - 1 for corner in parts[1:]])
    uv = np.asarray(uvs, dtype=np.float64) if uvs else None
    return np.asarray(vertices, dtype=np.float64), np.asarray(faces, dtype=np.int64), uv


def read_image(path: PathLike) -> np.ndarray:
    """Linear RGB from a .pfm (as stored) or .png (linearised)."""
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        image = read_pfm(path)
        return np.repeat(image[..., None], 3, axis=-1) if image.ndim == 2 else image
    if path.suffix.lower() == ".png":
        return read_png(path)
    raise ImageIOError(f"unsupported image format '{path.suffix}' (use .png or .pfm)")
