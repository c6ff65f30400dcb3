import numpy as np
import pytest

from core_engine.errors import ImageIOError
from preprocessing.image_io import (
    read_image,
    read_landmarks,
    read_mask,
    read_obj,
    read_pfm,
    read_png,
    write_landmarks,
    write_mask,
    write_obj,
    write_pfm,
    write_png,
)


def test_pfm_keeps_float_values_and_row_order(tmp_path, rng):
    rgb = rng.normal(size=(5, 7, 3)).astype(np.float32)
    np.testing.assert_array_equal(read_pfm(write_pfm(tmp_path / "rgb.pfm", rgb)), rgb)
    gray = np.arange(12, dtype=np.float32).reshape(3, 4)
    np.testing.assert_array_equal(read_pfm(write_pfm(tmp_path / "gray.pfm", gray[..., None])), gray)
    # the file stores the bottom row first
    raw = (tmp_path / "gray.pfm").read_bytes()
    assert np.frombuffer(raw[-16:], dtype="<f4").tolist() == [0.0, 1.0, 2.0, 3.0]
    with pytest.raises(ImageIOError):
        write_pfm(tmp_path / "bad.pfm", np.zeros((3, 4, 2)))


def test_big_endian_pfm_is_read(tmp_path):
    path = tmp_path / "be.pfm"
    data = np.array([[1.5, -2.0]], dtype=">f4")
    path.write_bytes(b"Pf\n2 1\n1.0\n" + data.tobytes())
    np.testing.assert_array_equal(read_pfm(path), [[1.5, -2.0]])
    (tmp_path / "not.pfm").write_bytes(b"P6\n1 1\n255\n\x00\x00\x00")
    with pytest.raises(ImageIOError):
        read_pfm(tmp_path / "not.pfm")


def test_png_gamma_round_trip(tmp_path):
    levels = np.linspace(0.0, 1.0, 16)
    image = np.stack([np.tile(levels, (4, 1))] * 3, axis=-1)
    back = read_png(write_png(tmp_path / "ramp.png", image))
    np.testing.assert_allclose(back, image, atol=0.02)
    np.testing.assert_allclose(read_png(tmp_path / "ramp.png", linear=False), image ** (1 / 2.2), atol=1 / 255)
    np.testing.assert_allclose(read_image(tmp_path / "ramp.png"), back)


def test_mask_round_trip(tmp_path):
    mask = np.zeros((6, 5), dtype=bool)
    mask[2:4, 1:3] = True
    np.testing.assert_array_equal(read_mask(write_mask(tmp_path / "mask.png", mask)), mask)


def test_landmarks_need_68_rows(tmp_path, rng):
    landmarks = rng.uniform(0, 128, size=(68, 2))
    np.testing.assert_allclose(read_landmarks(write_landmarks(tmp_path / "lm.txt", landmarks)), landmarks, atol=1e-6)
    write_landmarks(tmp_path / "short.txt", landmarks[:10])
    with pytest.raises(ImageIOError):
        read_landmarks(tmp_path / "short.txt")
    with pytest.raises(ImageIOError):
        read_landmarks(tmp_path / "missing.txt")


def test_obj_round_trip_with_material(tmp_path, rng):
    vertices = rng.normal(size=(4, 3))
    triangles = np.array([[0, 1, 2], [0, 2, 3]])
    uv = rng.uniform(size=(4, 2))
    path = write_obj(tmp_path / "mesh.obj", vertices, triangles, uv, texture="diffuse.png")
    assert "map_Kd diffuse.png" in (tmp_path / "mesh.mtl").read_text()
    read_vertices, read_triangles, read_uv = read_obj(path)
    np.testing.assert_allclose(read_vertices, vertices, atol=1e-6)
    np.testing.assert_array_equal(read_triangles, triangles)
    np.testing.assert_allclose(read_uv, uv, atol=1e-6)
    assert read_obj(write_obj(tmp_path / "plain.obj", vertices, triangles))[2] is None


def test_unknown_image_format(tmp_path):
    with pytest.raises(ImageIOError):
        read_image(tmp_path / "photo.jpg")
    np.testing.assert_array_equal(read_image(write_pfm(tmp_path / "g.pfm", np.ones((2, 2)))), np.ones((2, 2, 3)))
