import numpy as np
import pytest

from agglom import image_io
from agglom.raster import GrayImage


def test_png_round_trip_byte_mapping(tmp_path, rng):
    arr = rng.integers(0, 256, size=(20, 30)).astype(np.float64) / 255.0
    path = tmp_path / "img.png"
    image_io.write_png(GrayImage(arr), path)
    back = image_io.read_png(path)
    np.testing.assert_allclose(back.pixels, arr)
    assert back.width == 30 and back.height == 20


def test_png_write_clamps_and_quantizes(tmp_path):
    arr = np.array([[1.2, -0.3], [0.5, 1.0]])
    path = tmp_path / "c.png"
    image_io.write_png(GrayImage(arr), path)
    back = image_io.read_png(path)
    expected = np.array([[1.0, 0.0], [np.rint(0.5 * 255) / 255.0, 1.0]])
    np.testing.assert_allclose(back.pixels, expected)


def test_pgm_read(tmp_path):
    raster = bytes(range(12))
    path = tmp_path / "img.pgm"
    path.write_bytes(b"P5\n# comment\n4 3\n255\n" + raster)
    img = image_io.read_pgm(path)
    assert img.width == 4 and img.height == 3
    np.testing.assert_allclose(
        img.pixels, np.frombuffer(raster, np.uint8).reshape(3, 4) / 255.0
    )


def test_read_image_dispatches_on_magic(tmp_path, rng):
    arr = rng.random((6, 6))
    png_path = tmp_path / "a.png"
    image_io.write_png(GrayImage(arr), png_path)
    assert image_io.read_image(png_path).width == 6
    pgm_path = tmp_path / "b.pgm"
    pgm_path.write_bytes(b"P5 2 2 255 " + bytes([0, 64, 128, 255]))
    img = image_io.read_image(pgm_path)
    np.testing.assert_allclose(img.pixels.ravel(), np.array([0, 64, 128, 255]) / 255.0)


def test_truncated_pgm_rejected(tmp_path):
    path = tmp_path / "t.pgm"
    path.write_bytes(b"P5 4 4 255 " + bytes(3))
    with pytest.raises(ValueError):
        image_io.read_pgm(path)


def test_png_bytes_deterministic(rng):
    img = GrayImage(rng.random((16, 16)))
    assert image_io.png_bytes(img) == image_io.png_bytes(img)
