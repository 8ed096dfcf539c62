import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from smokeview.image import (
    CameraView, CorruptImageError, Dataset, DatasetError, Image, ImageNotFoundError, UnsupportedFormatError,
    decode_png, encode_png, load_dataset, load_image, luminance, quantize, save_dataset, save_image,
)

from conftest import random_image

unit_floats = st.floats(0.0, 1.0, allow_nan=False)


def write_ppm(path, w, h, payload: bytes):
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode() + payload)


def test_ppm_max_value(tmp_path):
    write_ppm(tmp_path / "red.ppm", 1, 1, bytes([255, 0, 0]))
    img = load_image(tmp_path / "red.ppm")
    assert img.shape == (1, 1)
    np.testing.assert_array_equal(img.data[0, 0], [1.0, 0.0, 0.0])


def test_ppm_zero(tmp_path):
    write_ppm(tmp_path / "k.ppm", 1, 1, bytes(3))
    assert not load_image(tmp_path / "k.ppm").data.any()


def test_ppm_comment_and_layout(tmp_path):
    # 2x1 raster with a header comment; row-major order, top-left origin
    (tmp_path / "c.ppm").write_bytes(b"P6\n# hello\n2 1\n255\n" + bytes([0, 0, 0, 51, 102, 153]))
    img = load_image(tmp_path / "c.ppm")
    np.testing.assert_allclose(img.data[0, 1], [0.2, 0.4, 0.6])


def test_round_trip_within_quantum(tmp_path, rng):
    img = random_image(rng)
    save_image(img, tmp_path / "a.png")
    back = load_image(tmp_path / "a.png")
    oracle = np.floor(img.data * 255 + 0.5) / 255
    np.testing.assert_array_equal(back.data, oracle)
    assert np.abs(back.data - img.data).max() <= 1 / 510 + 1e-15


def test_zero_image_round_trip(tmp_path):
    save_image(Image(np.zeros((2, 2, 3))), tmp_path / "z.png")
    assert not load_image(tmp_path / "z.png").data.any()


def test_half_rounds_up(tmp_path):
    save_image(Image.constant(1, 1, (0.5, 0.5, 0.5)), tmp_path / "h.ppm")
    assert (tmp_path / "h.ppm").read_bytes()[-3:] == bytes([128, 128, 128])
    assert quantize(np.array([0.5]))[0] == 128


def test_save_load_save_byte_identical(tmp_path, rng):
    img = random_image(rng, 5, 7)
    for suffix in (".png", ".ppm"):
        a, b = tmp_path / f"a{suffix}", tmp_path / f"b{suffix}"
        save_image(img, a)
        save_image(load_image(a), b)
        assert a.read_bytes() == b.read_bytes()


def test_alpha_dropped(tmp_path):
    from PIL import Image as PILImage

    arr = np.zeros((2, 2, 4), dtype=np.uint8)
    arr[..., 1] = 200
    arr[..., 3] = 7
    PILImage.fromarray(arr, "RGBA").save(tmp_path / "a.png")
    img = load_image(tmp_path / "a.png")
    np.testing.assert_allclose(img.data[..., 1], 200 / 255)


def test_errors_are_distinct(tmp_path):
    with pytest.raises(ImageNotFoundError):
        load_image(tmp_path / "missing.png")
    (tmp_path / "x.bmp").write_bytes(b"BM" + bytes(40))
    with pytest.raises(UnsupportedFormatError):
        load_image(tmp_path / "x.bmp")
    (tmp_path / "bad.ppm").write_bytes(b"P6\n2 x\n255\n")
    with pytest.raises(CorruptImageError):
        load_image(tmp_path / "bad.ppm")
    write_ppm(tmp_path / "short.ppm", 2, 2, bytes(5))
    with pytest.raises(CorruptImageError):
        load_image(tmp_path / "short.ppm")


def test_png_bytes_round_trip(rng):
    img = random_image(rng, 3, 4)
    assert decode_png(encode_png(img)) == Image(np.floor(img.data * 255 + 0.5) / 255)


def test_image_invariants():
    with pytest.raises(ValueError):
        Image(np.full((2, 2, 3), 1.5))
    with pytest.raises(ValueError):
        Image(np.full((2, 2, 3), np.nan))
    with pytest.raises(ValueError):
        Image(np.zeros((2, 2)))
    img = Image.from_array(np.full((1, 1, 3), 2.0))
    assert img.data.max() == 1.0
    with pytest.raises(ValueError):
        img.data[0, 0, 0] = 0.0


def test_luminance_closed_forms():
    assert np.all(luminance(Image.constant(2, 2, (1, 1, 1))) == pytest.approx(1.0))
    assert luminance(Image.constant(1, 1, (0, 1, 0)))[0, 0] == pytest.approx(0.587)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4, 3), elements=unit_floats))
def test_luminance_matches_formula(data):
    lum = luminance(Image(data))
    direct = 0.299 * data[..., 0] + 0.587 * data[..., 1] + 0.114 * data[..., 2]
    np.testing.assert_allclose(lum, direct, atol=1e-15)
    assert lum.min() >= 0 and lum.max() <= 1 + 1e-15


def test_camera_invariants():
    with pytest.raises(ValueError):
        CameraView(10, 10, 4, 4, np.diag([1.0, 1.0, -1.0]), np.zeros(3), 8, 8)
    with pytest.raises(ValueError):
        CameraView(10, 10, 8, 4, np.eye(3), np.zeros(3), 8, 8)
    with pytest.raises(ValueError):
        CameraView(0, 10, 4, 4, np.eye(3), np.zeros(3), 8, 8)


def test_look_at_points_forward():
    cam = CameraView.look_at([0, 0, -5], [0, 0, 0], [0, -1, 0], 20, 16, 16)
    p = cam.rotation @ np.zeros(3) + cam.translation
    assert p[2] == pytest.approx(5.0)
    assert abs(np.linalg.det(cam.rotation) - 1) < 1e-9
    np.testing.assert_allclose(cam.center, [0, 0, -5], atol=1e-12)


def _cam(w=4, h=3):
    return CameraView(5, 5, w / 2, h / 2, np.eye(3), np.zeros(3), w, h)


def test_dataset_round_trip(tmp_path, rng):
    views = [(random_image(rng, 3, 4), _cam()) for _ in range(2)]
    ds = Dataset("s", views, [_cam()], [random_image(rng, 3, 4)])
    save_dataset(ds, tmp_path)
    back = load_dataset(tmp_path)
    assert back.scene_name == "s"
    assert len(back.training_views) == 2 and len(back.target_views) == 1
    doc = json.loads((tmp_path / "cameras.json").read_text())
    assert set(doc) == {"scene", "train", "test"}
    assert len(doc["train"][0]["rotation"]) == 9
    np.testing.assert_array_equal(back.target_views[0].rotation, np.eye(3))


def test_dataset_needs_two_views(rng):
    with pytest.raises(DatasetError):
        Dataset("s", [(random_image(rng, 3, 4), _cam())], [])
    with pytest.raises(DatasetError):
        Dataset("s", [(random_image(rng, 3, 4), _cam()), (random_image(rng, 4, 4), _cam())], [])


def test_dataset_missing_manifest(tmp_path):
    with pytest.raises(DatasetError):
        load_dataset(tmp_path)
