import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from oracles import bilinear_pixel
from umfa import imageio
from umfa.imageio import (CorruptHeaderError, TruncatedPixelDataError, UnsupportedFormatError,
                          load_image, resize_center, save_image)
from umfa.tensor import Tensor


def test_p6_byte_mapping(tmp_path):
    path = tmp_path / "tiny.ppm"
    path.write_bytes(b"P6\n# a comment\n2 2\n255\n" + bytes([0, 128, 255, 1, 2, 3, 4, 5, 6, 7, 8, 9]))
    t = load_image(path)
    assert t.shape == (1, 3, 2, 2)
    np.testing.assert_array_equal(t.data[0, :, 0, 0], np.float32([0.0, 128 / 255, 1.0]))
    np.testing.assert_array_equal(t.data[0, :, 1, 1], np.float32(np.array([7, 8, 9]) / 255))


def test_png_and_p6_agree(tmp_path):
    pixels = np.random.default_rng(0).integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
    Image.fromarray(pixels, mode="RGB").save(tmp_path / "a.png")
    (tmp_path / "a.ppm").write_bytes(imageio.encode_ppm(pixels))
    a, b = load_image(tmp_path / "a.png"), load_image(tmp_path / "a.ppm")
    assert a.data.tobytes() == b.data.tobytes()


def test_png_alpha_dropped(tmp_path):
    rgba = np.random.default_rng(0).integers(0, 256, size=(4, 4, 4), dtype=np.uint8)
    Image.fromarray(rgba, mode="RGBA").save(tmp_path / "a.png")
    t = load_image(tmp_path / "a.png")
    np.testing.assert_array_equal(np.rint(t.data[0] * 255).astype(np.uint8), rgba[..., :3].transpose(2, 0, 1))


def test_decode_errors_are_distinct(tmp_path):
    cases = {
        "trunc.ppm": (b"P6\n2 2\n255\n" + bytes(11), TruncatedPixelDataError, "truncated pixel data"),
        "hdr.ppm": (b"P6\n2 x\n255\n" + bytes(12), CorruptHeaderError, "corrupt header"),
        "max.ppm": (b"P6\n2 2\n65535\n" + bytes(24), UnsupportedFormatError, "unsupported format"),
        "p3.ppm": (b"P3\n1 1\n255\n0 0 0\n", UnsupportedFormatError, "unsupported format"),
        "junk.png": (b"\x89PNG\r\n\x1a\n" + bytes(20), CorruptHeaderError, "corrupt header"),
    }
    for name, (raw, err, msg) in cases.items():
        (tmp_path / name).write_bytes(raw)
        with pytest.raises(err, match=msg):
            load_image(tmp_path / name)
    assert len({e for _, e, _ in cases.values()}) == 3


def test_quantization_half_up():
    assert np.all(imageio.to_bytes(Tensor(np.full((1, 3, 2, 2), 0.5))) == 128)
    q = imageio.to_bytes(Tensor(np.array([-0.2, 0.0, 1.0, 1.7], dtype=np.float32).reshape(1, 1, 1, 4).repeat(3, 1)))
    assert q[0, :, 0].tolist() == [0, 0, 255, 255]


@settings(max_examples=30, deadline=None)
@given(arrays(np.float32, (1, 3, 3, 4), elements=st.floats(0, 1, width=32)),
       st.sampled_from(["png", "ppm"]))
def test_encode_decode_error_within_one_level(tmp_path_factory, x, ext):
    path = tmp_path_factory.mktemp("rt") / f"x.{ext}"
    save_image(Tensor(x), path)
    assert np.abs(load_image(path).data - x).max() <= 1 / 255 + 1e-7


def test_p6_file_round_trip_is_byte_identical(tmp_path):
    raw = imageio.encode_ppm(np.random.default_rng(1).integers(0, 256, size=(3, 5, 3), dtype=np.uint8))
    (tmp_path / "a.ppm").write_bytes(raw)
    save_image(load_image(tmp_path / "a.ppm"), tmp_path / "b.ppm")
    assert (tmp_path / "b.ppm").read_bytes() == raw


def test_resize_identity_is_bit_exact():
    x = Tensor(np.random.default_rng(0).uniform(size=(1, 3, 32, 32)))
    assert resize_center(x, 32).data.tobytes() == x.data.tobytes()


@pytest.mark.parametrize("shape", [(17, 40), (64, 23), (100, 100)])
def test_resize_constant_stays_constant(shape):
    x = Tensor(np.full((1, 3) + shape, 0.3))
    out = resize_center(x, 32)
    assert out.shape == (1, 3, 32, 32)
    np.testing.assert_allclose(out.data, 0.3, rtol=1e-6)


def test_resize_wide_image_matches_oracle():
    x = Tensor(np.random.default_rng(0).uniform(size=(1, 3, 32, 64)))
    out = resize_center(x, 16)
    assert out.shape == (1, 3, 16, 16)
    # shorter side 32 -> 16, width 64 -> 32, crop columns 8..24
    d = x.data.astype(np.float64)
    for oy, ox in [(0, 0), (5, 3), (15, 15), (7, 11)]:
        want = bilinear_pixel(d[0], oy, ox + 8, 16, 32)
        np.testing.assert_allclose(out.data[0, :, oy, ox], want, rtol=1e-6)


def test_resize_shorter_side_kept_then_cropped():
    x = Tensor(np.random.default_rng(0).uniform(size=(1, 3, 512, 256)))
    out = resize_center(x, 256)
    np.testing.assert_array_equal(out.data, x.data[:, :, 128:384])


def test_resize_rejects_bad_targets():
    with pytest.raises(ValueError):
        resize_center(Tensor(np.ones((1, 3, 20, 20))), 8)


def test_list_images_sorted_and_filtered(tmp_path):
    for name in ["b.png", "a.ppm", "c.txt", "D.PNG"]:
        (tmp_path / name).write_bytes(b"")
    assert [p.name for p in imageio.list_images(tmp_path)] == ["D.PNG", "a.ppm", "b.png"]
