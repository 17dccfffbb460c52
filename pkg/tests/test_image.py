import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from phototune.image import (
    DecodeError,
    UnsupportedFormatError,
    collapse,
    decode,
    encode,
    laplacian_pyramid,
    luminance,
    read_image,
    resize_bilinear,
    resize_for_policy,
    rgb_to_yuv,
    write_image,
)

images = hnp.arrays(
    np.float64,
    st.tuples(st.integers(1, 12), st.integers(1, 12), st.just(3)),
    elements=st.floats(0.0, 1.0, allow_nan=False),
)


def ppm(w, h, pixels, maxval=255):
    return f"P6\n{w} {h}\n{maxval}\n".encode() + bytes(pixels)


def png_bytes(w, h, raw_rows, bit_depth=8, color_type=2):
    def chunk(tag, payload):
        return struct.pack(">I", len(payload)) + tag + payload + struct.pack(">I", zlib.crc32(tag + payload) & 0xFFFFFFFF)

    ihdr = struct.pack(">IIBBBBB", w, h, bit_depth, color_type, 0, 0, 0)
    return b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", ihdr) + chunk(b"IDAT", zlib.compress(raw_rows)) + chunk(b"IEND", b"")


# -- decode / encode ---------------------------------------------------------


def test_ppm_single_red_pixel():
    img = decode(ppm(1, 1, [255, 0, 0]))
    assert img.shape == (1, 1, 3)
    assert np.array_equal(img[0, 0], [1.0, 0.0, 0.0])


def test_ppm_mid_gray():
    img = decode(ppm(2, 2, [128] * 12))
    assert np.allclose(img, 128 / 255, atol=0, rtol=0)


def test_ppm_16bit():
    img = decode(ppm(1, 1, [0xFF, 0xFF, 0x80, 0x00, 0, 1], maxval=65535))
    assert np.allclose(img[0, 0], [1.0, 0x8000 / 65535, 1 / 65535])


def test_truncated_png_header():
    with pytest.raises(DecodeError) as err:
        decode(b"\x89PNG\r\n\x1a\n\x00\x00")
    assert err.value.offset is not None


def test_corrupt_crc_reports_offset():
    data = bytearray(encode(np.zeros((2, 2, 3))))
    data[29] ^= 0xFF  # inside the IHDR crc
    with pytest.raises(DecodeError, match="offset"):
        decode(bytes(data))


def test_png_unsupported_bit_depth():
    data = png_bytes(1, 1, b"\x00\x00", bit_depth=4, color_type=0)
    with pytest.raises(UnsupportedFormatError):
        decode(data)


def test_unknown_magic_is_unsupported():
    with pytest.raises(UnsupportedFormatError):
        decode(b"GIF89a....")


def test_png_gray_and_filters():
    # two rows of a 3-px gray image: row 0 with Sub filter, row 1 with Up filter
    rows = bytes([1, 10, 5, 5]) + bytes([2, 1, 1, 1])
    img = decode(png_bytes(3, 2, rows, color_type=0))
    assert np.allclose(img[0, :, 0] * 255, [10, 15, 20])
    assert np.allclose(img[1, :, 0] * 255, [11, 16, 21])
    assert np.array_equal(img[..., 0], img[..., 2])


def test_png_rgba_drops_alpha():
    rows = bytes([0, 255, 0, 0, 7])
    img = decode(png_bytes(1, 1, rows, color_type=6))
    assert np.array_equal(img[0, 0], [1, 0, 0])


def test_encode_black_pixel():
    assert np.array_equal(decode(encode(np.zeros((1, 1, 3)))), np.zeros((1, 1, 3)))


def test_ppm_magic():
    assert encode(np.zeros((1, 1, 3)), "ppm").startswith(b"P6")


@pytest.mark.parametrize("fmt", ["png", "ppm"])
@pytest.mark.parametrize("bits", [8, 16])
def test_round_trip_within_half_step(rng, fmt, bits):
    x = rng.uniform(size=(7, 5, 3))
    y = decode(encode(x, fmt, bits))
    assert np.max(np.abs(x - y)) <= 1 / 510


@settings(max_examples=40, deadline=None)
@given(images)
def test_round_trip_property(x):
    assert np.max(np.abs(decode(encode(x)) - x)) <= 1 / 510


def test_file_io(tmp_path, rng):
    x = rng.uniform(size=(4, 6, 3))
    write_image(tmp_path / "a.png", x, bit_depth=16)
    write_image(tmp_path / "a.ppm", x)
    assert np.max(np.abs(read_image(tmp_path / "a.png") - x)) <= 1 / 131070
    assert np.max(np.abs(read_image(tmp_path / "a.ppm") - x)) <= 1 / 510


# -- resize ------------------------------------------------------------------


def bilinear_oracle(img, out_h, out_w):
    h, w = img.shape[:2]
    out = np.zeros((out_h, out_w, img.shape[2]))
    for i in range(out_h):
        for j in range(out_w):
            y = min(max((i + 0.5) * h / out_h - 0.5, 0), h - 1)
            x = min(max((j + 0.5) * w / out_w - 0.5, 0), w - 1)
            y0, x0 = int(np.floor(y)), int(np.floor(x))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = y - y0, x - x0
            out[i, j] = (
                img[y0, x0] * (1 - fy) * (1 - fx)
                + img[y0, x1] * (1 - fy) * fx
                + img[y1, x0] * fy * (1 - fx)
                + img[y1, x1] * fy * fx
            )
    return out


def test_resize_identity(rng):
    x = rng.uniform(size=(9, 7, 3))
    assert np.array_equal(resize_bilinear(x, 9, 7), x)


def test_resize_constant():
    x = np.full((5, 8, 3), 0.37)
    y = resize_bilinear(x, 13, 3)
    assert y.shape == (13, 3, 3)
    assert np.all(y == 0.37)


def test_resize_two_pixel_oracle():
    x = np.array([[[0.0] * 3], [[1.0] * 3]])
    assert np.allclose(resize_bilinear(x, 4, 1), bilinear_oracle(x, 4, 1), atol=1e-12)
    assert np.allclose(resize_bilinear(x, 4, 1)[:, 0, 0], [0, 0.25, 0.75, 1])


@pytest.mark.parametrize("shape", [(3, 4), (17, 5), (1, 9)])
def test_resize_random_oracle(rng, shape):
    x = rng.uniform(size=(6, 7, 3))
    assert np.allclose(resize_bilinear(x, *shape), bilinear_oracle(x, *shape), atol=1e-12)


def test_resize_zero_dim():
    with pytest.raises(ValueError):
        resize_bilinear(np.zeros((4, 4, 3)), 0, 3)


def test_resize_for_policy_shape_and_range(rng):
    x = rng.uniform(size=(300, 170, 3))
    y = resize_for_policy(x)
    assert y.shape == (64, 64, 3)
    assert y.min() >= 0 and y.max() <= 1


# -- colour ------------------------------------------------------------------


def test_yuv_gray_axis():
    yuv = rgb_to_yuv(np.full((1, 1, 3), 0.3))
    assert np.allclose(yuv[0, 0], [0.3, 0, 0], atol=1e-15)


def test_yuv_red_luma():
    assert rgb_to_yuv(np.array([[[1.0, 0, 0]]]))[0, 0, 0] == pytest.approx(0.299)


def test_yuv_scalar_oracle(rng):
    m = [[0.299, 0.587, 0.114], [-0.168736, -0.331264, 0.5], [0.5, -0.418688, -0.081312]]
    px = rng.uniform(size=3)
    expect = [sum(m[r][c] * px[c] for c in range(3)) for r in range(3)]
    assert np.allclose(rgb_to_yuv(px[None, None])[0, 0], expect, atol=1e-9)


def test_yuv_ranges_and_luma(rng):
    x = rng.uniform(size=(20, 20, 3))
    yuv = rgb_to_yuv(x)
    assert np.array_equal(yuv[..., 0], luminance(x))
    assert yuv[..., 0].min() >= 0 and yuv[..., 0].max() <= 1
    assert np.abs(yuv[..., 1:]).max() <= 0.5 + 1e-12


# -- pyramid -----------------------------------------------------------------


def test_pyramid_constant():
    pyr = laplacian_pyramid(np.full((32, 32, 3), 0.4), 3)
    for band in pyr.bands:
        assert np.allclose(band, 0, atol=1e-15)
    assert np.allclose(pyr.residual, 0.4)


def test_pyramid_shapes():
    pyr = laplacian_pyramid(np.zeros((64, 64, 3)), 3)
    assert len(pyr.bands) == 3
    assert [b.shape[0] for b in pyr.bands] == [64, 32, 16]
    assert pyr.residual.shape == (8, 8, 3)


def test_pyramid_too_small():
    with pytest.raises(ValueError):
        laplacian_pyramid(np.zeros((7, 64, 3)), 3)


def test_pyramid_reconstruction_1000(rng):
    x = rng.uniform(size=(1000, 16, 16, 3))
    assert np.max(np.abs(collapse(laplacian_pyramid(x, 3)) - x)) <= 1e-6


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(8, 24), st.integers(8, 24), st.just(3)), elements=st.floats(0, 1)))
def test_pyramid_reconstruction_odd_sizes(x):
    assert np.max(np.abs(collapse(laplacian_pyramid(x, 3)) - x)) <= 1e-6
