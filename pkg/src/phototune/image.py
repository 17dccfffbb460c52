"""Image buffers, PNG/PPM codecs, resampling, colour conversion and pyramids.

An image is a ``numpy.ndarray`` of shape ``(H, W, 3)`` holding display-referred
RGB values in ``[0, 1]``.  Most helpers also accept a leading batch axis,
``(N, H, W, 3)``, which the policy feature path relies on.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

__all__ = [
    "DecodeError",
    "UnsupportedFormatError",
    "LaplacianPyramid",
    "as_image",
    "decode",
    "encode",
    "read_image",
    "write_image",
    "resize_bilinear",
    "resize_for_policy",
    "luminance",
    "rgb_to_yuv",
    "laplacian_pyramid",
    "collapse",
    "pyr_down",
    "pyr_up",
]

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"

# BT.601 full-range (JFIF) coefficients.
YUV_MATRIX = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168736, -0.331264, 0.5],
        [0.5, -0.418688, -0.081312],
    ]
)
LUMA = YUV_MATRIX[0]

_BINOMIAL5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


class DecodeError(ValueError):
    """Raised for malformed image streams; ``offset`` is the byte position."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class UnsupportedFormatError(ValueError):
    pass


def as_image(img, *, copy: bool = False) -> np.ndarray:
    """Validate and return ``img`` as a float64 ``(H, W, 3)`` array."""
    arr = np.array(img, dtype=np.float64, copy=copy) if copy else np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError("image must be at least 1x1")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains non-finite values")
    return arr


# ---------------------------------------------------------------------------
# codecs


def decode(data: bytes) -> np.ndarray:
    """Decode a PNG or binary PPM (P6) byte stream into an image."""
    data = bytes(data)
    if data[:2] == b"P6":
        return _decode_ppm(data)
    if data[:8] == PNG_SIGNATURE:
        return _decode_png(data)
    if len(data) < 8 and PNG_SIGNATURE.startswith(data) and data:
        raise DecodeError("truncated PNG signature", len(data))
    raise UnsupportedFormatError("stream is neither PNG nor binary PPM (P6)")


def encode(img, format: str = "png", bit_depth: int = 8) -> bytes:
    """Encode an image as ``png`` (8 or 16 bit) or ``ppm`` (8 or 16 bit P6)."""
    img = as_image(img)
    if bit_depth not in (8, 16):
        raise UnsupportedFormatError(f"unsupported bit depth {bit_depth}")
    maxval = 255 if bit_depth == 8 else 65535
    q = np.rint(np.clip(img, 0.0, 1.0) * maxval)
    h, w, _ = img.shape
    if bit_depth == 8:
        raw = q.astype(np.uint8)
    else:
        raw = q.astype(">u2")
    fmt = format.lower()
    if fmt == "ppm":
        return b"P6\n%d %d\n%d\n" % (w, h, maxval) + raw.tobytes()
    if fmt == "png":
        rows = raw.reshape(h, -1).view(np.uint8).reshape(h, -1)
        filtered = np.concatenate([np.zeros((h, 1), np.uint8), rows], axis=1)
        ihdr = struct.pack(">IIBBBBB", w, h, bit_depth, 2, 0, 0, 0)
        return (
            PNG_SIGNATURE
            + _png_chunk(b"IHDR", ihdr)
            + _png_chunk(b"IDAT", zlib.compress(filtered.tobytes(), 6))
            + _png_chunk(b"IEND", b"")
        )
    raise UnsupportedFormatError(f"unknown format {format!r}")


def read_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode(fh.read())


def write_image(path, img, format: str | None = None, bit_depth: int = 8) -> None:
    path = str(path)
    if format is None:
        format = "ppm" if path.lower().endswith((".ppm", ".pnm")) else "png"
    data = encode(img, format, bit_depth)
    with open(path, "wb") as fh:
        fh.write(data)


def _png_chunk(tag: bytes, payload: bytes) -> bytes:
    crc = zlib.crc32(tag + payload) & 0xFFFFFFFF
    return struct.pack(">I", len(payload)) + tag + payload + struct.pack(">I", crc)


def _decode_ppm(data: bytes) -> np.ndarray:
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise DecodeError("truncated PPM header", pos)
        if data[pos : pos + 1] == b"#":
            end = data.find(b"\n", pos)
            if end < 0:
                raise DecodeError("unterminated PPM comment", pos)
            pos = end + 1
            continue
        start = pos
        while pos < len(data) and data[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise DecodeError("expected an integer in PPM header", start)
        fields.append(int(data[start:pos]))
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise DecodeError("missing whitespace after PPM header", pos)
    pos += 1
    w, h, maxval = fields
    if w < 1 or h < 1:
        raise DecodeError("PPM dimensions must be positive", 2)
    if not 0 < maxval < 65536:
        raise UnsupportedFormatError(f"unsupported PPM maxval {maxval}")
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    nbytes = w * h * 3 * np.dtype(dtype).itemsize
    if len(data) - pos < nbytes:
        raise DecodeError(f"truncated PPM pixel data: need {nbytes} bytes", len(data))
    px = np.frombuffer(data, dtype=dtype, count=w * h * 3, offset=pos)
    return px.reshape(h, w, 3).astype(np.float64) / maxval


_PNG_CHANNELS = {0: 1, 2: 3, 4: 2, 6: 4}


def _decode_png(data: bytes) -> np.ndarray:
    pos = 8
    header = None
    idat = []
    while True:
        if pos + 8 > len(data):
            raise DecodeError("truncated PNG chunk header", pos)
        (length,) = struct.unpack(">I", data[pos : pos + 4])
        tag = data[pos + 4 : pos + 8]
        body_start = pos + 8
        if body_start + length + 4 > len(data):
            raise DecodeError(f"truncated PNG chunk {tag!r}", pos)
        body = data[body_start : body_start + length]
        (crc,) = struct.unpack(">I", data[body_start + length : body_start + length + 4])
        if zlib.crc32(tag + body) & 0xFFFFFFFF != crc:
            raise DecodeError(f"CRC mismatch in PNG chunk {tag!r}", pos)
        if tag == b"IHDR":
            if length != 13:
                raise DecodeError("bad IHDR length", pos)
            header = struct.unpack(">IIBBBBB", body)
        elif tag == b"IDAT":
            idat.append(body)
        elif tag == b"IEND":
            break
        elif header is None:
            raise DecodeError("PNG stream does not start with IHDR", pos)
        pos = body_start + length + 4
    if header is None:
        raise DecodeError("missing IHDR chunk", 8)
    w, h, depth, ctype, _, _, interlace = header
    if depth not in (8, 16):
        raise UnsupportedFormatError(f"unsupported PNG bit depth {depth}")
    if ctype not in _PNG_CHANNELS:
        raise UnsupportedFormatError(f"unsupported PNG colour type {ctype}")
    if interlace != 0:
        raise UnsupportedFormatError("interlaced PNG is not supported")
    try:
        raw = zlib.decompress(b"".join(idat))
    except zlib.error as exc:
        raise DecodeError(f"corrupt IDAT stream: {exc}", pos) from None
    channels = _PNG_CHANNELS[ctype]
    bpp = channels * depth // 8
    stride = w * bpp
    if len(raw) < h * (stride + 1):
        raise DecodeError("IDAT stream shorter than image", pos)
    rows = _png_unfilter(np.frombuffer(raw, np.uint8, count=h * (stride + 1)).reshape(h, stride + 1), bpp)
    if depth == 16:
        px = rows.reshape(h, w * channels * 2).view(">u2").reshape(h, w, channels).astype(np.float64) / 65535.0
    else:
        px = rows.reshape(h, w, channels).astype(np.float64) / 255.0
    if channels in (1, 2):
        px = np.repeat(px[:, :, :1], 3, axis=2)
    return np.ascontiguousarray(px[:, :, :3])


def _png_unfilter(scan: np.ndarray, bpp: int) -> np.ndarray:
    h, n = scan.shape[0], scan.shape[1] - 1
    out = np.zeros((h, n), dtype=np.uint8)
    prev = np.zeros(n, dtype=np.int32)
    for y in range(h):
        ftype = scan[y, 0]
        line = scan[y, 1:].astype(np.int32)
        if ftype == 0:
            cur = line
        elif ftype == 2:
            cur = (line + prev) & 0xFF
        elif ftype in (1, 3, 4):
            cur = np.zeros(n, dtype=np.int32)
            for x in range(n):
                a = cur[x - bpp] if x >= bpp else 0
                if ftype == 1:
                    pred = a
                elif ftype == 3:
                    pred = (a + prev[x]) >> 1
                else:
                    b = prev[x]
                    c = prev[x - bpp] if x >= bpp else 0
                    p = a + b - c
                    pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
                    pred = a if pa <= pb and pa <= pc else (b if pb <= pc else c)
                cur[x] = (line[x] + pred) & 0xFF
        else:
            raise DecodeError(f"unknown PNG filter type {ftype} on row {y}", 0)
        out[y] = cur
        prev = cur
    return out


# ---------------------------------------------------------------------------
# resampling and colour


def _bilinear_axis(n_in: int, n_out: int):
    # half-pixel centres, edge-clamped
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    return lo, hi, frac


def resize_bilinear(img, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with half-pixel centres; works on ``(..., H, W, C)``."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[-3], img.shape[-2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    lo, hi, fy = _bilinear_axis(h, out_h)
    rows = img[..., lo, :, :] * (1.0 - fy)[:, None, None] + img[..., hi, :, :] * fy[:, None, None]
    lo, hi, fx = _bilinear_axis(w, out_w)
    out = rows[..., :, lo, :] * (1.0 - fx)[:, None] + rows[..., :, hi, :] * fx[:, None]
    return out


def resize_for_policy(img, size: int = 64) -> np.ndarray:
    """Squash an image to ``size x size``; large reductions are box-filtered first."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[-3], img.shape[-2]
    fy, fx = max(h // (2 * size), 1), max(w // (2 * size), 1)
    if fy > 1 or fx > 1:
        hh, ww = (h // fy) * fy, (w // fx) * fx
        img = img[..., :hh, :ww, :]
        shape = img.shape[:-3] + (hh // fy, fy, ww // fx, fx, img.shape[-1])
        img = img.reshape(shape).mean(axis=(-4, -2))
    return resize_bilinear(img, size, size)


def luminance(img) -> np.ndarray:
    """BT.601 luma plane of ``(..., H, W, 3)``."""
    img = np.asarray(img, dtype=np.float64)
    return img[..., 0] * LUMA[0] + img[..., 1] * LUMA[1] + img[..., 2] * LUMA[2]


def rgb_to_yuv(img) -> np.ndarray:
    """Full-range BT.601 YUV: Y in [0, 1], U and V in [-0.5, 0.5]."""
    img = np.asarray(img, dtype=np.float64)
    out = np.empty_like(img)
    out[..., 0] = luminance(img)
    for k in (1, 2):
        row = YUV_MATRIX[k]
        out[..., k] = img[..., 0] * row[0] + img[..., 1] * row[1] + img[..., 2] * row[2]
    return out


# ---------------------------------------------------------------------------
# pyramids


@dataclass
class LaplacianPyramid:
    """Band-pass levels, finest first, followed by the low-pass residual."""

    levels: list
    base_size: tuple

    @property
    def bands(self) -> list:
        return self.levels[:-1]

    @property
    def residual(self) -> np.ndarray:
        return self.levels[-1]


def _blur(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    # spatial axes are -3 and -2 in (..., H, W, C) layout
    out = ndimage.convolve1d(img, kernel, axis=-3, mode="mirror")
    return ndimage.convolve1d(out, kernel, axis=-2, mode="mirror")


def pyr_down(img) -> np.ndarray:
    """Binomial blur followed by 2x decimation."""
    img = np.asarray(img, dtype=np.float64)
    return _blur(img, _BINOMIAL5)[..., ::2, ::2, :]


def pyr_up(img, out_h: int, out_w: int) -> np.ndarray:
    """Zero-insertion upsampling to ``(out_h, out_w)`` with the binomial interpolation kernel."""
    img = np.asarray(img, dtype=np.float64)
    shape = img.shape[:-3] + (out_h, out_w, img.shape[-1])
    up = np.zeros(shape)
    up[..., ::2, ::2, :] = img[..., : (out_h + 1) // 2, : (out_w + 1) // 2, :]
    return _blur(up, 2.0 * _BINOMIAL5)


def laplacian_pyramid(img, levels: int = 3) -> LaplacianPyramid:
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[-3], img.shape[-2]
    if levels < 1:
        raise ValueError("levels must be >= 1")
    if min(h, w) < 2**levels:
        raise ValueError(f"image {h}x{w} too small for a {levels}-level pyramid")
    bands = []
    cur = img
    for _ in range(levels):
        low = pyr_down(cur)
        bands.append(cur - pyr_up(low, cur.shape[-3], cur.shape[-2]))
        cur = low
    bands.append(cur)
    return LaplacianPyramid(levels=bands, base_size=(h, w))


def collapse(pyr: LaplacianPyramid) -> np.ndarray:
    cur = pyr.levels[-1]
    for band in reversed(pyr.levels[:-1]):
        cur = band + pyr_up(cur, band.shape[-3], band.shape[-2])
    return cur
