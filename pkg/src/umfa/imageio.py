"""8-bit RGB files <-> float tensors in [0, 1], plus the training-time resize.

Binary PPM (P6, maxval 255) is parsed by hand so that header and payload
problems map to distinct errors; PNG goes through Pillow.
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np
from PIL import Image

from umfa.tensor import Tensor

IMAGE_SUFFIXES = (".png", ".ppm")


class ImageFormatError(ValueError):
    """Base class for decode failures."""


class UnsupportedFormatError(ImageFormatError):
    pass


class CorruptHeaderError(ImageFormatError):
    pass


class TruncatedPixelDataError(ImageFormatError):
    pass


def _ppm_tokens(raw: bytes, count: int) -> tuple[list[bytes], int]:
    # header tokens separated by whitespace, '#' comments run to end of line
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace() and raw[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise CorruptHeaderError("corrupt header: PPM header ends early")
        tokens.append(raw[start:pos])
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise CorruptHeaderError("corrupt header: missing whitespace after maxval")
    return tokens, pos + 1


def decode_ppm(raw: bytes) -> np.ndarray:
    """Decode a P6 file into an ``(h, w, 3)`` uint8 array."""
    if raw[:2] != b"P6":
        raise UnsupportedFormatError("unsupported format: only binary P6 PPM is supported")
    tokens, offset = _ppm_tokens(raw, 4)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise CorruptHeaderError(f"corrupt header: non-numeric fields {tokens[1:]}") from None
    if width < 1 or height < 1:
        raise CorruptHeaderError(f"corrupt header: invalid size {width}x{height}")
    if maxval != 255:
        raise UnsupportedFormatError(f"unsupported format: maxval {maxval} (only 255)")
    need = width * height * 3
    payload = raw[offset:offset + need]
    if len(payload) < need:
        raise TruncatedPixelDataError(f"truncated pixel data: expected {need} bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)


def encode_ppm(pixels: np.ndarray) -> bytes:
    h, w, _ = pixels.shape
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(pixels, dtype=np.uint8).tobytes()


def _decode_png(raw: bytes) -> np.ndarray:
    try:
        img = Image.open(io.BytesIO(raw))
        img.load()
    except Exception as exc:  # Pillow raises a zoo of types for bad files
        raise CorruptHeaderError(f"corrupt header: cannot decode PNG ({exc})") from None
    if img.mode in ("RGB", "RGBA", "L", "P"):
        img = img.convert("RGB")
    else:
        raise UnsupportedFormatError(f"unsupported format: PNG mode {img.mode} (need 8-bit RGB/RGBA)")
    return np.asarray(img, dtype=np.uint8)


def load_image(path) -> Tensor:
    """Read a PNG or P6 PPM file as a ``(1, 3, h, w)`` tensor of ``byte / 255``."""
    raw = Path(path).read_bytes()
    if raw[:8] == b"\x89PNG\r\n\x1a\n":
        pixels = _decode_png(raw)
    elif raw[:2] == b"P6":
        pixels = decode_ppm(raw)
    else:
        raise UnsupportedFormatError(f"unsupported format: {path} is neither PNG nor P6 PPM")
    arr = pixels.transpose(2, 0, 1)[None].astype(np.float64) / 255.0
    return Tensor(arr)


def to_bytes(t: Tensor) -> np.ndarray:
    """Quantize ``(1, 3, h, w)`` values to ``(h, w, 3)`` bytes: clamp, then round half up."""
    if t.ndim != 4 or t.shape[:2] != (1, 3):
        raise ValueError(f"expected a (1, 3, h, w) image tensor, got shape {t.shape}")
    v = np.clip(t.data.astype(np.float64), 0.0, 1.0)
    q = np.floor(v * 255.0 + 0.5).astype(np.uint8)
    return q[0].transpose(1, 2, 0)


def save_image(t: Tensor, path) -> None:
    path = Path(path)
    pixels = to_bytes(t)
    if path.suffix.lower() == ".ppm":
        path.write_bytes(encode_ppm(pixels))
    else:
        Image.fromarray(pixels, mode="RGB").save(path, format="PNG")


def _bilinear_axis(src: int, dst: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # half-pixel centres: output i samples input at (i + 0.5) * src / dst - 0.5
    pos = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
    pos = np.clip(pos, 0.0, src - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, src - 1)
    return lo, hi, pos - lo


def resize_bilinear(t: Tensor, out_h: int, out_w: int) -> Tensor:
    n, c, h, w = t.shape
    if (out_h, out_w) == (h, w):
        return Tensor(t.data)
    y0, y1, fy = _bilinear_axis(h, out_h)
    x0, x1, fx = _bilinear_axis(w, out_w)
    d = t.data.astype(np.float64)
    rows = d[:, :, y0] * (1.0 - fy)[:, None] + d[:, :, y1] * fy[:, None]
    out = rows[..., x0] * (1.0 - fx) + rows[..., x1] * fx
    return Tensor(out)


def resize_center(t: Tensor, target: int) -> Tensor:
    """Scale the shorter side to ``target`` (bilinear), then centre-crop to ``target x target``."""
    if target < 16:
        raise ValueError(f"resize target must be >= 16, got {target}")
    n, c, h, w = t.shape
    if h < 2 or w < 2:
        raise ValueError(f"cannot resize a degenerate {h}x{w} image")
    scale = target / min(h, w)
    new_h = target if h <= w else max(target, round(h * scale))
    new_w = target if w <= h else max(target, round(w * scale))
    scaled = resize_bilinear(t, new_h, new_w)
    top = (new_h - target) // 2
    left = (new_w - target) // 2
    return Tensor(scaled.data[:, :, top:top + target, left:left + target])


def list_images(directory) -> list[Path]:
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file())
