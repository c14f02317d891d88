"""Image file I/O: binary PPM (P6, 8-bit) natively, PNG via Pillow.

In memory an image is a float32 (H, W, 3) array with values in [0, 1];
writers quantize to 8 bits, so one save/load round trip moves a pixel by
at most 1/255 and a second round trip is exact.
"""

from __future__ import annotations

import os

import numpy as np
from PIL import Image as _PILImage


class ImageFormatError(ValueError):
    """Unreadable or unsupported image file."""


def to_uint8(img):
    return (np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def from_uint8(raw):
    return (raw.astype(np.float32) / 255.0)


def _read_ppm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    # header: magic, width, height, maxval, single whitespace, then raster
    fields = []
    i = 0
    while len(fields) < 4:
        while i < len(data) and data[i:i + 1].isspace():
            i += 1
        if i < len(data) and data[i:i + 1] == b"#":
            while i < len(data) and data[i:i + 1] != b"\n":
                i += 1
            continue
        start = i
        while i < len(data) and not data[i:i + 1].isspace():
            i += 1
        if start == i:
            raise ImageFormatError(f"{path}: truncated PPM header")
        fields.append(data[start:i])
    i += 1  # single whitespace byte after maxval
    if fields[0] != b"P6":
        raise ImageFormatError(f"{path}: not a binary PPM (P6) file")
    try:
        w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    except ValueError as e:
        raise ImageFormatError(f"{path}: bad PPM header: {e}") from e
    if maxval != 255:
        raise ImageFormatError(f"{path}: only 8-bit PPM supported, maxval={maxval}")
    raster = data[i:i + w * h * 3]
    if len(raster) != w * h * 3:
        raise ImageFormatError(f"{path}: truncated PPM raster")
    return from_uint8(np.frombuffer(raster, np.uint8).reshape(h, w, 3))


def _write_ppm(img, path):
    raw = to_uint8(img)
    h, w = raw.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(raw.tobytes())


def load_image(path):
    """Read a PNG or binary PPM into a float32 (H, W, 3) array in [0, 1]."""
    path = os.fspath(path)
    ext = os.path.splitext(path)[1].lower()
    if ext == ".ppm":
        return _read_ppm(path)
    if ext == ".png":
        try:
            with _PILImage.open(path) as im:
                return from_uint8(np.asarray(im.convert("RGB")))
        except Exception as e:
            raise ImageFormatError(f"{path}: {e}") from e
    raise ImageFormatError(f"{path}: unsupported image format (use .png or .ppm)")


def save_image(img, path):
    """Write a float [0,1] (H, W, 3) array as PPM or PNG by extension."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ImageFormatError(f"expected (H, W, 3) image, got shape {img.shape}")
    path = os.fspath(path)
    ext = os.path.splitext(path)[1].lower()
    if ext == ".ppm":
        _write_ppm(img, path)
    elif ext == ".png":
        _PILImage.fromarray(to_uint8(img)).save(path, format="PNG")
    else:
        raise ImageFormatError(f"{path}: unsupported image format (use .png or .ppm)")
