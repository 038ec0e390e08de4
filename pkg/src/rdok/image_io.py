"""Image loading and saving plus the padded planar float representation.

Images travel through the toolkit as :class:`ImagePlanes`: three float64
channel rasters in [0, 1], padded by edge replication to a multiple of the
64-pixel coding grid.  Binary PPM (P6, maxval 255) is the normative file
format; PNG works through the same operations when Pillow is installed.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

GRID = 64


class ImageFormatError(Exception):
    """Unreadable, unsupported, or malformed image file."""


def _pad_to_grid(planes: np.ndarray) -> np.ndarray:
    """Edge-replicate a (3, h, w) array so both dimensions are multiples of 64.

    Replication (not zero fill) keeps the padding low-variance so border
    blocks are not artificially pushed toward fine coding levels.
    """
    _, h, w = planes.shape
    ph = GRID * ((h + GRID - 1) // GRID)
    pw = GRID * ((w + GRID - 1) // GRID)
    if ph == h and pw == w:
        return planes
    return np.pad(planes, ((0, 0), (0, ph - h), (0, pw - w)), mode="edge")


@dataclass(frozen=True, eq=False)
class ImagePlanes:
    """Planar RGB image in [0, 1] with padding bookkeeping.

    ``planes`` has shape (3, padded_height, padded_width).  ``width`` and
    ``height`` are the original, pre-padding dimensions; everything outside
    them is replicated border content and must never leak into metrics or
    saved files.
    """

    width: int
    height: int
    padded_width: int
    padded_height: int
    planes: np.ndarray

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be positive")
        if self.padded_width != GRID * ((self.width + GRID - 1) // GRID):
            raise ValueError("padded_width is not the ceil-to-64 of width")
        if self.padded_height != GRID * ((self.height + GRID - 1) // GRID):
            raise ValueError("padded_height is not the ceil-to-64 of height")
        if self.planes.shape != (3, self.padded_height, self.padded_width):
            raise ValueError("planes shape does not match padded dimensions")
        if self.planes.dtype != np.float64:
            raise ValueError("planes must be float64")
        lo = float(self.planes.min())
        hi = float(self.planes.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"samples outside [0, 1]: min={lo}, max={hi}")

    @classmethod
    def from_planes(cls, planes: np.ndarray, width: int | None = None,
                    height: int | None = None) -> "ImagePlanes":
        """Build from a (3, h, w) float array in [0, 1], applying padding."""
        planes = np.ascontiguousarray(planes, dtype=np.float64)
        if planes.ndim != 3 or planes.shape[0] != 3:
            raise ValueError("expected a (3, h, w) array")
        _, h, w = planes.shape
        width = w if width is None else width
        height = h if height is None else height
        padded = _pad_to_grid(planes)
        return cls(width, height, padded.shape[2], padded.shape[1], padded)

    def cropped(self) -> np.ndarray:
        """The original-size (3, height, width) view without padding."""
        return self.planes[:, : self.height, : self.width]

    def to_rgb8(self) -> np.ndarray:
        """Cropped (h, w, 3) uint8 raster; clamp to [0, 1], round half up."""
        v = np.clip(self.cropped(), 0.0, 1.0)
        return np.floor(v * 255.0 + 0.5).astype(np.uint8).transpose(1, 2, 0)


def _parse_ppm(data: bytes) -> np.ndarray:
    if not data.startswith(b"P6"):
        raise ImageFormatError("not a binary PPM (P6) file")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        token = data[start:pos]
        if not token.isdigit():
            raise ImageFormatError("malformed PPM header")
        fields.append(int(token))
    pos += 1  # single whitespace byte separates header from raster
    w, h, maxval = fields
    if w == 0 or h == 0:
        raise ImageFormatError("zero-sized image")
    if maxval != 255:
        raise ImageFormatError(f"unsupported PPM maxval {maxval} (need 255)")
    raster = data[pos : pos + 3 * w * h]
    if len(raster) < 3 * w * h:
        raise ImageFormatError("PPM raster truncated")
    rgb = np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3)
    return rgb


def _rgb8_to_planes(rgb: np.ndarray) -> ImagePlanes:
    planes = rgb.astype(np.float64).transpose(2, 0, 1) / 255.0
    return ImagePlanes.from_planes(planes)


def load_image(path: str | os.PathLike) -> ImagePlanes:
    """Load a PPM (or PNG, if Pillow is available) into ImagePlanes.

    Samples map to [0, 1] by v/255; padding is applied on load.
    """
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise ImageFormatError(f"cannot read {path}: {exc}") from exc
    if data.startswith(b"P6"):
        return _rgb8_to_planes(_parse_ppm(data))
    if data.startswith(b"\x89PNG"):
        return _rgb8_to_planes(_load_png(path))
    raise ImageFormatError(f"unsupported image format: {path}")


def _load_png(path) -> np.ndarray:
    try:
        from PIL import Image
    except ImportError as exc:
        raise ImageFormatError(
            "PNG support requires Pillow (pip install rdok[png])") from exc
    with Image.open(path) as im:
        rgb = np.asarray(im.convert("RGB"), dtype=np.uint8)
    if rgb.size == 0:
        raise ImageFormatError("zero-sized image")
    return rgb


def save_image(img: ImagePlanes, path: str | os.PathLike) -> None:
    """Write the cropped image; PPM unless the path ends in .png."""
    rgb = img.to_rgb8()
    if str(path).lower().endswith(".png"):
        try:
            from PIL import Image
        except ImportError as exc:
            raise ImageFormatError(
                "PNG support requires Pillow (pip install rdok[png])") from exc
        Image.fromarray(rgb, "RGB").save(path)
        return
    header = b"P6\n%d %d\n255\n" % (img.width, img.height)
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(rgb.tobytes())
    except OSError as exc:
        raise ImageFormatError(f"cannot write {path}: {exc}") from exc
