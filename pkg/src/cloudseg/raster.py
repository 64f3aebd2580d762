"""Multiband raster scenes and the MSR1 binary container.

MSR1 layout (little-endian, no padding, no checksum):

    bytes 0-3   magic "MSR1"
    u32         width
    u32         height
    u16         bands
    u16         dtype code (0=u8, 1=u16, 2=f32)
    u8          tag length L
    L bytes     UTF-8 tag
    data        width*height*bands samples, band-sequential, each band
                row-major

Scenes hold raw sensor counts; `normalize_reflectance` maps them to
reflectance floats in [0, 1] (u8 scaled by 255, u16 by the conventional
1/10000 surface-reflectance factor, f32 clamped).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, RangeError, ValidationError

MAGIC = b"MSR1"

DTYPE_CODES = {0: np.uint8, 1: np.uint16, 2: np.float32}
DTYPE_NAMES = {np.dtype(np.uint8): 0, np.dtype(np.uint16): 1, np.dtype(np.float32): 2}

U16_REFLECTANCE_SCALE = 10000.0

MAX_BANDS = 16
MAX_TAG_BYTES = 255


@dataclass
class RasterScene:
    """A bands x height x width sample cube plus a free-text provenance tag.

    `data` is stored band-sequential (band-major), row-major within a band,
    exactly as serialized.
    """

    width: int
    height: int
    bands: int
    data: np.ndarray  # shape (bands, height, width), dtype u8/u16/f32
    tag: str = ""

    def validate(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ValidationError(
                f"scene dims must be >= 1, got {self.width}x{self.height}"
            )
        if not 1 <= self.bands <= MAX_BANDS:
            raise ValidationError(f"bands must be in [1, {MAX_BANDS}], got {self.bands}")
        if self.data.dtype not in DTYPE_NAMES:
            raise ValidationError(f"unsupported dtype {self.data.dtype}")
        expected = (self.bands, self.height, self.width)
        if self.data.shape != expected:
            raise ValidationError(
                f"data shape {self.data.shape} != (bands, height, width) {expected}"
            )
        if len(self.tag.encode("utf-8")) > MAX_TAG_BYTES:
            raise ValidationError(f"tag exceeds {MAX_TAG_BYTES} bytes")

    def validate_mask(self) -> None:
        """Masks are single-band u8 with samples in {0, 255} (255 = cloud)."""
        self.validate()
        if self.bands != 1 or self.data.dtype != np.uint8:
            raise ValidationError("mask must be a single-band u8 scene")
        bad = (self.data != 0) & (self.data != 255)
        if bad.any():
            y, x = np.argwhere(bad[0])[0]
            raise ValidationError(
                f"mask sample at ({x}, {y}) is {self.data[0, y, x]}, expected 0 or 255"
            )


@dataclass
class Patch:
    """A normalized square window cut from a parent scene."""

    origin_x: int
    origin_y: int
    size: int
    pixels: np.ndarray = field(repr=False)  # (bands, size, size) float32 in [0, 1]


def write_msr(scene: RasterScene, path) -> None:
    """Serialize a scene to `path` in the MSR1 format.

    Validates the scene before any byte is written, so a failed call never
    leaves a partial file behind.
    """
    scene.validate()
    tag_bytes = scene.tag.encode("utf-8")
    dtype = np.dtype(scene.data.dtype)
    header = MAGIC + struct.pack(
        "<IIHHB",
        scene.width,
        scene.height,
        scene.bands,
        DTYPE_NAMES[dtype],
        len(tag_bytes),
    )
    payload = np.ascontiguousarray(scene.data, dtype=dtype.newbyteorder("<"))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(tag_bytes)
        fh.write(payload.tobytes())


def read_msr(path) -> RasterScene:
    """Read an MSR1 file back into a RasterScene (bit-exact round trip)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 17 or raw[:4] != MAGIC:
        raise FormatError(f"{path}: not an MSR file")
    width, height, bands, dtype_code, tag_len = struct.unpack_from("<IIHHB", raw, 4)
    if dtype_code not in DTYPE_CODES:
        raise FormatError(f"{path}: unsupported dtype code {dtype_code}")
    dtype = np.dtype(DTYPE_CODES[dtype_code]).newbyteorder("<")
    offset = 17 + tag_len
    if len(raw) < offset:
        raise FormatError(f"{path}: truncated tag")
    tag = raw[17:offset].decode("utf-8")
    n_samples = width * height * bands
    expected = offset + n_samples * dtype.itemsize
    if len(raw) != expected:
        raise FormatError(
            f"{path}: payload length mismatch (file has {len(raw) - offset} data "
            f"bytes, header declares {n_samples * dtype.itemsize})"
        )
    data = np.frombuffer(raw, dtype=dtype, count=n_samples, offset=offset)
    data = data.astype(dtype.newbyteorder("=")).reshape(bands, height, width)
    scene = RasterScene(width=width, height=height, bands=bands, data=data, tag=tag)
    scene.validate()
    return scene


def normalize_reflectance(samples: np.ndarray) -> np.ndarray:
    """Map raw samples to float32 reflectance in [0, 1].

    u8 is full-scale (divide by 255); u16 uses the 1/10000 reflectance
    convention and clamps overshoot; f32 is clamped. Total function, and
    monotone non-decreasing in the raw value.
    """
    dtype = samples.dtype
    if dtype == np.uint8:
        return (samples.astype(np.float32) / np.float32(255.0)).astype(np.float32)
    if dtype == np.uint16:
        scaled = samples.astype(np.float32) / np.float32(U16_REFLECTANCE_SCALE)
        return np.clip(scaled, 0.0, 1.0).astype(np.float32)
    if dtype == np.float32:
        return np.clip(samples, 0.0, 1.0).astype(np.float32)
    raise ValidationError(f"unsupported dtype {dtype}")


def extract_patch(scene: RasterScene, x: int, y: int, size: int) -> Patch:
    """Cut the normalized window [x, x+size) x [y, y+size) out of `scene`."""
    if size < 1:
        raise RangeError(f"patch size must be >= 1, got {size}")
    if x < 0 or x + size > scene.width:
        raise RangeError(
            f"x window [{x}, {x + size}) outside scene width {scene.width}"
        )
    if y < 0 or y + size > scene.height:
        raise RangeError(
            f"y window [{y}, {y + size}) outside scene height {scene.height}"
        )
    window = scene.data[:, y : y + size, x : x + size]
    return Patch(origin_x=x, origin_y=y, size=size, pixels=normalize_reflectance(window))


def crop_scene(scene: RasterScene, x: int, y: int, size: int) -> RasterScene:
    """Raw (unnormalized) square crop, keeping the parent dtype and tag."""
    if x < 0 or x + size > scene.width:
        raise RangeError(f"x window [{x}, {x + size}) outside scene width {scene.width}")
    if y < 0 or y + size > scene.height:
        raise RangeError(f"y window [{y}, {y + size}) outside scene height {scene.height}")
    data = np.ascontiguousarray(scene.data[:, y : y + size, x : x + size])
    return RasterScene(width=size, height=size, bands=scene.bands, data=data, tag=scene.tag)
