"""Raster image container, PNG/JPEG decode, patch views, and channel statistics.

Every stage of the pipeline consumes the one layout defined here: row-major
interleaved RGB, 8 bits per sample. Images are immutable after construction
so they can be shared freely across concurrent workers.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import CorruptStream, OutOfBounds, UnsupportedFormat

PATCH_SIZES = (64, 128, 256)

_PNG_MAGIC = b"\x89PNG\r\n\x1a\n"
_JPEG_MAGIC = b"\xff\xd8"


class Manipulation(Enum):
    """Post-processing class attached to a patch."""

    UNALTERED = "unaltered"
    JPEG_COMPRESSED = "jpeg"
    GAMMA_CORRECTED = "gamma"
    RESIZED = "resized"
    EMD_RESIDUE = "emd"


class RasterImage:
    """Immutable 8-bit RGB raster.

    Wraps an (height, width, 3) uint8 array; the buffer is copied on
    construction and marked read-only.
    """

    __slots__ = ("_pixels",)

    def __init__(self, pixels) -> None:
        arr = np.asarray(pixels)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise UnsupportedFormat(
                f"expected an (H, W, 3) RGB array, got shape {arr.shape}"
            )
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise UnsupportedFormat("image must have at least one pixel")
        arr = arr.astype(np.uint8, copy=True)
        arr.setflags(write=False)
        self._pixels = arr

    @property
    def pixels(self) -> np.ndarray:
        """Read-only (H, W, 3) uint8 view."""
        return self._pixels

    @property
    def width(self) -> int:
        return self._pixels.shape[1]

    @property
    def height(self) -> int:
        return self._pixels.shape[0]

    @property
    def channels(self) -> int:
        return 3

    def tobytes(self) -> bytes:
        """Row-major interleaved RGB samples."""
        return self._pixels.tobytes()

    def __eq__(self, other) -> bool:
        if not isinstance(other, RasterImage):
            return NotImplemented
        return np.array_equal(self._pixels, other._pixels)

    def __hash__(self):
        return hash((self.width, self.height, self.tobytes()))

    def __repr__(self) -> str:
        return f"RasterImage({self.width}x{self.height})"


@dataclass(frozen=True)
class PatchRef:
    """Square view into a source image with provenance."""

    source_id: str
    x0: int
    y0: int
    size: int
    label: int = 0
    manipulation: Manipulation = Manipulation.UNALTERED

    def __post_init__(self) -> None:
        if self.size < 1:
            raise OutOfBounds(f"patch size must be positive, got {self.size}")
        if self.x0 < 0 or self.y0 < 0:
            raise OutOfBounds(f"negative patch offset ({self.x0}, {self.y0})")

    def bounds_ok(self, image: RasterImage) -> bool:
        return self.x0 + self.size <= image.width and self.y0 + self.size <= image.height


@dataclass(frozen=True)
class ChannelStats:
    """Per-channel population mean and standard deviation on the [0, 1] scale."""

    mean: tuple[float, float, float]
    stddev: tuple[float, float, float]


def _sniff_format(head: bytes) -> str | None:
    if head.startswith(_PNG_MAGIC):
        return "png"
    if head.startswith(_JPEG_MAGIC):
        return "jpeg"
    return None


def decode_image(path) -> RasterImage:
    """Decode an RGB PNG or baseline JPEG file.

    JPEG decoding takes the accurate (non-fast) IDCT path of the underlying
    codec so forensic traces are deterministic across platforms.
    """
    path = Path(path)
    try:
        head = path.open("rb").read(8)
    except OSError as exc:
        raise CorruptStream(f"cannot read {path}: {exc}") from exc
    kind = _sniff_format(head)
    if kind is None:
        raise UnsupportedFormat(f"{path}: not a PNG or JPEG stream")
    try:
        with Image.open(path) as im:
            if im.format not in ("PNG", "JPEG"):
                raise UnsupportedFormat(f"{path}: format {im.format} not supported")
            if im.format == "JPEG" and "progression" in im.info:
                raise UnsupportedFormat(f"{path}: progressive JPEG not supported")
            if im.mode != "RGB":
                raise UnsupportedFormat(
                    f"{path}: mode {im.mode} not supported, pipeline requires RGB"
                )
            arr = np.asarray(im)
    except UnsupportedFormat:
        raise
    except Exception as exc:  # Pillow raises OSError/SyntaxError on bad streams
        raise CorruptStream(f"{path}: {exc}") from exc
    return RasterImage(arr)


def decode_jpeg_bytes(data: bytes) -> RasterImage:
    """Decode an in-memory baseline JPEG stream."""
    try:
        with Image.open(io.BytesIO(data)) as im:
            if im.format != "JPEG":
                raise UnsupportedFormat("stream is not a JPEG")
            if im.mode != "RGB":
                im = im.convert("RGB")
            arr = np.asarray(im)
    except UnsupportedFormat:
        raise
    except Exception as exc:
        raise CorruptStream(f"bad JPEG stream: {exc}") from exc
    return RasterImage(arr)


def encode_png(image: RasterImage) -> bytes:
    """Losslessly encode to PNG (RGB8)."""
    buf = io.BytesIO()
    Image.fromarray(image.pixels, "RGB").save(buf, "PNG")
    return buf.getvalue()


def save_png(image: RasterImage, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(image.pixels, "RGB").save(path, "PNG")
    return path


def _region_stats(region: np.ndarray) -> ChannelStats:
    # Exact integer accumulation: bit-reproducible and invariant under any
    # permutation of the samples (e.g. patch rotation).
    n = region.shape[0] * region.shape[1]
    samples = region.reshape(n, 3).astype(np.int64)
    s1 = samples.sum(axis=0)
    s2 = (samples * samples).sum(axis=0)
    mean = s1 / (n * 255.0)
    var = s2 / (n * 255.0 * 255.0) - mean * mean
    std = np.sqrt(np.maximum(var, 0.0))  # population stddev: fixed patch, not a sample
    return ChannelStats(mean=tuple(mean.tolist()), stddev=tuple(std.tolist()))


def channel_stats(patch: PatchRef, image: RasterImage) -> ChannelStats:
    """Population mean/stddev of the patch samples normalized by 255."""
    if not patch.bounds_ok(image):
        raise OutOfBounds(
            f"patch ({patch.x0},{patch.y0},{patch.size}) exceeds "
            f"{image.width}x{image.height} image"
        )
    region = image.pixels[patch.y0 : patch.y0 + patch.size, patch.x0 : patch.x0 + patch.size]
    return _region_stats(region)


def image_stats(image: RasterImage) -> ChannelStats:
    """Whole-image variant of channel_stats."""
    return _region_stats(image.pixels)


def extract_patch(image: RasterImage, ref: PatchRef) -> RasterImage:
    """Copy the size x size x 3 region referenced by `ref`."""
    if not ref.bounds_ok(image):
        raise OutOfBounds(
            f"patch ({ref.x0},{ref.y0},{ref.size}) exceeds "
            f"{image.width}x{image.height} image"
        )
    region = image.pixels[ref.y0 : ref.y0 + ref.size, ref.x0 : ref.x0 + ref.size]
    return RasterImage(region)
