"""Deterministic post-processing transforms.

These serve double duty: training-time augmentation and the manipulation
classes of the 4-way detection task (JPEG compression at qualities 90/70,
resizing by 0.5/0.8/1.5/2.0, gamma correction at 0.8/1.2, quarter-turn
rotations).

JPEG quality follows IJG semantics: the Annex-K base quantization tables are
scaled by 5000/q for q < 50, else 200 - 2q, each entry floor((base*scale+50)/100)
clamped to [1, 255]. Chroma is 4:2:0 subsampled by default.
"""

from __future__ import annotations

import io
from enum import Enum

import numpy as np
from PIL import Image

from .errors import OutputTooSmall
from .imagecore import Manipulation, RasterImage, decode_jpeg_bytes

# ISO/IEC 10918-1 Annex K base quantization tables, natural (row-major) order.
ANNEX_K_LUMA = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.int64,
)
ANNEX_K_CHROMA = np.array(
    [
        [17, 18, 24, 47, 99, 99, 99, 99],
        [18, 21, 26, 66, 99, 99, 99, 99],
        [24, 26, 56, 99, 99, 99, 99, 99],
        [47, 66, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
    ],
    dtype=np.int64,
)

# Bicubic convolution kernel parameter (Catmull-Rom-equivalent).
BICUBIC_A = -0.5


class ManipSpec(Enum):
    """The augmentation menu, one member per transform/parameter pair."""

    JPEG_Q90 = "jpeg90"
    JPEG_Q70 = "jpeg70"
    RESIZE_05 = "resize05"
    RESIZE_08 = "resize08"
    RESIZE_15 = "resize15"
    RESIZE_20 = "resize20"
    GAMMA_08 = "gamma08"
    GAMMA_12 = "gamma12"
    ROT_0 = "rot0"
    ROT_90 = "rot90"
    ROT_180 = "rot180"
    ROT_270 = "rot270"

    @classmethod
    def parse(cls, token: str) -> "ManipSpec":
        token = token.strip().lower()
        for member in cls:
            if member.value == token:
                return member
        raise ValueError(f"unknown augmentation op: {token!r}")


# Forensic class each op belongs to (rotations are lossless permutations and
# stay in the unaltered class).
MANIP_CLASS = {
    ManipSpec.JPEG_Q90: Manipulation.JPEG_COMPRESSED,
    ManipSpec.JPEG_Q70: Manipulation.JPEG_COMPRESSED,
    ManipSpec.RESIZE_05: Manipulation.RESIZED,
    ManipSpec.RESIZE_08: Manipulation.RESIZED,
    ManipSpec.RESIZE_15: Manipulation.RESIZED,
    ManipSpec.RESIZE_20: Manipulation.RESIZED,
    ManipSpec.GAMMA_08: Manipulation.GAMMA_CORRECTED,
    ManipSpec.GAMMA_12: Manipulation.GAMMA_CORRECTED,
    ManipSpec.ROT_0: Manipulation.UNALTERED,
    ManipSpec.ROT_90: Manipulation.UNALTERED,
    ManipSpec.ROT_180: Manipulation.UNALTERED,
    ManipSpec.ROT_270: Manipulation.UNALTERED,
}


def ijg_quant_table(base: np.ndarray, quality: int) -> np.ndarray:
    """Scale an Annex-K base table to the given IJG quality (1..100)."""
    if not 1 <= quality <= 100:
        raise ValueError(f"quality must be in 1..100, got {quality}")
    if quality < 50:
        scale = 5000 // quality
    else:
        scale = 200 - 2 * quality
    table = (base * scale + 50) // 100
    return np.clip(table, 1, 255).astype(np.int64)


def jpeg_quant_tables(quality: int) -> tuple[np.ndarray, np.ndarray]:
    """(luma, chroma) quantization tables for the given quality."""
    return (
        ijg_quant_table(ANNEX_K_LUMA, quality),
        ijg_quant_table(ANNEX_K_CHROMA, quality),
    )


def jpeg_encode(image: RasterImage, quality: int, chroma: str = "420") -> bytes:
    """Encode as baseline JPEG with explicitly computed quantization tables."""
    if chroma not in ("420", "444"):
        raise ValueError(f"chroma must be '420' or '444', got {chroma!r}")
    luma_t, chroma_t = jpeg_quant_tables(quality)
    subsampling = 2 if chroma == "420" else 0
    buf = io.BytesIO()
    Image.fromarray(image.pixels, "RGB").save(
        buf,
        "JPEG",
        qtables=[luma_t.ravel().tolist(), chroma_t.ravel().tolist()],
        subsampling=subsampling,
        optimize=False,
        progressive=False,
    )
    return buf.getvalue()


def jpeg_compress(image: RasterImage, quality: int, chroma: str = "420") -> RasterImage:
    """Round-trip through baseline JPEG at the given quality."""
    return decode_jpeg_bytes(jpeg_encode(image, quality, chroma))


def _cubic_weights(t: np.ndarray) -> np.ndarray:
    """Keys cubic convolution weights for the four taps around fraction t.

    Returns shape t.shape + (4,) for taps at offsets (-1, 0, 1, 2).
    """
    a = BICUBIC_A

    def w(d):
        d = np.abs(d)
        near = (a + 2.0) * d**3 - (a + 3.0) * d**2 + 1.0
        far = a * d**3 - 5.0 * a * d**2 + 8.0 * a * d - 4.0 * a
        return np.where(d <= 1.0, near, np.where(d < 2.0, far, 0.0))

    return np.stack([w(t + 1.0), w(t), w(1.0 - t), w(2.0 - t)], axis=-1)


def _resample_axis(arr: np.ndarray, out_len: int, factor: float) -> np.ndarray:
    """Cubic-convolution resample along axis 0 with edge-clamped taps."""
    n = arr.shape[0]
    # pixel-center mapping; factor 1.0 lands exactly on source samples
    coords = (np.arange(out_len, dtype=np.float64) + 0.5) / factor - 0.5
    base = np.floor(coords).astype(np.int64)
    frac = coords - base
    weights = _cubic_weights(frac)  # (out_len, 4)
    taps = np.stack([base - 1, base, base + 1, base + 2], axis=-1)
    taps = np.clip(taps, 0, n - 1)
    gathered = arr[taps]  # (out_len, 4, ...)
    expand = (slice(None), slice(None)) + (None,) * (arr.ndim - 1)
    return np.sum(gathered * weights[expand], axis=1)


def resize(image: RasterImage, factor: float) -> RasterImage:
    """Bicubic resample by a scale factor; output dims are floor(factor * dim)."""
    if factor <= 0.0:
        raise OutputTooSmall(f"factor must be positive, got {factor}")
    out_h = int(np.floor(factor * image.height))
    out_w = int(np.floor(factor * image.width))
    if out_h < 1 or out_w < 1:
        raise OutputTooSmall(
            f"factor {factor} on {image.width}x{image.height} yields an empty image"
        )
    data = image.pixels.astype(np.float64)
    data = _resample_axis(data, out_h, factor)
    data = np.moveaxis(_resample_axis(np.moveaxis(data, 1, 0), out_w, factor), 0, 1)
    return RasterImage(np.clip(np.rint(data), 0, 255).astype(np.uint8))


def gamma_correct(image: RasterImage, gamma: float) -> RasterImage:
    """Power-law remap in the stored sample domain: out = 255*(in/255)^gamma."""
    if gamma <= 0.0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    levels = np.arange(256, dtype=np.float64) / 255.0
    lut = np.clip(np.rint(255.0 * levels**gamma), 0, 255).astype(np.uint8)
    return RasterImage(lut[image.pixels])


def rotate(image: RasterImage, quarter_turns: int) -> RasterImage:
    """Lossless counterclockwise rotation by quarter turns (mod 4)."""
    k = quarter_turns % 4
    return RasterImage(np.rot90(image.pixels, k=k, axes=(0, 1)))


def apply_manip(image: RasterImage, spec: ManipSpec, chroma: str = "420") -> RasterImage:
    """Apply one augmentation op."""
    if spec is ManipSpec.JPEG_Q90:
        return jpeg_compress(image, 90, chroma)
    if spec is ManipSpec.JPEG_Q70:
        return jpeg_compress(image, 70, chroma)
    if spec is ManipSpec.RESIZE_05:
        return resize(image, 0.5)
    if spec is ManipSpec.RESIZE_08:
        return resize(image, 0.8)
    if spec is ManipSpec.RESIZE_15:
        return resize(image, 1.5)
    if spec is ManipSpec.RESIZE_20:
        return resize(image, 2.0)
    if spec is ManipSpec.GAMMA_08:
        return gamma_correct(image, 0.8)
    if spec is ManipSpec.GAMMA_12:
        return gamma_correct(image, 1.2)
    if spec is ManipSpec.ROT_0:
        return rotate(image, 0)
    if spec is ManipSpec.ROT_90:
        return rotate(image, 1)
    if spec is ManipSpec.ROT_180:
        return rotate(image, 2)
    if spec is ManipSpec.ROT_270:
        return rotate(image, 3)
    raise ValueError(f"unhandled op {spec}")


def center_crop(image: RasterImage, size: int) -> RasterImage:
    """Optional fixed-size crop used to emulate fixed-dimension outputs."""
    if image.width < size or image.height < size:
        raise OutputTooSmall(
            f"cannot center-crop {image.width}x{image.height} to {size}"
        )
    x0 = (image.width - size) // 2
    y0 = (image.height - size) // 2
    return RasterImage(image.pixels[y0 : y0 + size, x0 : x0 + size])
