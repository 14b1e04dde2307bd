"""Synthetic camera models for desk-scale ground truth.

Each model renders shared-luminance scenes, samples them through its Bayer
phase, demosaics with its interpolation kernel, adds its sensor noise, and
round-trips through its native JPEG quality. Those four trace families
(CFA phase, interpolation correlations, noise level, compression signature)
are the classic model-discriminating statistics, so a classifier trained on
the output has a real signal to find.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..augment import jpeg_compress
from ..errors import InvalidSpec
from ..imagecore import RasterImage, save_png
from .manifest import ManifestRow, save_manifest

BAYER_PATTERNS = ("RGGB", "GRBG", "GBRG", "BGGR")
DEMOSAIC_KINDS = ("bilinear", "smooth_hue", "nearest")

# 3x3 interpolation kernels for mask-normalized demosaicing
_KERNEL_G = np.array([[0.0, 1.0, 0.0], [1.0, 4.0, 1.0], [0.0, 1.0, 0.0]]) / 4.0
_KERNEL_RB = np.array([[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]]) / 4.0


@dataclass(frozen=True)
class SyntheticCameraSpec:
    model_id: str
    cfa_pattern: str
    demosaic_kind: str
    noise_sigma: float  # gaussian sensor noise on the 0..255 scale
    jpeg_q_native: int
    seed: int = 0

    def __post_init__(self) -> None:
        if self.cfa_pattern not in BAYER_PATTERNS:
            raise InvalidSpec(f"cfa_pattern must be one of {BAYER_PATTERNS}")
        if self.demosaic_kind not in DEMOSAIC_KINDS:
            raise InvalidSpec(f"demosaic_kind must be one of {DEMOSAIC_KINDS}")
        if self.noise_sigma < 0:
            raise InvalidSpec("noise_sigma must be non-negative")
        if not 1 <= self.jpeg_q_native <= 100:
            raise InvalidSpec("jpeg_q_native must be in 1..100")

    def trace_fields(self) -> tuple:
        return (self.cfa_pattern, self.demosaic_kind, self.noise_sigma, self.jpeg_q_native)


def default_camera_specs(n: int = 4) -> list[SyntheticCameraSpec]:
    """A roster of clearly distinct models (every trace field differs)."""
    roster = [
        SyntheticCameraSpec("cam_a", "RGGB", "bilinear", 2.0, 95),
        SyntheticCameraSpec("cam_b", "GRBG", "nearest", 5.0, 90),
        SyntheticCameraSpec("cam_c", "GBRG", "smooth_hue", 9.0, 85),
        SyntheticCameraSpec("cam_d", "BGGR", "bilinear", 14.0, 78),
        SyntheticCameraSpec("cam_e", "RGGB", "smooth_hue", 6.0, 75),
        SyntheticCameraSpec("cam_f", "GRBG", "nearest", 2.5, 92),
    ]
    if not 2 <= n <= len(roster):
        raise InvalidSpec(f"default roster supports 2..{len(roster)} models")
    return roster[:n]


def render_scene(rng: np.random.Generator, size: int) -> np.ndarray:
    """Shared-luminance scene in [0, 1]: mixed gradients plus filtered noise."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    luma = np.full((size, size), 0.5)
    for _ in range(3):
        fx, fy = rng.uniform(0.3, 3.0, 2)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.05, 0.15)
        luma += amp * np.sin(2 * np.pi * (fx * xs / size + fy * ys / size) + phase)
    noise = rng.normal(0.0, 1.0, (size, size))
    k = np.hanning(int(rng.integers(5, 11)))[1:-1]
    k /= k.sum()
    noise = np.apply_along_axis(lambda r: np.convolve(r, k, "same"), 1, noise)
    noise = np.apply_along_axis(lambda r: np.convolve(r, k, "same"), 0, noise)
    luma += rng.uniform(0.1, 0.2) * noise
    img = np.zeros((size, size, 3))
    for c in range(3):
        gain = rng.uniform(0.85, 1.15)
        cast = 0.04 * np.sin(2 * np.pi * xs * rng.uniform(0.2, 1.0) / size + rng.uniform(0, 6))
        img[:, :, c] = luma * gain + cast
    return np.clip(img, 0.0, 1.0)


def _channel_masks(pattern: str, h: int, w: int) -> np.ndarray:
    """(3, H, W) boolean masks; pattern letters fill the 2x2 cell row-major."""
    masks = np.zeros((3, h, w), dtype=bool)
    channel_of = {"R": 0, "G": 1, "B": 2}
    for idx, letter in enumerate(pattern):
        dy, dx = divmod(idx, 2)
        masks[channel_of[letter], dy::2, dx::2] = True
    return masks


def mosaic(scene: np.ndarray, pattern: str) -> np.ndarray:
    """Sample one channel per pixel: the raw sensor plane."""
    h, w, _ = scene.shape
    masks = _channel_masks(pattern, h, w)
    raw = np.zeros((h, w))
    for c in range(3):
        raw[masks[c]] = scene[:, :, c][masks[c]]
    return raw


def _conv3(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """3x3 same-size convolution with zero padding (shift-and-add)."""
    out = np.zeros_like(img)
    padded = np.pad(img, 1)
    for dy in range(3):
        for dx in range(3):
            k = kernel[dy, dx]
            if k != 0.0:
                out += k * padded[dy : dy + img.shape[0], dx : dx + img.shape[1]]
    return out


def _interpolate_masked(raw: np.ndarray, mask: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Mask-normalized interpolation: conv(raw*mask, K) / conv(mask, K)."""
    num = _conv3(raw * mask, kernel)
    den = _conv3(mask.astype(np.float64), kernel)
    return num / np.maximum(den, 1e-12)


def demosaic(raw: np.ndarray, pattern: str, kind: str) -> np.ndarray:
    """Reconstruct RGB from the raw plane by the model's interpolation kernel."""
    h, w = raw.shape
    masks = _channel_masks(pattern, h, w)
    out = np.zeros((h, w, 3))
    if kind == "bilinear":
        for c, kernel in ((0, _KERNEL_RB), (1, _KERNEL_G), (2, _KERNEL_RB)):
            out[:, :, c] = _interpolate_masked(raw, masks[c], kernel)
    elif kind == "nearest":
        # replicate each 2x2 cell's sample across the cell
        for c in range(3):
            sub_mask = masks[c]
            ys, xs = np.nonzero(sub_mask[:2, :2])
            # gather the channel's sample grid and repeat it over the cell
            plane = np.zeros((h, w))
            taken = raw[ys[0] :: 2, xs[0] :: 2] if len(ys) == 1 else None
            if taken is not None:
                plane = np.repeat(np.repeat(taken, 2, axis=0), 2, axis=1)[:h, :w]
            else:  # green has two sample sites; average their replications
                a = np.repeat(np.repeat(raw[ys[0] :: 2, xs[0] :: 2], 2, axis=0), 2, axis=1)[:h, :w]
                b = np.repeat(np.repeat(raw[ys[1] :: 2, xs[1] :: 2], 2, axis=0), 2, axis=1)[:h, :w]
                plane = 0.5 * (a + b)
            out[:, :, c] = plane
    elif kind == "smooth_hue":
        eps = 1e-4
        green = _interpolate_masked(raw, masks[1], _KERNEL_G)
        out[:, :, 1] = green
        for c in (0, 2):
            ratio_samples = np.zeros((h, w))
            m = masks[c]
            ratio_samples[m] = raw[m] / np.maximum(green[m], eps)
            ratio = _interpolate_masked(ratio_samples, m, _KERNEL_RB)
            out[:, :, c] = green * ratio
    else:
        raise InvalidSpec(f"unknown demosaic kind {kind!r}")
    return np.clip(out, 0.0, 1.0)


def simulate_camera(scene: np.ndarray, spec: SyntheticCameraSpec,
                    rng: np.random.Generator) -> RasterImage:
    """Run one scene through the model's acquisition pipeline."""
    raw = mosaic(scene, spec.cfa_pattern)
    rgb = demosaic(raw, spec.cfa_pattern, spec.demosaic_kind)
    samples = rgb * 255.0
    if spec.noise_sigma > 0:
        samples = samples + rng.normal(0.0, spec.noise_sigma, samples.shape)
    img = RasterImage(np.clip(np.rint(samples), 0, 255).astype(np.uint8))
    return jpeg_compress(img, spec.jpeg_q_native)


def generate_synthetic_dataset(
    specs: list[SyntheticCameraSpec],
    n_images: int,
    size: int,
    out_dir,
    seed: int = 0,
) -> list[ManifestRow]:
    """Render, capture, and write the dataset plus its manifest."""
    if len(specs) < 2:
        raise InvalidSpec("need at least 2 camera models")
    if len({s.model_id for s in specs}) != len(specs):
        raise InvalidSpec("duplicate model_id")
    if len({s.trace_fields() for s in specs}) != len(specs):
        raise InvalidSpec("models must differ in at least one field other than seed")
    if size % 2 != 0 or size < 8:
        raise InvalidSpec("size must be even and >= 8")
    out_dir = Path(out_dir)
    rows: list[ManifestRow] = []
    for label, spec in enumerate(specs):
        for i in range(n_images):
            rng = np.random.default_rng([seed, spec.seed, label, i])
            scene = render_scene(rng, size)
            img = simulate_camera(scene, spec, rng)
            rel = f"{spec.model_id}/img{i:05d}.png"
            save_png(img, out_dir / rel)
            rows.append(
                ManifestRow(
                    path=str(out_dir / rel),
                    source_id=f"{spec.model_id}_img{i:05d}",
                    label=label,
                    device_id=spec.model_id,
                    manipulation="unaltered",
                )
            )
    save_manifest(rows, out_dir / "manifest.jsonl")
    return rows
