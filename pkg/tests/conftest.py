"""Shared fixtures and small builders for the test suite."""

import numpy as np
import pytest

from camtrace.imagecore import RasterImage


def make_image(pixels) -> RasterImage:
    return RasterImage(np.asarray(pixels, dtype=np.uint8))


def uniform_image(h, w, value) -> RasterImage:
    return make_image(np.full((h, w, 3), value, dtype=np.uint8))


def random_image(h, w, seed=0) -> RasterImage:
    rng = np.random.default_rng(seed)
    return make_image(rng.integers(0, 256, (h, w, 3), dtype=np.uint8))


def smooth_image(h, w, seed=0, detail=6.0) -> RasterImage:
    """Natural-statistics stand-in: smooth gradients plus blurred noise."""
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.zeros((h, w, 3))
    for c in range(3):
        gx, gy, ph = rng.uniform(-1, 1, 3)
        img[:, :, c] = 0.5 + 0.25 * np.sin(
            2 * np.pi * (gx * xs / w + gy * ys / h) + ph * np.pi
        )
    noise = rng.normal(0.0, 1.0, (h, w, 3))
    k = int(detail) | 1
    kernel = np.hanning(k + 2)[1:-1]
    kernel /= kernel.sum()
    for c in range(3):
        noise[:, :, c] = np.apply_along_axis(
            lambda r: np.convolve(r, kernel, mode="same"), 1, noise[:, :, c]
        )
        noise[:, :, c] = np.apply_along_axis(
            lambda r: np.convolve(r, kernel, mode="same"), 0, noise[:, :, c]
        )
    img = img + 0.3 * noise
    return make_image(np.clip(np.rint(img * 255.0), 0, 255))


def natural_image(h, w, seed=0) -> RasterImage:
    """Photo-like scene: one shared luminance pattern, smooth chroma."""
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    luma = 0.5 + 0.2 * np.sin(
        2 * np.pi * (xs * rng.uniform(0.5, 2) / w + ys * rng.uniform(0.5, 2) / h)
    )
    noise = rng.normal(0, 1, (h, w))
    k = np.hanning(7)[1:-1]
    k /= k.sum()
    noise = np.apply_along_axis(lambda r: np.convolve(r, k, "same"), 1, noise)
    noise = np.apply_along_axis(lambda r: np.convolve(r, k, "same"), 0, noise)
    luma = luma + 0.15 * noise
    img = np.zeros((h, w, 3))
    for c, gain in enumerate(rng.uniform(0.85, 1.15, 3)):
        cast = 0.05 * np.sin(2 * np.pi * (xs * rng.uniform(0.2, 0.8) / w) + rng.uniform(0, 6))
        img[:, :, c] = luma * gain + cast
    return make_image(np.clip(np.rint(img * 255), 0, 255))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
