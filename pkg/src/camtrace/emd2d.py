"""Bidimensional empirical mode decomposition via thin-plate-spline envelopes.

One sifting pass per channel: scattered strict local maxima and minima are
interpolated into upper and lower envelope surfaces with a thin-plate-spline
radial basis interpolant (kernel r^2 ln r plus a degree-1 polynomial), the
envelope mean becomes the residue and the input minus the residue is the
first intrinsic mode function. The pipeline consumes only the residue, which
acts as a denoised version of the image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometry, PlaneTooSmall, SingularSystem
from .imagecore import RasterImage

# |s(x_i) - v_i| <= INTERP_RTOL * (1 + |v_i|) is enforced after every solve
INTERP_RTOL = 1e-8


@dataclass(frozen=True)
class SolverLimits:
    """Caps on the dense envelope solve.

    n_max bounds the number of RBF centers per envelope; larger extrema sets
    are thinned by farthest-point selection before fitting (the dense solve
    is O(N^3)).
    """

    n_max: int = 2000

    def __post_init__(self) -> None:
        if self.n_max < 8:
            raise ValueError(f"n_max must be >= 8, got {self.n_max}")


DEFAULT_LIMITS = SolverLimits()


@dataclass(frozen=True)
class ExtremaSet:
    """Strict 8-neighborhood extrema plus the four corner anchors.

    Rows are (x, y, value); interior extrema come first in raster order, the
    corner anchors are the last four rows of each array.
    """

    maxima: np.ndarray
    minima: np.ndarray


@dataclass
class EmdResult:
    """First IMF and residue of a single plane; imf1 + residue == input."""

    imf1: np.ndarray
    residue: np.ndarray
    level: int = 1


class RbfModel:
    """Thin-plate-spline interpolant s(x) = a0 + a1*x + a2*y + sum_i lam_i phi(r_i).

    Satisfies the orthogonality side conditions sum(lam) = 0,
    sum(lam*x) = 0, sum(lam*y) = 0 and reproduces the fitted values at all
    centers to INTERP_RTOL.
    """

    def __init__(self, centers: np.ndarray, coefficients: np.ndarray, poly: np.ndarray):
        self.centers = centers  # (N, 2) columns x, y
        self.coefficients = coefficients  # (N,)
        self.poly = poly  # (a0, a1, a2)

    def evaluate(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Evaluate at flat coordinate arrays; returns values of the same shape."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        out = self.poly[0] + self.poly[1] * x + self.poly[2] * y
        d2 = (x[..., None] - self.centers[:, 0]) ** 2 + (y[..., None] - self.centers[:, 1]) ** 2
        out = out + _phi_sq(d2) @ self.coefficients
        return out

    def evaluate_grid(self, height: int, width: int, chunk: int = 4096) -> np.ndarray:
        """Evaluate on a full pixel grid, chunked to bound memory."""
        xs = np.arange(width, dtype=np.float64)
        ys = np.arange(height, dtype=np.float64)
        gx, gy = np.meshgrid(xs, ys)
        flat_x = gx.ravel()
        flat_y = gy.ravel()
        vals = np.empty(flat_x.size, dtype=np.float64)
        for start in range(0, flat_x.size, chunk):
            stop = min(start + chunk, flat_x.size)
            vals[start:stop] = self.evaluate(flat_x[start:stop], flat_y[start:stop])
        return vals.reshape(height, width)


def _phi_sq(d2: np.ndarray) -> np.ndarray:
    """TPS kernel from squared distances: r^2 ln r = 0.5 * d2 * ln(d2), phi(0) = 0."""
    out = np.zeros_like(d2)
    mask = d2 > 0.0
    out[mask] = 0.5 * d2[mask] * np.log(d2[mask])
    return out


def find_extrema(plane: np.ndarray) -> ExtremaSet:
    """Strict 8-neighborhood extrema over the interior plus corner anchors.

    Plateaus produce no interior extrema. The four corners are appended to
    both candidate sets with their own pixel values so the envelopes stay
    anchored at the image border.
    """
    plane = np.asarray(plane, dtype=np.float64)
    if plane.ndim != 2 or plane.shape[0] < 3 or plane.shape[1] < 3:
        raise PlaneTooSmall(f"plane must be at least 3x3, got shape {plane.shape}")
    h, w = plane.shape
    center = plane[1:-1, 1:-1]
    shifts = [
        plane[:-2, :-2], plane[:-2, 1:-1], plane[:-2, 2:],
        plane[1:-1, :-2], plane[1:-1, 2:],
        plane[2:, :-2], plane[2:, 1:-1], plane[2:, 2:],
    ]
    is_max = np.ones(center.shape, dtype=bool)
    is_min = np.ones(center.shape, dtype=bool)
    for nb in shifts:
        is_max &= center > nb
        is_min &= center < nb

    def collect(mask: np.ndarray) -> np.ndarray:
        ry, rx = np.nonzero(mask)
        xs = (rx + 1).astype(np.float64)
        ys = (ry + 1).astype(np.float64)
        return np.column_stack([xs, ys, plane[ry + 1, rx + 1]])

    corners = np.array(
        [
            [0.0, 0.0, plane[0, 0]],
            [w - 1.0, 0.0, plane[0, w - 1]],
            [0.0, h - 1.0, plane[h - 1, 0]],
            [w - 1.0, h - 1.0, plane[h - 1, w - 1]],
        ]
    )
    maxima = np.vstack([collect(is_max), corners])
    minima = np.vstack([collect(is_min), corners])
    return ExtremaSet(maxima=maxima, minima=minima)


def fit_rbf(points) -> RbfModel:
    """Fit the TPS interpolant through (x, y, value) points.

    Solves the symmetric (N+3)x(N+3) system [Phi P; P^T 0][lam; a] = [v; 0]
    with one step of iterative refinement, then verifies the interpolation
    and side-condition residuals.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"points must be (N, 3) of (x, y, value), got {pts.shape}")
    n = pts.shape[0]
    if n < 3:
        raise DegenerateGeometry(f"need at least 3 points, got {n}")
    xy = pts[:, :2]
    values = pts[:, 2]
    uniq = np.unique(xy, axis=0)
    if uniq.shape[0] != n:
        raise DegenerateGeometry("duplicate centers")

    p_mat = np.column_stack([np.ones(n), xy[:, 0], xy[:, 1]])
    svals = np.linalg.svd(p_mat, compute_uv=False)
    if svals[-1] <= 1e-10 * svals[0]:
        raise DegenerateGeometry("collinear centers")

    d2 = (
        (xy[:, 0, None] - xy[None, :, 0]) ** 2
        + (xy[:, 1, None] - xy[None, :, 1]) ** 2
    )
    phi = _phi_sq(d2)
    a_mat = np.zeros((n + 3, n + 3))
    a_mat[:n, :n] = phi
    a_mat[:n, n:] = p_mat
    a_mat[n:, :n] = p_mat.T
    rhs = np.concatenate([values, np.zeros(3)])

    try:
        sol = np.linalg.solve(a_mat, rhs)
        # one refinement step cleans up conditioning-induced residual
        resid = rhs - a_mat @ sol
        sol = sol + np.linalg.solve(a_mat, resid)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(str(exc)) from exc

    lam = sol[:n]
    poly = sol[n:]
    fit_err = np.abs(phi @ lam + p_mat @ poly - values)
    tol = INTERP_RTOL * (1.0 + np.abs(values))
    if np.any(fit_err > tol):
        raise SingularSystem(
            f"interpolation residual {fit_err.max():.3e} exceeds tolerance"
        )
    side = np.abs(p_mat.T @ lam)
    side_scale = max(float(np.abs(values).max()), 1.0) * max(
        float(np.abs(p_mat).max()), 1.0
    )
    if np.any(side > 1e-8 * side_scale):
        raise SingularSystem(f"side conditions violated by {side.max():.3e}")
    return RbfModel(centers=xy.copy(), coefficients=lam, poly=poly)


def _farthest_point_subset(points: np.ndarray, n_keep: int, seed_idx: int) -> np.ndarray:
    """Greedy farthest-point selection in the (x, y) plane."""
    n = points.shape[0]
    if n_keep >= n:
        return points
    xy = points[:, :2]
    chosen = np.empty(n_keep, dtype=np.intp)
    chosen[0] = seed_idx
    min_d2 = np.sum((xy - xy[seed_idx]) ** 2, axis=1)
    for i in range(1, n_keep):
        nxt = int(np.argmax(min_d2))
        chosen[i] = nxt
        d2 = np.sum((xy - xy[nxt]) ** 2, axis=1)
        np.minimum(min_d2, d2, out=min_d2)
    return points[np.sort(chosen)]


def _cap_extrema(points: np.ndarray, n_max: int, kind: str) -> np.ndarray:
    """Thin an extrema set to n_max rows, always retaining the corner anchors.

    The last four rows are the corners; the interior part is thinned by
    farthest-point selection seeded at the global extremum of the set.
    """
    if points.shape[0] <= n_max:
        return points
    interior = points[:-4]
    corners = points[-4:]
    seed = int(np.argmax(interior[:, 2]) if kind == "max" else np.argmin(interior[:, 2]))
    kept = _farthest_point_subset(interior, n_max - 4, seed)
    return np.vstack([kept, corners])


def decompose_first(plane: np.ndarray, limits: SolverLimits = DEFAULT_LIMITS) -> EmdResult:
    """One sifting pass: envelope mean as residue, remainder as the first IMF.

    Falls back to residue = plane, imf1 = 0 when either extrema set is too
    small or geometrically degenerate to fit an envelope.
    """
    plane = np.asarray(plane, dtype=np.float64)
    extrema = find_extrema(plane)
    maxima = _cap_extrema(extrema.maxima, limits.n_max, "max")
    minima = _cap_extrema(extrema.minima, limits.n_max, "min")
    h, w = plane.shape
    if maxima.shape[0] < 3 or minima.shape[0] < 3:
        return EmdResult(imf1=np.zeros_like(plane), residue=plane.copy())
    try:
        upper = fit_rbf(maxima).evaluate_grid(h, w)
        lower = fit_rbf(minima).evaluate_grid(h, w)
    except DegenerateGeometry:
        return EmdResult(imf1=np.zeros_like(plane), residue=plane.copy())
    residue = 0.5 * (upper + lower)
    imf1 = plane - residue
    return EmdResult(imf1=imf1, residue=residue)


def emd_residue_image(image: RasterImage, limits: SolverLimits = DEFAULT_LIMITS) -> RasterImage:
    """Per-channel first-stage residue, quantized back to 8 bits.

    All envelope math runs in 64-bit floats on channels normalized to [0, 1];
    quantization happens only at output.
    """
    pixels = image.pixels
    out = np.empty_like(pixels)
    for c in range(3):
        plane = pixels[:, :, c].astype(np.float64) / 255.0
        residue = decompose_first(plane, limits).residue
        out[:, :, c] = np.clip(np.rint(residue * 255.0), 0, 255).astype(np.uint8)
    return RasterImage(out)
