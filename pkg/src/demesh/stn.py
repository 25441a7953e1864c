"""Landmark-driven spatial transformer for face alignment.

Alignment is a similarity transform fixed analytically by the two eye
centers, so there is no learned localization: we solve the four transform
parameters from the eye correspondences, generate a sampling grid over the
target crop, and bilinearly sample the source image. The sampler is
differentiable with respect to the image (not the grid; the transform is
never learned), and out-of-range samples read as zero.

Coordinates are normalized per axis so pixel 0 maps to -1 and pixel
(extent - 1) maps to +1. In the aligned crop the eye centers always sit at
normalized (-0.5, -0.5) and (+0.5, -0.5); with the default 32x32 crop that
places them at the usual quarter-width / quarter-height positions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import ShapeError

Array = np.ndarray

# normalized eye-center positions in the aligned crop: (x, y), left then right
TARGET_EYES = ((-0.5, -0.5), (0.5, -0.5))


class DegenerateLandmarksError(ValueError):
    """Eye centers coincide; the alignment transform is not determined."""


@dataclass(frozen=True)
class Landmarks:
    """Eye centers in pixel coordinates (x = column, y = row)."""

    left: tuple[float, float]
    right: tuple[float, float]

    def as_array(self) -> Array:
        return np.array([self.left, self.right], dtype=np.float64)

    def shifted(self, dx: float, dy: float) -> "Landmarks":
        return Landmarks((self.left[0] + dx, self.left[1] + dy),
                         (self.right[0] + dx, self.right[1] + dy))


@dataclass(frozen=True)
class SimilarityParams:
    """Scalars (a, b, tx, ty) of the transform [[a, b, tx], [-b, a, ty]]."""

    a: float
    b: float
    tx: float
    ty: float

    def apply(self, x: Array, y: Array) -> tuple[Array, Array]:
        """Map target-space coords to source-space coords, pointwise."""
        return (self.a * x + self.b * y + self.tx,
                -self.b * x + self.a * y + self.ty)


@dataclass(frozen=True)
class SampleGrid:
    """Continuous normalized source coordinates, one pair per output pixel."""

    xs: Array  # (out_h, out_w)
    ys: Array

    @property
    def shape(self) -> tuple[int, int]:
        return self.xs.shape


def normalize_coords(x, y, height: int, width: int):
    """Map pixel coords to [-1, 1] per axis (0 -> -1, extent-1 -> +1)."""
    if height < 2 or width < 2:
        raise ValueError("normalization needs extents >= 2")
    return 2.0 * np.asarray(x) / (width - 1) - 1.0, \
        2.0 * np.asarray(y) / (height - 1) - 1.0


def denormalize_coords(xn, yn, height: int, width: int):
    """Inverse of normalize_coords."""
    return (np.asarray(xn) + 1.0) * (width - 1) / 2.0, \
        (np.asarray(yn) + 1.0) * (height - 1) / 2.0


def solve_similarity(left: tuple[float, float],
                     right: tuple[float, float]) -> SimilarityParams:
    """Solve (a, b, tx, ty) so the canonical target eyes map onto the
    given source eyes (both in normalized coordinates).

    Each correspondence contributes two linear equations
    (x_s = a*x_t + b*y_t + tx and y_s = -b*x_t + a*y_t + ty), giving an
    exactly determined 4x4 system.
    """
    if np.hypot(right[0] - left[0], right[1] - left[1]) < 1e-12:
        raise DegenerateLandmarksError(
            f"eye centers coincide at {tuple(left)}")
    rows = []
    rhs = []
    for (xt, yt), (xs, ys) in zip(TARGET_EYES, (left, right)):
        rows.append([xt, yt, 1.0, 0.0])
        rows.append([yt, -xt, 0.0, 1.0])
        rhs.extend([xs, ys])
    a, b, tx, ty = np.linalg.solve(np.array(rows), np.array(rhs))
    if a * a + b * b <= 0.0:
        raise DegenerateLandmarksError("solved transform has zero scale")
    return SimilarityParams(float(a), float(b), float(tx), float(ty))


def generate_grid(params: SimilarityParams, out_h: int, out_w: int) -> SampleGrid:
    """Source coordinates for every pixel of a regular out_h x out_w grid."""
    if out_h < 2 or out_w < 2:
        raise ValueError("grid extents must be >= 2")
    xt = np.linspace(-1.0, 1.0, out_w)
    yt = np.linspace(-1.0, 1.0, out_h)
    xg, yg = np.meshgrid(xt, yt)
    xs, ys = params.apply(xg, yg)
    return SampleGrid(xs, ys)


IDENTITY_PARAMS = SimilarityParams(1.0, 0.0, 0.0, 0.0)


def resize_grid(out_h: int, out_w: int) -> SampleGrid:
    """Identity-orientation grid: a plain bilinear resize of the full image."""
    return generate_grid(IDENTITY_PARAMS, out_h, out_w)


def _corner_weights(grid: SampleGrid, height: int, width: int):
    """Shared corner/weight computation for the sampler and its adjoint.

    Returns four (rows, cols, weight, valid) tuples, flattened over the grid.
    Coordinates within 1e-9 of an integer pixel are snapped so identity grids
    sample pixel-exactly despite normalization round-trip rounding.
    """
    px, py = denormalize_coords(grid.xs.ravel(), grid.ys.ravel(), height, width)
    px = np.where(np.abs(px - np.round(px)) < 1e-9, np.round(px), px)
    py = np.where(np.abs(py - np.round(py)) < 1e-9, np.round(py), py)
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    wx1 = px - x0
    wy1 = py - y0
    corners = []
    for yi, wy in ((y0, 1.0 - wy1), (y0 + 1, wy1)):
        for xi, wx in ((x0, 1.0 - wx1), (x0 + 1, wx1)):
            valid = (xi >= 0) & (xi < width) & (yi >= 0) & (yi < height)
            corners.append((yi, xi, wx * wy, valid))
    return corners


def bilinear_sample(image: Array, grid: SampleGrid) -> Array:
    """Sample an image at the grid's source positions with a bilinear kernel.

    ``image`` is (channels, H, W). Positions outside the image contribute
    zero (zero-padding semantics), so the kernel is a partition of unity only
    strictly inside the border.
    """
    if image.ndim != 3:
        raise ShapeError(f"expected a (channels, H, W) image, got {image.shape}")
    c, h, w = image.shape
    flat = image.reshape(c, h * w)
    out = np.zeros((c, grid.xs.size))
    for yi, xi, wgt, valid in _corner_weights(grid, h, w):
        idx = np.where(valid, yi * w + xi, 0)
        out += flat[:, idx] * (wgt * valid)
    return out.reshape(c, *grid.shape)


def bilinear_backward(grad_out: Array, grid: SampleGrid,
                      input_hw: tuple[int, int]) -> Array:
    """Adjoint of bilinear_sample: scatter output gradients to the source.

    No gradient with respect to grid coordinates is produced; the transform
    parameters are solved, not learned.
    """
    if grad_out.shape[1:] != grid.shape:
        raise ShapeError(
            f"gradient spatial shape {grad_out.shape[1:]} does not match "
            f"grid {grid.shape}")
    c = grad_out.shape[0]
    h, w = input_hw
    grad_in = np.zeros((c, h * w))
    g = grad_out.reshape(c, -1)
    rows = np.arange(c)[:, None]
    for yi, xi, wgt, valid in _corner_weights(grid, h, w):
        idx = np.where(valid, yi * w + xi, 0)
        np.add.at(grad_in, (rows, idx[None, :]), g * (wgt * valid))
    return grad_in.reshape(c, h, w)


def alignment_grid(eyes: Landmarks, src_h: int, src_w: int,
                   crop_h: int, crop_w: int) -> SampleGrid:
    """Grid that cuts an aligned crop_h x crop_w face region from the source."""
    lx, ly = normalize_coords(*eyes.left, src_h, src_w)
    rx, ry = normalize_coords(*eyes.right, src_h, src_w)
    params = solve_similarity((float(lx), float(ly)), (float(rx), float(ry)))
    return generate_grid(params, crop_h, crop_w)


def align_face(image: Array, eyes: Landmarks, crop_h: int, crop_w: int) -> Array:
    """Cut an aligned face crop: normalize -> solve -> grid -> sample."""
    _, h, w = image.shape
    return bilinear_sample(image, alignment_grid(eyes, h, w, crop_h, crop_w))
