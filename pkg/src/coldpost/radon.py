"""Discrete parallel-beam Radon transform, exact adjoint, and an FBP baseline.

The forward projector is ray-driven: each (angle, bin) ray is sampled at a
fixed step of at most half a pixel and each sample deposits bilinear
interpolation weights.  The weights are assembled once into a sparse matrix,
so the adjoint is the literal matrix transpose — exact to rounding, which is
what gradient-based training of the reconstruction needs.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .data import Image

_STEP = 0.5  # maximum ray sampling step, in pixels


@dataclass(frozen=True)
class ProjectionGeometry:
    """View angles (radians, strictly increasing in [0, pi)) and detector layout."""

    angles: tuple
    num_bins: int
    bin_spacing: float = 1.0

    def __post_init__(self):
        angles = tuple(float(a) for a in self.angles)
        object.__setattr__(self, "angles", angles)
        if len(angles) == 0:
            raise ValueError("geometry needs at least one angle")
        if any(not 0.0 <= a < math.pi for a in angles):
            raise ValueError("angles must lie in [0, pi)")
        if any(b <= a for a, b in zip(angles, angles[1:])):
            raise ValueError("angles must be strictly increasing")
        if self.num_bins < 1:
            raise ValueError(f"num_bins must be positive, got {self.num_bins}")
        if self.bin_spacing <= 0:
            raise ValueError(f"bin_spacing must be positive, got {self.bin_spacing}")

    @property
    def num_angles(self) -> int:
        return len(self.angles)

    def covers(self, image_size: int) -> bool:
        return self.num_bins * self.bin_spacing >= math.sqrt(2.0) * image_size

    @staticmethod
    def sparse_view(num_angles: int, image_size: int) -> "ProjectionGeometry":
        """Evenly spaced angles in [0, pi) with the default detector for image_size."""
        if num_angles < 1:
            raise ValueError("num_angles must be positive")
        angles = tuple(np.arange(num_angles) * (math.pi / num_angles))
        return ProjectionGeometry(angles, default_num_bins(image_size))


def default_num_bins(image_size: int) -> int:
    """Smallest even bin count covering the image diagonal at unit spacing."""
    n = math.ceil(math.sqrt(2.0) * image_size)
    return n + (n % 2)


@dataclass
class Sinogram:
    """Projection data y = F[x]: one row of line integrals per view angle."""

    geometry: ProjectionGeometry
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        expected = (self.geometry.num_angles, self.geometry.num_bins)
        if values.shape != expected:
            raise ValueError(f"sinogram shape {values.shape} does not match geometry {expected}")
        if not np.all(np.isfinite(values)):
            raise ValueError("sinogram contains non-finite values")
        self.values = values


class RadonOperator:
    """Forward projector for one (geometry, image size) pair as a sparse matrix.

    ``matrix`` has shape (num_angles * num_bins, size * size); forward is a
    mat-vec, the adjoint uses the exact transpose.
    """

    def __init__(self, geometry: ProjectionGeometry, image_size: int):
        if image_size < 1:
            raise ValueError("image_size must be positive")
        if not geometry.covers(image_size):
            raise ValueError(
                f"detector ({geometry.num_bins} bins x {geometry.bin_spacing} spacing) "
                f"does not cover the diagonal of a {image_size}px image"
            )
        self.geometry = geometry
        self.image_size = image_size
        self.matrix = self._build(geometry, image_size)
        self._transpose = None

    @property
    def sinogram_shape(self) -> tuple:
        return (self.geometry.num_angles, self.geometry.num_bins)

    def forward(self, pixels: np.ndarray) -> np.ndarray:
        return (self.matrix @ pixels.ravel()).reshape(self.sinogram_shape)

    def adjoint(self, values: np.ndarray) -> np.ndarray:
        if self._transpose is None:
            self._transpose = self.matrix.T.tocsr()
        n = self.image_size
        return (self._transpose @ values.ravel()).reshape(n, n)

    @staticmethod
    def _build(geometry: ProjectionGeometry, size: int) -> sp.csr_matrix:
        n = geometry.num_bins
        spacing = geometry.bin_spacing
        # Detector bin centers, symmetric about the rotation center.
        t = (np.arange(n) - (n - 1) / 2.0) * spacing
        half = (size - 1) / 2.0 + 1.0  # bilinear support half-extent
        blocks = []
        for theta in geometry.angles:
            ct, st = math.cos(theta), math.sin(theta)
            # Ray through bin t: p(s) = t*(ct, st) + s*(-st, ct); clip the
            # parameter range to the square |x|,|y| <= half per ray.
            s_lo = np.full(n, -half * math.sqrt(2.0))
            s_hi = np.full(n, half * math.sqrt(2.0))
            for t_axis, d_axis in ((ct, -st), (st, ct)):
                if abs(d_axis) > 1e-300:
                    a = (-half - t * t_axis) / d_axis
                    b = (half - t * t_axis) / d_axis
                    s_lo = np.maximum(s_lo, np.minimum(a, b))
                    s_hi = np.minimum(s_hi, np.maximum(a, b))
                else:
                    # Ray parallel to this axis: drop bins outside the slab.
                    outside = np.abs(t * t_axis) > half
                    s_lo = np.where(outside, 1.0, s_lo)
                    s_hi = np.where(outside, 0.0, s_hi)
            length = np.maximum(s_hi - s_lo, 0.0)
            steps = np.maximum(np.ceil(length / _STEP).astype(np.int64), 1)
            max_steps = int(steps.max())
            ds = length / steps
            # Sample midpoints; samples beyond a ray's own step count get
            # zero weight and are filtered out below.
            k = np.arange(max_steps)
            svals = s_lo[:, None] + (k[None, :] + 0.5) * ds[:, None]
            valid = k[None, :] < steps[:, None]
            w_seg = np.where(valid, ds[:, None], 0.0)
            x = t[:, None] * ct + svals * (-st)
            y = t[:, None] * st + svals * ct
            # Pixel-center frame: pixel (row, col) sits at
            # (col - (size-1)/2, (size-1)/2 - row) so row 0 is on top.
            cf = x + (size - 1) / 2.0
            rf = (size - 1) / 2.0 - y
            c0 = np.floor(cf).astype(np.int64)
            r0 = np.floor(rf).astype(np.int64)
            fc = cf - c0
            fr = rf - r0
            rows_idx = np.broadcast_to(np.arange(n)[:, None], cf.shape)
            data, rows, cols = [], [], []
            for dr, dc, w in (
                (0, 0, (1 - fr) * (1 - fc)),
                (0, 1, (1 - fr) * fc),
                (1, 0, fr * (1 - fc)),
                (1, 1, fr * fc),
            ):
                rr = r0 + dr
                cc = c0 + dc
                ok = (rr >= 0) & (rr < size) & (cc >= 0) & (cc < size)
                weight = w_seg * w
                ok &= weight != 0.0
                data.append(weight[ok])
                rows.append(rows_idx[ok])
                cols.append((rr * size + cc)[ok])
            block = sp.coo_matrix(
                (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
                shape=(n, size * size),
            )
            blocks.append(block.tocsr())
        return sp.vstack(blocks, format="csr")


@lru_cache(maxsize=4)
def _cached_operator(geometry: ProjectionGeometry, image_size: int) -> RadonOperator:
    return RadonOperator(geometry, image_size)


def get_operator(geometry: ProjectionGeometry, image_size: int) -> RadonOperator:
    """Shared, cached projector; building the matrix is the expensive part."""
    return _cached_operator(geometry, image_size)


def radon_forward(image: Image, geometry: ProjectionGeometry) -> Sinogram:
    """Line integrals of ``image`` along every (angle, bin) ray."""
    if image.width != image.height:
        raise ValueError(f"image must be square, got {image.width}x{image.height}")
    op = get_operator(geometry, image.width)
    return Sinogram(geometry, op.forward(image.pixels))


def radon_adjoint(sinogram: Sinogram, image_size: int) -> np.ndarray:
    """Exact transpose of :func:`radon_forward`; returns an image-shaped field.

    The result is a gradient-space quantity (unnormalized back-projection),
    not a canonical [0,1] image, so it is returned as a bare array.
    """
    op = get_operator(sinogram.geometry, image_size)
    return op.adjoint(sinogram.values)


def fbp(sinogram: Sinogram, image_size: int, filter: str = "ramp") -> Image:
    """Filtered back-projection baseline.

    Each projection row is ramp-filtered in the frequency domain (zero-padded
    to the next power of two >= 2*num_bins to suppress circular convolution),
    then back-projected with pi/num_angles weighting.  Output is clamped to
    [0, 1].
    """
    if filter not in ("ramp", "none"):
        raise ValueError(f"filter must be 'ramp' or 'none', got {filter!r}")
    geometry = sinogram.geometry
    if geometry.num_angles < 2:
        raise ValueError("fbp needs at least 2 angles")
    if not geometry.covers(image_size):
        raise ValueError("geometry does not cover the image diagonal")
    n = geometry.num_bins
    spacing = geometry.bin_spacing
    rows = sinogram.values
    if filter == "ramp":
        padded = 1 << max(1, (2 * n - 1).bit_length())
        freqs = np.fft.rfftfreq(padded, d=spacing)
        spectrum = np.fft.rfft(rows, n=padded, axis=1) * freqs[None, :]
        rows = np.fft.irfft(spectrum, n=padded, axis=1)[:, :n]
    t = (np.arange(n) - (n - 1) / 2.0) * spacing
    half = (image_size - 1) / 2.0
    grid = np.arange(image_size)
    x = (grid - half)[None, :]
    y = (half - grid)[:, None]
    out = np.zeros((image_size, image_size))
    for i, theta in enumerate(geometry.angles):
        proj = x * math.cos(theta) + y * math.sin(theta)
        out += np.interp(proj.ravel(), t, rows[i], left=0.0, right=0.0).reshape(out.shape)
    out *= math.pi / geometry.num_angles
    return Image(np.clip(out, 0.0, 1.0))


def write_sinogram_csv(sinogram: Sinogram, path) -> None:
    """Serialize for inspection: one row per (angle_index, bin_index)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["angle_index", "bin_index", "value"])
        for a in range(sinogram.geometry.num_angles):
            for b in range(sinogram.geometry.num_bins):
                writer.writerow([a, b, repr(float(sinogram.values[a, b]))])
