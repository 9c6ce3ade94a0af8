"""Canonical image container, counter-based RNG, test phantoms and 16-bit PGM I/O."""

from __future__ import annotations

import math
import re
from pathlib import Path

import numpy as np

PGM_MAXVAL = 65535

# splitmix64 constants, used to derive independent Philox streams.
_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


class PgmFormatError(ValueError):
    """Raised when a PGM file does not match the expected P5/16-bit layout."""


class Image:
    """A grayscale image stored as a row-major float64 array of shape (height, width).

    Values are canonically in [0, 1]; that range is enforced at I/O boundaries
    (PGM export) rather than on intermediates, which may hold residuals,
    variances or other derived fields.
    """

    __slots__ = ("pixels",)

    def __init__(self, pixels: np.ndarray):
        arr = np.asarray(pixels, dtype=np.float64)
        if arr.ndim != 2 or arr.size == 0:
            raise ValueError(f"image must be a non-empty 2-d array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image contains non-finite values")
        self.pixels = np.ascontiguousarray(arr)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def __eq__(self, other) -> bool:
        return isinstance(other, Image) and np.array_equal(self.pixels, other.pixels)

    def __repr__(self) -> str:
        return f"Image({self.width}x{self.height})"


def _splitmix64(z: int) -> int:
    z = (z + _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


class Rng:
    """Deterministic counter-based random source (Philox) with cheap splitting.

    A generator is identified by (seed, stream).  ``split(index)`` derives a new
    independent stream from the current one without advancing it, so concurrent
    consumers (parallel candidate evaluations, per-step noise draws) can be
    given reproducible substreams regardless of scheduling order.  Stream ids
    are mixed through splitmix64; collisions between distinct split paths are
    astronomically unlikely.
    """

    def __init__(self, seed: int, stream: int = 0):
        if not 0 <= int(seed) < (1 << 64):
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.stream = int(stream) & _MASK64
        self._gen = np.random.Generator(np.random.Philox(key=[self.seed, self.stream]))

    def split(self, index: int) -> "Rng":
        """Return an independent substream; the parent's state is untouched."""
        child = _splitmix64((self.stream * _GOLDEN + int(index) + 1) & _MASK64)
        return Rng(self.seed, child)

    def normal(self, shape=None) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, low: float = 0.0, high: float = 1.0, shape=None) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def integers(self, low: int, high: int, shape=None):
        return self._gen.integers(low, high, size=shape)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream})"


# Head phantom ellipses: (value, a, b, x0, y0, cos_theta, sin_theta) in the
# [-1, 1]^2 frame.  Intensities follow the rescaled convention whose interior
# contrasts survive a [0, 1] clamp.  The geometry is left-right symmetric:
# the two tilted cavities mirror each other exactly and the three small
# bottom features sit at x in {-0.08, 0, +0.08}.  Trig factors for the
# tilted pair share one set of constants so mirror symmetry is exact in
# floating point.
_C18 = math.cos(math.radians(18.0))
_S18 = math.sin(math.radians(18.0))

_ELLIPSES = (
    (1.0, 0.69, 0.92, 0.0, 0.0, 1.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 1.0, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, _C18, -_S18),
    (-0.2, 0.11, 0.31, -0.22, 0.0, _C18, _S18),
    (0.1, 0.21, 0.25, 0.0, 0.35, 1.0, 0.0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 1.0, 0.0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 1.0, 0.0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 1.0, 0.0),
    (0.1, 0.023, 0.023, 0.0, -0.605, 1.0, 0.0),
    (0.1, 0.046, 0.023, 0.08, -0.605, 1.0, 0.0),
)

_SUPERSAMPLE = 4


def _symmetric_centers(n: int) -> np.ndarray:
    """Pixel-center coordinates of an n-cell grid over [-1, 1], exactly mirror-symmetric."""
    half = (np.arange(n // 2) + 0.5) * (2.0 / n)
    out = np.empty(n)
    out[n // 2 :] = half
    out[: n // 2] = -half[::-1]
    return out


def shepp_logan(size: int) -> Image:
    """Rasterize the standard head phantom at ``size`` x ``size``.

    Each pixel is the 4x4-supersampled coverage average of the analytic
    ellipse sum, evaluated on pixel centers of the [-1, 1]^2 frame with
    row 0 at the top (y decreasing with row index).  Output is clamped
    to [0, 1].
    """
    if size < 16:
        raise ValueError(f"phantom size must be >= 16, got {size}")
    m = size * _SUPERSAMPLE
    xs = _symmetric_centers(m)
    ys = -_symmetric_centers(m)  # row 0 on top
    gx = xs[None, :]
    gy = ys[:, None]
    out = np.zeros((size, size))
    for value, a, b, x0, y0, ct, st in _ELLIPSES:
        dx = gx - x0
        dy = gy - y0
        u = dx * ct + dy * st
        v = -dx * st + dy * ct
        inside = (u / a) ** 2 + (v / b) ** 2 <= 1.0
        # Per-pixel coverage counts are small integers, so the accumulation
        # below is exact and mirror symmetry of the table is preserved bit
        # for bit.
        counts = inside.reshape(size, _SUPERSAMPLE, size, _SUPERSAMPLE).sum(axis=(1, 3))
        out += value * (counts / (_SUPERSAMPLE * _SUPERSAMPLE))
    return Image(np.clip(out, 0.0, 1.0))


def uniform_noise_image(rng: Rng, channels: int, size: int) -> np.ndarray:
    """I.i.d. uniform [0, 0.1) noise of shape (channels, size, size)."""
    if channels < 1 or size < 1:
        raise ValueError("channels and size must be positive")
    return rng.uniform(0.0, 0.1, (channels, size, size))


def write_pgm(image: Image, path) -> None:
    """Write a 16-bit binary PGM (P5, maxval 65535, big-endian samples).

    Pixels must lie in [0, 1]; they are quantized with round-half-even.
    """
    arr = image.pixels
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(
            f"pixels must lie in [0, 1] for PGM export, got range "
            f"[{arr.min():.6g}, {arr.max():.6g}]"
        )
    quantized = np.rint(arr * PGM_MAXVAL).astype(np.uint16)
    header = f"P5 {image.width} {image.height} {PGM_MAXVAL}\n".encode("ascii")
    Path(path).write_bytes(header + quantized.astype(">u2").tobytes())


def read_pgm(path) -> Image:
    """Read a 16-bit binary PGM written by :func:`write_pgm`.

    Malformed input raises :class:`PgmFormatError` naming the byte offset of
    the first problem.
    """
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        raise PgmFormatError("byte 0: expected magic 'P5'")
    # Header: magic + three ASCII integers separated by whitespace, then a
    # single whitespace byte before the payload.  Comments are not produced
    # by this package and are rejected.
    pos = 2
    fields = []
    for _ in range(3):
        match = re.compile(rb"[ \t\r\n]+(\d+)").match(raw, pos)
        if match is None:
            raise PgmFormatError(f"byte {pos}: expected whitespace-separated integer")
        fields.append(int(match.group(1)))
        pos = match.end()
    if pos >= len(raw) or raw[pos : pos + 1] not in (b" ", b"\t", b"\r", b"\n"):
        raise PgmFormatError(f"byte {pos}: expected single whitespace before payload")
    pos += 1
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise PgmFormatError(f"byte 2: bad dimensions {width}x{height}")
    if maxval != PGM_MAXVAL:
        raise PgmFormatError(f"byte 2: unsupported maxval {maxval}, expected {PGM_MAXVAL}")
    expected = 2 * width * height
    payload = raw[pos:]
    if len(payload) != expected:
        raise PgmFormatError(
            f"byte {pos}: payload has {len(payload)} bytes, expected {expected}"
        )
    values = np.frombuffer(payload, dtype=">u2").astype(np.float64).reshape(height, width)
    return Image(values / PGM_MAXVAL)
