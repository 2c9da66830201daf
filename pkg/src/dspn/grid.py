"""Dense 2-D grid container and continuous (bilinear) sampling.

Coordinate convention, used everywhere in this package: ``x`` is the column
index, ``y`` is the row index, origin at the top-left pixel. Grid data is
stored row-major as a float64 array of shape ``(height, width, channels)``.
All arithmetic is 64-bit internally; file I/O may narrow to 32-bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import InvalidGrid, InvalidPosition


class ContinuousPos(NamedTuple):
    """Real-valued pixel position. May lie outside the grid; sampling clamps."""

    x: float
    y: float


class Grid:
    """Dense scalar/vector field over a pixel grid.

    Wraps a ``(height, width, channels)`` float64 array. A 2-D array is
    accepted and treated as single-channel. Values must be finite; a raw
    sensor grid encodes "missing" as 0, which is still finite.
    """

    __slots__ = ("data",)

    def __init__(self, data, copy: bool = False):
        arr = np.array(data, dtype=np.float64, copy=copy) if copy else np.asarray(data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, np.newaxis]
        if arr.ndim != 3 or arr.size == 0:
            raise InvalidGrid(f"expected a non-empty (height, width[, channels]) array, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise InvalidGrid("grid contains NaN or Inf")
        self.data = arr

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def channel(self, c: int = 0) -> np.ndarray:
        """2-D view of one channel."""
        if not 0 <= c < self.channels:
            raise InvalidGrid(f"channel {c} out of range for {self.channels}-channel grid")
        return self.data[:, :, c]

    def copy(self) -> "Grid":
        return Grid(self.data, copy=True)

    @classmethod
    def zeros(cls, width: int, height: int, channels: int = 1) -> "Grid":
        return cls(np.zeros((height, width, channels)))

    @classmethod
    def full(cls, width: int, height: int, value: float, channels: int = 1) -> "Grid":
        return cls(np.full((height, width, channels), float(value)))

    def __repr__(self) -> str:
        return f"Grid(width={self.width}, height={self.height}, channels={self.channels})"


def same_shape(a: Grid, b: Grid) -> bool:
    return a.data.shape == b.data.shape


@dataclass
class BilinearTaps:
    """Precomputed corner indices and fractional weights for bilinear reads.

    Corner indices are border-clamped; fractional parts come from the
    unclamped position, so positions fully outside the grid degrade to a
    constant border read with zero spatial derivative.
    """

    ix0: np.ndarray
    ix1: np.ndarray
    iy0: np.ndarray
    iy1: np.ndarray
    fx: np.ndarray
    fy: np.ndarray


def bilinear_taps(px: np.ndarray, py: np.ndarray, width: int, height: int) -> BilinearTaps:
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx = px - x0
    fy = py - y0
    # clip before the int cast so huge floats cannot overflow int64
    ix0 = np.clip(x0, 0, width - 1).astype(np.int64)
    ix1 = np.clip(x0 + 1.0, 0, width - 1).astype(np.int64)
    iy0 = np.clip(y0, 0, height - 1).astype(np.int64)
    iy1 = np.clip(y0 + 1.0, 0, height - 1).astype(np.int64)
    return BilinearTaps(ix0, ix1, iy0, iy1, fx, fy)


def sample_with_taps(values: np.ndarray, taps: BilinearTaps) -> np.ndarray:
    """Bilinear combination of a 2-D ``values`` array at precomputed taps.

    The result is clamped into the hull of the four contributing values so
    the convex-combination bound holds exactly, not just to roundoff.
    """
    v00 = values[taps.iy0, taps.ix0]
    v10 = values[taps.iy0, taps.ix1]
    v01 = values[taps.iy1, taps.ix0]
    v11 = values[taps.iy1, taps.ix1]
    fx, fy = taps.fx, taps.fy
    out = (
        (1.0 - fx) * (1.0 - fy) * v00
        + fx * (1.0 - fy) * v10
        + (1.0 - fx) * fy * v01
        + fx * fy * v11
    )
    lo = np.minimum(np.minimum(v00, v10), np.minimum(v01, v11))
    hi = np.maximum(np.maximum(v00, v10), np.maximum(v01, v11))
    return np.clip(out, lo, hi)


def sample_channels_with_taps(values: np.ndarray, taps: BilinearTaps) -> np.ndarray:
    """Like :func:`sample_with_taps` for a ``(h, w, c)`` array; returns (..., c)."""
    v00 = values[taps.iy0, taps.ix0, :]
    v10 = values[taps.iy0, taps.ix1, :]
    v01 = values[taps.iy1, taps.ix0, :]
    v11 = values[taps.iy1, taps.ix1, :]
    fx = taps.fx[..., np.newaxis]
    fy = taps.fy[..., np.newaxis]
    out = (
        (1.0 - fx) * (1.0 - fy) * v00
        + fx * (1.0 - fy) * v10
        + (1.0 - fx) * fy * v01
        + fx * fy * v11
    )
    lo = np.minimum(np.minimum(v00, v10), np.minimum(v01, v11))
    hi = np.maximum(np.maximum(v00, v10), np.maximum(v01, v11))
    return np.clip(out, lo, hi)


def position_gradient_with_taps(values: np.ndarray, taps: BilinearTaps):
    """Spatial derivative of the bilinear sample w.r.t. the position.

    Exact wherever the fractional parts are strictly inside (0, 1); at
    lattice points floor() puts the position at fx=0 of the right cell, so
    the returned value is the right-sided derivative. Fully clamped reads
    have both corners equal and the derivative correctly vanishes.

    ``values`` may be (h, w) or (h, w, c); gradients match the sample shape.
    """
    multi = values.ndim == 3
    if multi:
        v00 = values[taps.iy0, taps.ix0, :]
        v10 = values[taps.iy0, taps.ix1, :]
        v01 = values[taps.iy1, taps.ix0, :]
        v11 = values[taps.iy1, taps.ix1, :]
        fx = taps.fx[..., np.newaxis]
        fy = taps.fy[..., np.newaxis]
    else:
        v00 = values[taps.iy0, taps.ix0]
        v10 = values[taps.iy0, taps.ix1]
        v01 = values[taps.iy1, taps.ix0]
        v11 = values[taps.iy1, taps.ix1]
        fx, fy = taps.fx, taps.fy
    ddx = (1.0 - fy) * (v10 - v00) + fy * (v11 - v01)
    ddy = (1.0 - fx) * (v01 - v00) + fx * (v11 - v10)
    return ddx, ddy


def bilinear_sample(g: Grid, p, c: int = 0) -> float:
    """Sample one channel of ``g`` at a real-valued position.

    Integer source coordinates are clamped to the border, so out-of-range
    positions read the nearest edge pixel. The result always lies within
    [min, max] of the four contributing values.
    """
    px, py = float(p[0]), float(p[1])
    if not (np.isfinite(px) and np.isfinite(py)):
        raise InvalidPosition(f"non-finite position ({px}, {py})")
    values = g.channel(c)
    taps = bilinear_taps(np.float64(px), np.float64(py), g.width, g.height)
    return float(sample_with_taps(values, taps))
