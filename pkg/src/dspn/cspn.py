"""Fixed-receptive-field spatial propagation with sparse replacement.

One step turns each pixel into a weighted combination of itself and its
k x k neighbours (center excluded from the stencil); the self-weight is
whatever is left after abs-normalising the raw stencil. After every step
the valid sparse measurements are written back over the propagated map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidAffinity, InvalidConfig, InvalidMask, ShapeMismatch
from .grid import Grid, same_shape


def neighbor_offsets(kernel_size: int) -> np.ndarray:
    """(k*k-1, 2) integer (dx, dy) offsets in raster order, center excluded."""
    if kernel_size < 3 or kernel_size % 2 == 0:
        raise InvalidConfig(f"kernel size must be odd and >= 3, got {kernel_size}")
    r = kernel_size // 2
    offs = [
        (dx, dy)
        for dy in range(-r, r + 1)
        for dx in range(-r, r + 1)
        if not (dx == 0 and dy == 0)
    ]
    return np.array(offs, dtype=np.int64)


class AffinityStencilField:
    """Per-pixel raw affinities over the k x k ring, shape (h, w, k*k-1)."""

    __slots__ = ("kernel_size", "raw")

    def __init__(self, kernel_size: int, raw):
        if kernel_size < 3 or kernel_size % 2 == 0:
            raise InvalidConfig(f"kernel size must be odd and >= 3, got {kernel_size}")
        arr = np.asarray(raw, dtype=np.float64)
        n = kernel_size * kernel_size - 1
        if arr.ndim != 3 or arr.shape[2] != n:
            raise InvalidAffinity(f"expected stencil shape (h, w, {n}), got {arr.shape}")
        if not np.isfinite(arr).all():
            raise InvalidAffinity("stencil contains NaN or Inf")
        self.kernel_size = kernel_size
        self.raw = arr

    @classmethod
    def uniform(cls, width: int, height: int, kernel_size: int = 3, value: float = 1.0) -> "AffinityStencilField":
        n = kernel_size * kernel_size - 1
        return cls(kernel_size, np.full((height, width, n), float(value)))


@dataclass
class NormalizedStencil:
    """Abs-normalised neighbour weights plus the implied self-weight.

    ``weights`` has the raw stencil's shape; ``self_weight`` drops the last
    axis. Satisfies self_weight == 1 - weights.sum(-1) exactly.
    """

    weights: np.ndarray
    self_weight: np.ndarray


def normalize_stencil(raw) -> NormalizedStencil:
    """Divide by the sum of absolute entries; self-weight takes the remainder.

    An all-zero stencil cannot be normalised and degrades to identity
    propagation (zero neighbour weights, self-weight 1).
    """
    arr = np.asarray(raw, dtype=np.float64)
    if arr.ndim == 0 or arr.shape[-1] == 0:
        raise InvalidAffinity("empty stencil")
    if not np.isfinite(arr).all():
        raise InvalidAffinity("stencil contains NaN or Inf")
    denom = np.abs(arr).sum(axis=-1, keepdims=True)
    safe = np.where(denom == 0.0, 1.0, denom)
    weights = np.where(denom == 0.0, 0.0, arr / safe)
    self_weight = 1.0 - weights.sum(axis=-1)
    return NormalizedStencil(weights=weights, self_weight=self_weight)


def _shifted_views(padded: np.ndarray, offs: np.ndarray, height: int, width: int, r: int):
    for dx, dy in offs:
        yield padded[r + dy : r + dy + height, r + dx : r + dx + width]


def cspn_step(H: Grid, stencils: AffinityStencilField) -> Grid:
    """One propagation step. Out-of-image neighbours read the clamped border.

    Computed in difference form, H + sum_j w_j * (H_j - H), which keeps the
    all-zero-stencil case bit-identical to the input and makes the maximum
    principle for nonnegative stencils robust.
    """
    if H.channels != 1:
        raise ShapeMismatch(f"propagation expects a single-channel grid, got {H.channels} channels")
    h, w = H.height, H.width
    if stencils.raw.shape[:2] != (h, w):
        raise ShapeMismatch(
            f"stencil field {stencils.raw.shape[:2]} does not match grid {(h, w)}"
        )
    norm = normalize_stencil(stencils.raw)
    arr = H.channel(0)
    r = stencils.kernel_size // 2
    padded = np.pad(arr, r, mode="edge")
    offs = neighbor_offsets(stencils.kernel_size)
    acc = np.zeros_like(arr)
    for j, nb in enumerate(_shifted_views(padded, offs, h, w, r)):
        acc += norm.weights[:, :, j] * (nb - arr)
    return Grid(arr + acc)


def _require_binary_mask(m: Grid) -> np.ndarray:
    mask = m.channel(0)
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise InvalidMask("mask must contain only 0 and 1")
    return mask


def hard_replace(H: Grid, Hs: Grid, m: Grid) -> Grid:
    """Overwrite propagated values with sparse measurements where m == 1."""
    if not (same_shape(H, Hs) and same_shape(H, m)):
        raise ShapeMismatch("hard_replace operands must share one shape")
    mask = _require_binary_mask(m)
    out = np.where(mask[:, :, np.newaxis] == 1.0, Hs.data, H.data)
    return Grid(out)


def cspn_refine(D0: Grid, Ds: Grid, m: Grid, stencils: AffinityStencilField, iters: int) -> Grid:
    """Iterate (step, replace) from D0. iters == 0 returns D0 unchanged."""
    if iters < 0:
        raise InvalidConfig(f"iteration count must be >= 0, got {iters}")
    current = D0
    for _ in range(iters):
        current = hard_replace(cspn_step(current, stencils), Ds, m)
    return current
