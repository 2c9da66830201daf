"""Synthetic scenes, sparse sampling, and stand-ins for the prediction network.

Scenes are deterministic functions of their seed (numpy PCG64 via
``default_rng``; every operation draws full-grid arrays in a fixed order, so
a seed always yields the same fields). The coarse predictor and hand-crafted
feature maps replace the learned network: features carry the depth value,
its horizontal/vertical gradient magnitudes, the validity mask, and the
normalised pixel coordinates, which is enough for feature similarity to
tell flat regions from discontinuities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .confidence import ConfidenceConfig, heuristic_confidence
from .errors import EmptySparse, InvalidSpec
from .grid import Grid

SCENE_KINDS = ("plane", "step", "slope", "sphere-cap", "composite")


@dataclass
class SceneSpec:
    kind: str = "composite"
    width: int = 64
    height: int = 64
    depth_min: float = 1.0
    depth_max: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SCENE_KINDS:
            raise InvalidSpec(f"unknown scene kind {self.kind!r}")
        if self.width < 8 or self.height < 8:
            raise InvalidSpec(f"scene dimensions must be >= 8, got {self.width}x{self.height}")
        if not (0.0 < self.depth_min <= self.depth_max) or not np.isfinite(self.depth_max):
            raise InvalidSpec(f"bad depth range [{self.depth_min}, {self.depth_max}]")


@dataclass
class SparseSpec:
    density: float = 0.05
    noise_sigma: float = 0.02
    outlier_fraction: float = 0.10
    outlier_sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.density <= 1.0:
            raise InvalidSpec(f"density must be in (0, 1], got {self.density}")
        if self.noise_sigma < 0.0 or self.outlier_sigma < 0.0:
            raise InvalidSpec("noise sigmas must be >= 0")
        if not 0.0 <= self.outlier_fraction < 1.0:
            raise InvalidSpec(f"outlier fraction must be in [0, 1), got {self.outlier_fraction}")


def _coords(spec: SceneSpec):
    ys, xs = np.mgrid[0 : spec.height, 0 : spec.width].astype(np.float64)
    return xs, ys


def _slope(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    xs, ys = _coords(spec)
    angle = rng.uniform(0.0, 2.0 * np.pi)
    proj = xs * np.cos(angle) + ys * np.sin(angle)
    lo, hi = proj.min(), proj.max()
    t = (proj - lo) / (hi - lo) if hi > lo else np.zeros_like(proj)
    return spec.depth_min + (spec.depth_max - spec.depth_min) * t


def _step(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    # vertical boundary in the top half continuing diagonally below, so one
    # scene exercises both axis-aligned and diagonal discontinuities
    xs, ys = _coords(spec)
    x0 = rng.integers(spec.width // 3, 2 * spec.width // 3)
    boundary = np.where(ys < spec.height / 2.0, x0, x0 + (ys - spec.height / 2.0))
    return np.where(xs < boundary, spec.depth_min, spec.depth_max)


def _sphere_cap(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    xs, ys = _coords(spec)
    radius = rng.uniform(0.2, 0.4) * min(spec.width, spec.height)
    cx = rng.uniform(0.3, 0.7) * spec.width
    cy = rng.uniform(0.3, 0.7) * spec.height
    r2 = ((xs - cx) ** 2 + (ys - cy) ** 2) / (radius * radius)
    bump = np.sqrt(np.clip(1.0 - r2, 0.0, 1.0))
    return spec.depth_max - (spec.depth_max - spec.depth_min) * bump


def _composite(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    xs, ys = _coords(spec)
    depth = _slope(spec, rng)
    lo, hi = spec.depth_min, spec.depth_max

    def rand_depth():
        return rng.uniform(lo, hi)

    # one guaranteed axis-aligned rectangle and one diagonal band, then a
    # seeded mix of extra rectangles and discs
    x0, y0 = rng.integers(0, spec.width // 2), rng.integers(0, spec.height // 2)
    bw = rng.integers(spec.width // 4, spec.width // 2)
    bh = rng.integers(spec.height // 4, spec.height // 2)
    rect = (xs >= x0) & (xs < x0 + bw) & (ys >= y0) & (ys < y0 + bh)
    depth = np.where(rect, rand_depth(), depth)

    c = rng.uniform(-0.5, 0.5) * spec.width
    width = rng.uniform(0.1, 0.25) * spec.width
    band = np.abs(xs - ys - c) < width
    depth = np.where(band, rand_depth(), depth)

    for _ in range(int(rng.integers(2, 5))):
        if rng.random() < 0.5:
            rx0, ry0 = rng.integers(0, spec.width - 4), rng.integers(0, spec.height - 4)
            rw = rng.integers(3, max(4, spec.width // 3))
            rh = rng.integers(3, max(4, spec.height // 3))
            shape = (xs >= rx0) & (xs < rx0 + rw) & (ys >= ry0) & (ys < ry0 + rh)
        else:
            cx, cy = rng.uniform(0, spec.width), rng.uniform(0, spec.height)
            rr = rng.uniform(0.05, 0.2) * min(spec.width, spec.height)
            shape = (xs - cx) ** 2 + (ys - cy) ** 2 < rr * rr
        depth = np.where(shape, rand_depth(), depth)
    return depth


def gen_scene(spec: SceneSpec) -> Grid:
    """Dense ground-truth depth for a scene spec; bit-identical per seed."""
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "plane":
        depth = np.full((spec.height, spec.width), 0.5 * (spec.depth_min + spec.depth_max))
    elif spec.kind == "slope":
        depth = _slope(spec, rng)
    elif spec.kind == "step":
        depth = _step(spec, rng)
    elif spec.kind == "sphere-cap":
        depth = _sphere_cap(spec, rng)
    else:
        depth = _composite(spec, rng)
    return Grid(depth)


# raw sensor depths are clamped here after noise injection so a valid pixel
# can never collide with the 0 == missing encoding
MIN_SENSOR_DEPTH = 1e-3


def sample_sparse(dstar: Grid, spec: SparseSpec):
    """Independent per-pixel sampling with Gaussian noise and sparse outliers.

    Returns (Ds, m): measurements (0 where missing) and the binary mask.
    All random fields are drawn full-grid in a fixed order, so the mask does
    not depend on the noise settings.
    """
    rng = np.random.default_rng(spec.seed)
    h, w = dstar.height, dstar.width
    keep = rng.random((h, w)) < spec.density
    base_noise = rng.standard_normal((h, w))
    outlier_pick = rng.random((h, w)) < spec.outlier_fraction
    outlier_noise = rng.standard_normal((h, w))
    values = dstar.channel(0) + spec.noise_sigma * base_noise
    values = values + np.where(outlier_pick, spec.outlier_sigma * outlier_noise, 0.0)
    values = np.maximum(values, MIN_SENSOR_DEPTH)
    mask = keep.astype(np.float64)
    return Grid(np.where(keep, values, 0.0)), Grid(mask)


def _nearest_valid_fill(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Each pixel takes the value of its nearest valid pixel.

    Distance is exact squared Euclidean in integer arithmetic; ties resolve
    to the valid pixel with the smallest raster index, matching the scalar
    reference exactly.
    """
    h, w = values.shape
    vy, vx = np.nonzero(mask == 1.0)
    vvals = values[vy, vx]
    filled = np.empty_like(values)
    ys, xs = np.mgrid[0:h, 0:w]
    ys_flat = ys.ravel()[:, np.newaxis]
    xs_flat = xs.ravel()[:, np.newaxis]
    chunk = max(1, (1 << 22) // max(1, vy.size))
    out_flat = filled.ravel()
    for start in range(0, h * w, chunk):
        stop = min(start + chunk, h * w)
        d2 = (ys_flat[start:stop] - vy) ** 2 + (xs_flat[start:stop] - vx) ** 2
        out_flat[start:stop] = vvals[np.argmin(d2, axis=1)]
    return filled


def box_blur3(values: np.ndarray) -> np.ndarray:
    """3x3 box blur with border-clamped reads."""
    h, w = values.shape
    padded = np.pad(values, 1, mode="edge")
    acc = np.zeros_like(values)
    for dy in range(3):
        for dx in range(3):
            acc += padded[dy : dy + h, dx : dx + w]
    return acc / 9.0


def coarse_predict(ds: Grid, m: Grid) -> Grid:
    """Deterministic coarse-depth stand-in: nearest-valid fill, blurred twice."""
    mask = m.channel(0)
    if not mask.any():
        raise EmptySparse("no valid sparse measurements")
    filled = _nearest_valid_fill(ds.channel(0), mask)
    return Grid(box_blur3(box_blur3(filled)))


def build_features(d0: Grid, m: Grid, feature_channels: int = 16) -> Grid:
    """Hand-crafted feature stand-in, tiled to the requested channel count.

    Base channels: depth normalised to [0, 1] over its own range (0.5 when
    the range is degenerate), |d/dx|, |d/dy| (central differences with
    clamped borders), the mask, and x/width, y/height ramps.
    """
    depth = d0.channel(0)
    h, w = depth.shape
    lo, hi = depth.min(), depth.max()
    norm = np.full((h, w), 0.5) if hi == lo else (depth - lo) / (hi - lo)
    padded = np.pad(depth, 1, mode="edge")
    gx = np.abs(padded[1:-1, 2:] - padded[1:-1, :-2]) / 2.0
    gy = np.abs(padded[2:, 1:-1] - padded[:-2, 1:-1]) / 2.0
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    base = np.stack([norm, gx, gy, m.channel(0), xs / w, ys / h], axis=-1)
    reps = -(-feature_channels // base.shape[2])
    tiled = np.tile(base, (1, 1, reps))[:, :, :feature_channels]
    return Grid(tiled)


@dataclass
class Scene:
    """A fully prepared synthetic depth-completion problem."""

    dstar: Grid
    ds: Grid
    m: Grid
    d0: Grid
    features: Grid
    conf: Grid  # heuristic confidence for soft replacement


def prepare_scene(
    scene_spec: SceneSpec,
    sparse_spec: SparseSpec,
    feature_channels: int = 16,
    conf_cfg: ConfidenceConfig | None = None,
) -> Scene:
    dstar = gen_scene(scene_spec)
    ds, m = sample_sparse(dstar, sparse_spec)
    d0 = coarse_predict(ds, m)
    features = build_features(d0, m, feature_channels)
    conf = heuristic_confidence(ds, m, conf_cfg or ConfidenceConfig(), coarse=d0)
    return Scene(dstar=dstar, ds=ds, m=m, d0=d0, features=features, conf=conf)


def suite_scene_specs(
    base: SceneSpec, sparse: SparseSpec, count: int, base_seed: int = 0
):
    """Seed scheme for a scene suite: scene i uses seeds derived from
    (base_seed, i) for the geometry and (base_seed, i, 1) for the sampling."""
    pairs = []
    for i in range(count):
        scene_seed = int(np.random.SeedSequence([base_seed, i]).generate_state(1)[0])
        sparse_seed = int(np.random.SeedSequence([base_seed, i, 1]).generate_state(1)[0])
        pairs.append(
            (
                SceneSpec(base.kind, base.width, base.height, base.depth_min, base.depth_max, scene_seed),
                SparseSpec(sparse.density, sparse.noise_sigma, sparse.outlier_fraction, sparse.outlier_sigma, sparse_seed),
            )
        )
    return pairs
