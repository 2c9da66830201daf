"""Deformable spatial propagation: per-pixel receptive fields and affinities.

Each pixel propagates from k*k-1 continuously displaced neighbour positions
instead of the fixed ring. Neighbour weights come from a scaled-dot-product
softmax between embedded features at the pixel and at each (bilinearly
sampled) displaced position; the self term participates in the softmax, so
the full weight set is a probability distribution and every step is a convex
combination.

The numerical core works on scene batches, shape (S, h, w, ...); the public
grid operations wrap it with S == 1. Affinity depends only on features and
offsets, both fixed during refinement, so refine computes it once and reuses
it every iteration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cspn import neighbor_offsets
from .errors import InvalidConfig, InvalidConfidence, InvalidFeature, InvalidMask, ShapeMismatch
from .grid import (
    ContinuousPos,
    Grid,
    bilinear_taps,
    sample_channels_with_taps,
    same_shape,
)


class OffsetField:
    """Per-pixel, per-neighbour 2-D displacements, shape (h, w, k*k-1, 2).

    The last axis is (dx, dy). Offsets are unclamped; out-of-range sampling
    is resolved by border clamping at sample time.
    """

    __slots__ = ("kernel_size", "delta")

    def __init__(self, kernel_size: int, delta):
        arr = np.asarray(delta, dtype=np.float64)
        n = kernel_size * kernel_size - 1
        if kernel_size < 3 or kernel_size % 2 == 0:
            raise InvalidConfig(f"kernel size must be odd and >= 3, got {kernel_size}")
        if arr.ndim != 4 or arr.shape[2] != n or arr.shape[3] != 2:
            raise ShapeMismatch(f"expected offsets of shape (h, w, {n}, 2), got {arr.shape}")
        if not np.isfinite(arr).all():
            raise InvalidConfig("offset field contains NaN or Inf")
        self.kernel_size = kernel_size
        self.delta = arr

    @classmethod
    def zeros(cls, width: int, height: int, kernel_size: int = 3) -> "OffsetField":
        n = kernel_size * kernel_size - 1
        return cls(kernel_size, np.zeros((height, width, n, 2)))


@dataclass
class EmbeddingParams:
    """The two learnable matrices mapping features to the embedding space.

    Both are (embed_dim, feature_channels). Using two different matrices
    makes the propagation asymmetric on purpose.
    """

    g_theta: np.ndarray
    g_phi: np.ndarray

    def __post_init__(self):
        self.g_theta = np.asarray(self.g_theta, dtype=np.float64)
        self.g_phi = np.asarray(self.g_phi, dtype=np.float64)
        if self.g_theta.ndim != 2 or self.g_theta.shape != self.g_phi.shape:
            raise ShapeMismatch(
                f"embedding matrices must share one 2-D shape, got {self.g_theta.shape} and {self.g_phi.shape}"
            )
        if not (np.isfinite(self.g_theta).all() and np.isfinite(self.g_phi).all()):
            raise InvalidConfig("embedding matrices contain NaN or Inf")

    @property
    def embed_dim(self) -> int:
        return self.g_theta.shape[0]

    @property
    def feature_channels(self) -> int:
        return self.g_theta.shape[1]

    @classmethod
    def init(
        cls,
        embed_dim: int,
        feature_channels: int,
        seed: int,
        scale: float = 0.5,
        noise: float = 0.05,
    ) -> "EmbeddingParams":
        """Identity-leaning random init.

        Similarity starts as a gently scaled feature dot product; the noise
        breaks the theta/phi symmetry. The default scale keeps initial
        logits small: coarse-map features are blurry, so a strong initial
        similarity mostly amplifies their artifacts.
        """
        rng = np.random.default_rng(seed)
        base = np.zeros((embed_dim, feature_channels))
        d = min(embed_dim, feature_channels)
        base[:d, :d] = scale * np.eye(d)
        g_theta = base + noise * rng.standard_normal((embed_dim, feature_channels))
        g_phi = base + noise * rng.standard_normal((embed_dim, feature_channels))
        return cls(g_theta, g_phi)


@dataclass
class AffinityWeights:
    """Softmax weights for one pixel: k*k-1 neighbour terms plus the self term."""

    neighbor_weights: np.ndarray
    self_weight: float


class OffsetEstimatorParams:
    """Weights of the three 3x3 conv layers producing the offset field.

    Layer widths chain feature_channels -> hidden -> hidden -> 2*(k*k-1).
    The final layer starts at exactly zero so the estimator initially
    reproduces the regular receptive field.
    """

    __slots__ = ("w1", "b1", "w2", "b2", "w3", "b3", "kernel_size")

    def __init__(self, w1, b1, w2, b2, w3, b3, kernel_size: int):
        self.w1 = np.asarray(w1, dtype=np.float64)
        self.b1 = np.asarray(b1, dtype=np.float64)
        self.w2 = np.asarray(w2, dtype=np.float64)
        self.b2 = np.asarray(b2, dtype=np.float64)
        self.w3 = np.asarray(w3, dtype=np.float64)
        self.b3 = np.asarray(b3, dtype=np.float64)
        self.kernel_size = kernel_size
        n_out = 2 * (kernel_size * kernel_size - 1)
        shapes_ok = (
            self.w1.ndim == 4
            and self.w1.shape[2:] == (3, 3)
            and self.w2.shape == (self.w2.shape[0], self.w1.shape[0], 3, 3)
            and self.w3.shape == (n_out, self.w2.shape[0], 3, 3)
            and self.b1.shape == (self.w1.shape[0],)
            and self.b2.shape == (self.w2.shape[0],)
            and self.b3.shape == (n_out,)
        )
        if not shapes_ok:
            raise ShapeMismatch("offset estimator layer shapes do not chain")
        for arr in (self.w1, self.b1, self.w2, self.b2, self.w3, self.b3):
            if not np.isfinite(arr).all():
                raise InvalidConfig("offset estimator parameters contain NaN or Inf")

    @property
    def feature_channels(self) -> int:
        return self.w1.shape[1]

    def copy(self) -> "OffsetEstimatorParams":
        return OffsetEstimatorParams(
            self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy(),
            self.w3.copy(), self.b3.copy(), self.kernel_size,
        )

    @classmethod
    def init(
        cls,
        feature_channels: int,
        hidden_channels: int = 16,
        kernel_size: int = 3,
        seed: int = 0,
    ) -> "OffsetEstimatorParams":
        rng = np.random.default_rng(seed)
        n_out = 2 * (kernel_size * kernel_size - 1)

        def he(c_out, c_in):
            return rng.standard_normal((c_out, c_in, 3, 3)) * np.sqrt(2.0 / (9.0 * c_in))

        return cls(
            w1=he(hidden_channels, feature_channels),
            b1=np.zeros(hidden_channels),
            w2=he(hidden_channels, hidden_channels),
            b2=np.zeros(hidden_channels),
            w3=np.zeros((n_out, hidden_channels, 3, 3)),
            b3=np.zeros(n_out),
            kernel_size=kernel_size,
        )


# ---------------------------------------------------------------------------
# 3x3 replicate-padded convolution (the offset estimator's only primitive)
# ---------------------------------------------------------------------------


def conv3x3_replicate(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Stride-1 3x3 convolution with border-replicated padding.

    ``x`` is (..., h, w, c_in); any leading batch axes pass through.
    """
    h, wd = x.shape[-3], x.shape[-2]
    pad = [(0, 0)] * (x.ndim - 3) + [(1, 1), (1, 1), (0, 0)]
    padded = np.pad(x, pad, mode="edge")
    out = np.broadcast_to(b, x.shape[:-1] + (w.shape[0],)).copy()
    for ty in range(3):
        for tx in range(3):
            view = padded[..., ty : ty + h, tx : tx + wd, :]
            out += np.tensordot(view, w[:, :, ty, tx], axes=([view.ndim - 1], [1]))
    return out


def conv3x3_replicate_backward(x: np.ndarray, w: np.ndarray, d_out: np.ndarray):
    """Gradients of :func:`conv3x3_replicate` w.r.t. weights, bias, and input."""
    h, wd = x.shape[-3], x.shape[-2]
    pad = [(0, 0)] * (x.ndim - 3) + [(1, 1), (1, 1), (0, 0)]
    padded = np.pad(x, pad, mode="edge")
    lead = list(range(x.ndim - 1))  # batch + spatial axes
    d_w = np.zeros_like(w)
    d_pad = np.zeros_like(padded)
    for ty in range(3):
        for tx in range(3):
            view = padded[..., ty : ty + h, tx : tx + wd, :]
            d_w[:, :, ty, tx] = np.tensordot(d_out, view, axes=(lead, lead))
            d_pad[..., ty : ty + h, tx : tx + wd, :] += np.tensordot(
                d_out, w[:, :, ty, tx], axes=([d_out.ndim - 1], [0])
            )
    d_b = d_out.sum(axis=tuple(lead))
    # fold the replicate-padding adjoint back onto the edges
    d_x = d_pad[..., 1 : h + 1, 1 : wd + 1, :].copy()
    d_x[..., 0, :, :] += d_pad[..., 0, 1 : wd + 1, :]
    d_x[..., -1, :, :] += d_pad[..., h + 1, 1 : wd + 1, :]
    d_x[..., :, 0, :] += d_pad[..., 1 : h + 1, 0, :]
    d_x[..., :, -1, :] += d_pad[..., 1 : h + 1, wd + 1, :]
    d_x[..., 0, 0, :] += d_pad[..., 0, 0, :]
    d_x[..., 0, -1, :] += d_pad[..., 0, wd + 1, :]
    d_x[..., -1, 0, :] += d_pad[..., h + 1, 0, :]
    d_x[..., -1, -1, :] += d_pad[..., h + 1, wd + 1, :]
    return d_w, d_b, d_x


@dataclass
class EstimatorCache:
    """Forward activations needed to backpropagate through the estimator."""

    x: np.ndarray
    pre1: np.ndarray
    act1: np.ndarray
    pre2: np.ndarray
    act2: np.ndarray


def offset_estimator_forward(F: np.ndarray, params: OffsetEstimatorParams):
    """Run the estimator on (..., h, w, c) features; offsets get shape
    (..., h, w, k*k-1, 2)."""
    pre1 = conv3x3_replicate(F, params.w1, params.b1)
    act1 = np.maximum(pre1, 0.0)
    pre2 = conv3x3_replicate(act1, params.w2, params.b2)
    act2 = np.maximum(pre2, 0.0)
    out = conv3x3_replicate(act2, params.w3, params.b3)
    n = params.kernel_size * params.kernel_size - 1
    delta = out.reshape(out.shape[:-1] + (n, 2))
    cache = EstimatorCache(x=F, pre1=pre1, act1=act1, pre2=pre2, act2=act2)
    return delta, cache


def offset_estimator_backward(d_delta: np.ndarray, cache: EstimatorCache, params: OffsetEstimatorParams):
    """Parameter gradients given the gradient on the emitted offset field."""
    d_out = d_delta.reshape(d_delta.shape[:-2] + (-1,))
    d_w3, d_b3, d_act2 = conv3x3_replicate_backward(cache.act2, params.w3, d_out)
    d_pre2 = d_act2 * (cache.pre2 > 0.0)
    d_w2, d_b2, d_act1 = conv3x3_replicate_backward(cache.act1, params.w2, d_pre2)
    d_pre1 = d_act1 * (cache.pre1 > 0.0)
    d_w1, d_b1, _ = conv3x3_replicate_backward(cache.x, params.w1, d_pre1)
    return {"w1": d_w1, "b1": d_b1, "w2": d_w2, "b2": d_b2, "w3": d_w3, "b3": d_b3}


def offset_estimator(F: Grid, params: OffsetEstimatorParams) -> OffsetField:
    """Run the three-layer estimator over a feature grid."""
    if F.channels != params.feature_channels:
        raise ShapeMismatch(
            f"estimator expects {params.feature_channels}-channel features, got {F.channels}"
        )
    delta, _ = offset_estimator_forward(F.data, params)
    return OffsetField(params.kernel_size, delta)


# ---------------------------------------------------------------------------
# Batched bilinear machinery
# ---------------------------------------------------------------------------


@dataclass
class BatchTaps:
    """Flattened border-clamped corner indices and fractions for batched
    (S, h, w, n) sampling positions. Corner indices address the scene stack
    flattened to (S*h*w,), which keeps every gather a cheap 1-D take."""

    flat00: np.ndarray
    flat10: np.ndarray
    flat01: np.ndarray
    flat11: np.ndarray
    fx: np.ndarray
    fy: np.ndarray


def _make_taps(pos_x: np.ndarray, pos_y: np.ndarray, width: int, height: int) -> BatchTaps:
    t = bilinear_taps(pos_x, pos_y, width, height)
    s = pos_x.shape[0]
    bidx = (np.arange(s, dtype=np.int64) * height).reshape(s, 1, 1, 1)
    row0 = (bidx + t.iy0) * width
    row1 = (bidx + t.iy1) * width
    return BatchTaps(
        flat00=row0 + t.ix0, flat10=row0 + t.ix1,
        flat01=row1 + t.ix0, flat11=row1 + t.ix1,
        fx=t.fx, fy=t.fy,
    )


def _gather_values(values: np.ndarray, taps: BatchTaps) -> np.ndarray:
    """Bilinear samples of (S, h, w) values at the taps, hull-clamped."""
    flat = values.reshape(-1)
    v00 = np.take(flat, taps.flat00)
    v10 = np.take(flat, taps.flat10)
    v01 = np.take(flat, taps.flat01)
    v11 = np.take(flat, taps.flat11)
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


def _gather_feature_corners(values: np.ndarray, taps: BatchTaps):
    """The four corner feature vectors under each tap; each (S, h, w, n, c)."""
    flat = values.reshape(-1, values.shape[-1])
    return (
        np.take(flat, taps.flat00, axis=0),
        np.take(flat, taps.flat10, axis=0),
        np.take(flat, taps.flat01, axis=0),
        np.take(flat, taps.flat11, axis=0),
    )


def _lerp_corners(corners, taps: BatchTaps) -> np.ndarray:
    """Bilinear combination of gathered feature corners; (S, h, w, n, c)."""
    f00, f10, f01, f11 = corners
    fx = taps.fx[..., np.newaxis]
    fy = taps.fy[..., np.newaxis]
    return (
        (1.0 - fx) * (1.0 - fy) * f00
        + fx * (1.0 - fy) * f10
        + (1.0 - fx) * fy * f01
        + fx * fy * f11
    )


def _value_position_gradient(values: np.ndarray, taps: BatchTaps):
    """d(sample)/d(position) for (S, h, w) values at the taps."""
    flat = values.reshape(-1)
    v00 = np.take(flat, taps.flat00)
    v10 = np.take(flat, taps.flat10)
    v01 = np.take(flat, taps.flat01)
    v11 = np.take(flat, taps.flat11)
    fx, fy = taps.fx, taps.fy
    ddx = (1.0 - fy) * (v10 - v00) + fy * (v11 - v01)
    ddy = (1.0 - fx) * (v01 - v00) + fx * (v11 - v10)
    return ddx, ddy


def _feature_position_dot(corners, taps: BatchTaps, df: np.ndarray):
    """Contraction of d(feature sample)/d(position) with upstream df.

    Returns (dpos_x, dpos_y), each (S, h, w, n), straight from the cached
    corner features: no per-channel gradient tensors are materialised.
    """
    f00, f10, f01, f11 = corners
    fx, fy = taps.fx, taps.fy
    dx0 = (df * (f10 - f00)).sum(axis=-1)
    dx1 = (df * (f11 - f01)).sum(axis=-1)
    dy0 = (df * (f01 - f00)).sum(axis=-1)
    dy1 = (df * (f11 - f10)).sum(axis=-1)
    return (1.0 - fy) * dx0 + fy * dx1, (1.0 - fx) * dy0 + fx * dy1


def _scatter_values(grad: np.ndarray, taps: BatchTaps, s: int, height: int, width: int) -> np.ndarray:
    """Adjoint of :func:`_gather_values`: accumulate grads into (S, h, w)."""
    fx, fy = taps.fx, taps.fy
    w00 = (1.0 - fx) * (1.0 - fy) * grad
    w10 = fx * (1.0 - fy) * grad
    w01 = (1.0 - fx) * fy * grad
    w11 = fx * fy * grad
    flat = np.concatenate(
        [taps.flat00.ravel(), taps.flat10.ravel(), taps.flat01.ravel(), taps.flat11.ravel()]
    )
    weights = np.concatenate([w00.ravel(), w10.ravel(), w01.ravel(), w11.ravel()])
    return np.bincount(flat, weights=weights, minlength=s * height * width).reshape(s, height, width)


# ---------------------------------------------------------------------------
# Deformed neighbourhoods and softmax affinity
# ---------------------------------------------------------------------------


def deformed_neighborhood(x_i, kernel_size: int, offsets: OffsetField) -> list:
    """The k*k-1 displaced positions for one pixel, in raster order.

    Positions may be fractional and out of bounds; sampling clamps later.
    """
    if kernel_size != offsets.kernel_size:
        raise ShapeMismatch(
            f"kernel size {kernel_size} does not match offset field ({offsets.kernel_size})"
        )
    x, y = int(x_i[0]), int(x_i[1])
    offs = neighbor_offsets(kernel_size)
    delta = offsets.delta[y, x]
    return [
        ContinuousPos(x + float(offs[j, 0]) + delta[j, 0], y + float(offs[j, 1]) + delta[j, 1])
        for j in range(offs.shape[0])
    ]


def compute_affinity(F: Grid, emb: EmbeddingParams, x_i, nbrs) -> AffinityWeights:
    """Scaled-dot-product softmax weights for one pixel and its neighbours.

    Logits are max-shifted before exponentiation; the self term (similarity
    of the pixel with itself) is part of the normalisation, so all weights
    are strictly positive and sum to 1 with the self weight included.
    """
    if F.channels != emb.feature_channels:
        raise ShapeMismatch(f"features have {F.channels} channels, embedding expects {emb.feature_channels}")
    if not np.isfinite(F.data).all():
        raise InvalidFeature("feature grid contains NaN or Inf")
    x, y = int(x_i[0]), int(x_i[1])
    f_c = F.data[y, x, :]
    scale = np.sqrt(float(emb.feature_channels))
    q = emb.g_theta @ f_c
    logits = np.empty(len(nbrs) + 1)
    for j, p in enumerate(nbrs):
        taps = bilinear_taps(np.float64(p[0]), np.float64(p[1]), F.width, F.height)
        f_j = sample_channels_with_taps(F.data, taps)
        logits[j] = q @ (emb.g_phi @ f_j) / scale
    logits[-1] = q @ (emb.g_phi @ f_c) / scale
    e = np.exp(logits - logits.max())
    w = e / e.sum()
    return AffinityWeights(neighbor_weights=w[:-1], self_weight=float(w[-1]))


@dataclass
class AffinityState:
    """Batched affinity weights plus everything the backward pass reuses."""

    kernel_size: int
    scale: float
    taps: BatchTaps
    corners: tuple  # four (S, h, w, n, d_F) corner feature gathers
    f_nb: np.ndarray  # (S, h, w, n, d_F) sampled neighbour features
    q: np.ndarray  # (S, h, w, d_e)
    k_nb: np.ndarray  # (S, h, w, n, d_e)
    k_self: np.ndarray  # (S, h, w, d_e)
    w_nb: np.ndarray  # (S, h, w, n)
    w_self: np.ndarray  # (S, h, w)
    F: np.ndarray  # (S, h, w, d_F)
    emb: EmbeddingParams


def _matmul_last(x: np.ndarray, m: np.ndarray) -> np.ndarray:
    """x @ m.T over the trailing axis via one BLAS call."""
    lead = x.shape[:-1]
    return (x.reshape(-1, x.shape[-1]) @ m.T).reshape(lead + (m.shape[0],))


def affinity_forward_batched(F: np.ndarray, delta: np.ndarray, emb: EmbeddingParams, kernel_size: int) -> AffinityState:
    s, h, w, d_f = F.shape
    offs = neighbor_offsets(kernel_size)
    pos_x = (
        np.arange(w, dtype=np.float64)[np.newaxis, np.newaxis, :, np.newaxis]
        + offs[:, 0]
        + delta[:, :, :, :, 0]
    )
    pos_y = (
        np.arange(h, dtype=np.float64)[np.newaxis, :, np.newaxis, np.newaxis]
        + offs[:, 1]
        + delta[:, :, :, :, 1]
    )
    taps = _make_taps(pos_x, pos_y, w, h)
    corners = _gather_feature_corners(F, taps)
    f_nb = _lerp_corners(corners, taps)

    scale = np.sqrt(float(d_f))
    q = _matmul_last(F, emb.g_theta)
    k_nb = _matmul_last(f_nb, emb.g_phi)
    k_self = _matmul_last(F, emb.g_phi)

    logit_nb = (k_nb * q[:, :, :, np.newaxis, :]).sum(axis=4) / scale
    logit_self = (q * k_self).sum(axis=3) / scale
    top = np.maximum(logit_nb.max(axis=3), logit_self)
    e_nb = np.exp(logit_nb - top[..., np.newaxis])
    e_self = np.exp(logit_self - top)
    z = e_nb.sum(axis=3) + e_self
    w_nb = e_nb / z[..., np.newaxis]
    w_self = e_self / z
    return AffinityState(
        kernel_size=kernel_size, scale=scale, taps=taps, corners=corners, f_nb=f_nb,
        q=q, k_nb=k_nb, k_self=k_self, w_nb=w_nb, w_self=w_self, F=F, emb=emb,
    )


def affinity_forward(F: np.ndarray, delta: np.ndarray, emb: EmbeddingParams, kernel_size: int) -> AffinityState:
    """Single-scene wrapper: (h, w, d_F) features, (h, w, n, 2) offsets."""
    return affinity_forward_batched(F[np.newaxis], delta[np.newaxis], emb, kernel_size)


@dataclass
class StepRecord:
    """Input maps and sampled neighbour values of one propagation step."""

    h_in: np.ndarray  # (S, h, w)
    h_nb: np.ndarray  # (S, h, w, n)


@dataclass
class RefineState:
    """Forward trace of a refine call: shared affinity plus per-step records."""

    affinity: AffinityState
    steps: list
    replace_factor: np.ndarray  # m * M, (S, h, w)
    out: np.ndarray  # final refined maps, (S, h, w)
    iters: int


def dspn_step_forward(h_arr: np.ndarray, aff: AffinityState):
    """One deformable step on (S, h, w) maps using precomputed affinity.

    Difference form keeps the convex-combination bound exact: with the self
    weight strictly positive the neighbour weights sum to strictly less
    than 1, so the output cannot escape [min, max] of the sampled values.
    """
    h_nb = _gather_values(h_arr, aff.taps)
    out = h_arr + np.einsum("shwn,shwn->shw", aff.w_nb, h_nb - h_arr[..., np.newaxis])
    return out, StepRecord(h_in=h_arr, h_nb=h_nb)


def refine_forward_batched(
    d0: np.ndarray,
    ds: np.ndarray,
    replace_factor: np.ndarray,
    aff: AffinityState,
    iters: int,
    keep_records: bool = True,
) -> RefineState:
    """Iterate (step, blend toward measurements) on (S, h, w) stacks."""
    current = d0
    records = []
    for _ in range(iters):
        stepped, rec = dspn_step_forward(current, aff)
        if keep_records:
            records.append(rec)
        current = (1.0 - replace_factor) * stepped + replace_factor * ds
    return RefineState(
        affinity=aff, steps=records, replace_factor=replace_factor, out=current, iters=iters
    )


def _check_propagation_inputs(H: Grid, F: Grid, offsets: OffsetField, emb: EmbeddingParams):
    if H.channels != 1:
        raise ShapeMismatch(f"propagated map must be single-channel, got {H.channels}")
    if (F.height, F.width) != (H.height, H.width):
        raise ShapeMismatch("feature grid does not match the propagated map")
    if F.channels != emb.feature_channels:
        raise ShapeMismatch(f"features have {F.channels} channels, embedding expects {emb.feature_channels}")
    n = offsets.kernel_size * offsets.kernel_size - 1
    if offsets.delta.shape != (H.height, H.width, n, 2):
        raise ShapeMismatch(f"offset field shape {offsets.delta.shape} does not match grid")
    if not np.isfinite(F.data).all():
        raise InvalidFeature("feature grid contains NaN or Inf")


def dspn_step(H: Grid, F: Grid, offsets: OffsetField, emb: EmbeddingParams) -> Grid:
    """One full deformable propagation step over a grid."""
    _check_propagation_inputs(H, F, offsets, emb)
    aff = affinity_forward(F.data, offsets.delta, emb, offsets.kernel_size)
    out, _ = dspn_step_forward(H.channel(0)[np.newaxis], aff)
    return Grid(out[0])


def dspn_refine_forward(
    D0: Grid,
    Ds: Grid,
    m: Grid,
    M: Grid,
    F: Grid,
    offsets: OffsetField,
    emb: EmbeddingParams,
    iters: int,
    keep_records: bool = True,
):
    """Iterate (deformable step, confidence-weighted replace) from D0.

    Returns the refined grid and the forward state for the backward pass.
    """
    if iters < 0:
        raise InvalidConfig(f"iteration count must be >= 0, got {iters}")
    _check_propagation_inputs(D0, F, offsets, emb)
    for g in (Ds, m, M):
        if not same_shape(D0, g):
            raise ShapeMismatch("refine operands must share one shape")
    mask = m.channel(0)
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise InvalidMask("mask must contain only 0 and 1")
    conf = M.channel(0)
    if conf.min() < 0.0 or conf.max() > 1.0:
        raise InvalidConfidence("confidence must lie in [0, 1]")

    aff = affinity_forward(F.data, offsets.delta, emb, offsets.kernel_size)
    state = refine_forward_batched(
        D0.channel(0)[np.newaxis],
        Ds.channel(0)[np.newaxis],
        (mask * conf)[np.newaxis],
        aff,
        iters,
        keep_records=keep_records,
    )
    return Grid(state.out[0]), state


def dspn_refine(
    D0: Grid,
    Ds: Grid,
    m: Grid,
    M: Grid,
    F: Grid,
    offsets: OffsetField,
    emb: EmbeddingParams,
    iters: int,
) -> Grid:
    refined, _ = dspn_refine_forward(D0, Ds, m, M, F, offsets, emb, iters, keep_records=False)
    return refined
