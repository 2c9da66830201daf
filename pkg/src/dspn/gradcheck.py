"""Analytic gradients for deformable refinement, verified by finite differences.

The operator set is small and fixed, so reverse-mode gradients are derived
per operator by hand instead of through an autodiff tape: softmax Jacobian
for the affinity, bilinear value- and position-gradients for every sampled
read, and plain matrix calculus for the embeddings. Replacement passes
gradients through its (1 - m*M) branch only; sensor values are data, not
parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .deformable import (
    EmbeddingParams,
    OffsetEstimatorParams,
    OffsetField,
    RefineState,
    _feature_position_dot,
    _scatter_values,
    _value_position_gradient,
    affinity_forward_batched,
    dspn_refine_forward,
    offset_estimator_backward,
    offset_estimator_forward,
    refine_forward_batched,
)
from .errors import Diverged, DspnError, InvalidConfig, InvalidState, NonFiniteLoss
from .grid import Grid
from .metrics import LossWeights

REL_ERR_FLOOR = 1e-8


class ParamVector:
    """Flat view of a named set of arrays, with the recipe to rebuild them."""

    __slots__ = ("values", "layout")

    def __init__(self, values: np.ndarray, layout):
        self.values = np.asarray(values, dtype=np.float64)
        self.layout = tuple((name, tuple(shape)) for name, shape in layout)
        expected = sum(int(np.prod(shape)) for _, shape in self.layout)
        if self.values.ndim != 1 or self.values.size != expected:
            raise InvalidConfig(f"flat vector has {self.values.size} entries, layout wants {expected}")

    @classmethod
    def from_dict(cls, params: dict) -> "ParamVector":
        layout = [(name, np.asarray(arr).shape) for name, arr in params.items()]
        if layout:
            values = np.concatenate([np.asarray(arr, dtype=np.float64).ravel() for arr in params.values()])
        else:
            values = np.empty(0)
        return cls(values, layout)

    def to_dict(self) -> dict:
        out = {}
        pos = 0
        for name, shape in self.layout:
            size = int(np.prod(shape))
            out[name] = self.values[pos : pos + size].reshape(shape).copy()
            pos += size
        return out

    def replaced(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.layout)


def finite_diff_grad(loss_fn, p: ParamVector, eps: float = 1e-4, scale_eps: bool = True) -> np.ndarray:
    """Central-difference gradient of a scalar loss, one coordinate at a time.

    The probe size scales with the coordinate magnitude (eps * max(1, |p_i|))
    to avoid cancellation on large parameters.
    """
    if eps <= 0.0:
        raise InvalidConfig(f"eps must be positive, got {eps}")
    base = p.values
    grad = np.empty_like(base)
    probe = base.copy()
    for i in range(base.size):
        step = eps * max(1.0, abs(base[i])) if scale_eps else eps
        probe[i] = base[i] + step
        up = float(loss_fn(p.replaced(probe)))
        probe[i] = base[i] - step
        down = float(loss_fn(p.replaced(probe)))
        probe[i] = base[i]
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NonFiniteLoss(f"loss is not finite near coordinate {i}")
        grad[i] = (up - down) / (2.0 * step)
    return grad


def relative_errors(analytic: np.ndarray, fd: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), REL_ERR_FLOOR)
    return np.abs(analytic - fd) / denom


@dataclass
class GradReport:
    """Comparison of analytic against finite-difference gradients."""

    analytic: np.ndarray
    fd: np.ndarray
    layout: tuple
    max_rel_err: float
    max_abs_err: float

    @classmethod
    def compare(cls, analytic: ParamVector, fd: np.ndarray) -> "GradReport":
        rel = relative_errors(analytic.values, fd)
        return cls(
            analytic=analytic.values,
            fd=fd,
            layout=analytic.layout,
            max_rel_err=float(rel.max()) if rel.size else 0.0,
            max_abs_err=float(np.abs(analytic.values - fd).max()) if rel.size else 0.0,
        )

    def per_group(self) -> dict:
        """Group name -> (max_rel_err, max_abs_err) over that group's slice."""
        out = {}
        pos = 0
        for name, shape in self.layout:
            size = int(np.prod(shape))
            a = self.analytic[pos : pos + size]
            f = self.fd[pos : pos + size]
            rel = relative_errors(a, f)
            out[name] = (float(rel.max()), float(np.abs(a - f).max()))
            pos += size
        return out


def dspn_backward(grad_out, state: RefineState, detach_weights: bool = False) -> dict:
    """Reverse-mode gradients of a recorded refine pass.

    ``grad_out`` is the loss gradient at the refined map(s): a Grid, an
    (h, w) array, or an (S, h, w) stack matching the forward state. Returns
    gradients for the initial map ("h0"), both embedding matrices (summed
    over the batch), and the offset field. With ``detach_weights`` the
    affinity is treated as constant, so the map gradient is exactly the
    convex-combination adjoint.
    """
    if state is None or state.affinity is None:
        raise InvalidState("dspn_backward needs the forward state of a recorded refine call")
    if len(state.steps) != state.iters:
        raise InvalidState("forward state was built without per-step records")
    aff = state.affinity
    if isinstance(grad_out, Grid):
        g = grad_out.channel(0).copy()
    else:
        g = np.array(grad_out, dtype=np.float64, copy=True)
    squeeze = g.ndim == 2
    if squeeze:
        g = g[np.newaxis]
    s, height, width = g.shape

    dw_nb = np.zeros_like(aff.w_nb)
    dpos_x = np.zeros_like(aff.w_nb)
    dpos_y = np.zeros_like(aff.w_nb)
    one_minus_sum = 1.0 - aff.w_nb.sum(axis=3)

    for rec in reversed(state.steps):
        g = g * (1.0 - state.replace_factor)
        if not detach_weights:
            dw_nb += g[..., np.newaxis] * (rec.h_nb - rec.h_in[..., np.newaxis])
        gw = g[..., np.newaxis] * aff.w_nb
        ddx, ddy = _value_position_gradient(rec.h_in, aff.taps)
        dpos_x += gw * ddx
        dpos_y += gw * ddy
        g = _scatter_values(gw, aff.taps, s, height, width) + g * one_minus_sum

    d_theta = np.zeros_like(aff.emb.g_theta)
    d_phi = np.zeros_like(aff.emb.g_phi)
    if not detach_weights and state.steps:
        d_e = aff.q.shape[-1]
        d_f = aff.F.shape[-1]
        # softmax over n+1 entries; the self weight has no direct upstream
        t = (aff.w_nb * dw_nb).sum(axis=3)
        dlogit_nb = aff.w_nb * (dw_nb - t[..., np.newaxis])
        dlogit_self = -aff.w_self * t
        dq = (
            (dlogit_nb[..., np.newaxis] * aff.k_nb).sum(axis=3)
            + dlogit_self[..., np.newaxis] * aff.k_self
        ) / aff.scale
        dk_nb = dlogit_nb[..., np.newaxis] * (aff.q[:, :, :, np.newaxis, :] / aff.scale)
        dk_self = dlogit_self[..., np.newaxis] * aff.q / aff.scale
        d_theta = dq.reshape(-1, d_e).T @ aff.F.reshape(-1, d_f)
        d_phi = (
            dk_nb.reshape(-1, d_e).T @ aff.f_nb.reshape(-1, d_f)
            + dk_self.reshape(-1, d_e).T @ aff.F.reshape(-1, d_f)
        )
        df_nb = (dk_nb.reshape(-1, d_e) @ aff.emb.g_phi).reshape(dk_nb.shape[:-1] + (d_f,))
        dpx, dpy = _feature_position_dot(aff.corners, aff.taps, df_nb)
        dpos_x += dpx
        dpos_y += dpy

    d_offsets = np.stack([dpos_x, dpos_y], axis=-1)
    if squeeze:
        return {"h0": g[0], "g_theta": d_theta, "g_phi": d_phi, "offsets": d_offsets[0]}
    return {"h0": g, "g_theta": d_theta, "g_phi": d_phi, "offsets": d_offsets}


# ---------------------------------------------------------------------------
# Seeded verification instances
# ---------------------------------------------------------------------------


@dataclass
class GradcheckInstance:
    """A small refinement problem with every input drawn at a safe scale.

    Offset components stay in +-[0.05, 0.45] so no sampling position sits
    within a finite-difference probe of a bilinear lattice kink.
    """

    d0: Grid
    ds: Grid
    m: Grid
    conf: Grid
    features: Grid
    offsets: OffsetField
    emb: EmbeddingParams
    target: Grid
    iters: int


def make_gradcheck_instance(
    seed: int,
    width: int = 8,
    height: int = 8,
    feature_channels: int = 4,
    embed_dim: int = 4,
    kernel_size: int = 3,
    iters: int = 2,
) -> GradcheckInstance:
    rng = np.random.default_rng(seed)
    n = kernel_size * kernel_size - 1
    d0 = Grid(rng.uniform(0.0, 1.0, (height, width)))
    ds = Grid(rng.uniform(0.0, 1.0, (height, width)))
    m = Grid((rng.random((height, width)) < 0.3).astype(np.float64))
    conf = Grid(rng.uniform(0.0, 1.0, (height, width)))
    features = Grid(rng.uniform(0.0, 1.0, (height, width, feature_channels)))
    mag = rng.uniform(0.05, 0.45, (height, width, n, 2))
    sign = rng.choice([-1.0, 1.0], (height, width, n, 2))
    offsets = OffsetField(kernel_size, mag * sign)
    emb = EmbeddingParams(
        rng.normal(0.0, 0.4, (embed_dim, feature_channels)),
        rng.normal(0.0, 0.4, (embed_dim, feature_channels)),
    )
    target = Grid(rng.uniform(0.0, 1.0, (height, width)))
    return GradcheckInstance(
        d0=d0, ds=ds, m=m, conf=conf, features=features,
        offsets=offsets, emb=emb, target=target, iters=iters,
    )


def refine_loss(inst: GradcheckInstance, d0, offsets, emb) -> float:
    refined, _ = dspn_refine_forward(
        d0, inst.ds, inst.m, inst.conf, inst.features, offsets, emb, inst.iters,
        keep_records=False,
    )
    diff = refined.channel(0) - inst.target.channel(0)
    return float(np.mean(diff * diff))


def instance_params(inst: GradcheckInstance) -> ParamVector:
    return ParamVector.from_dict(
        {
            "h0": inst.d0.channel(0),
            "g_theta": inst.emb.g_theta,
            "g_phi": inst.emb.g_phi,
            "offsets": inst.offsets.delta,
        }
    )


def _loss_from_vector(inst: GradcheckInstance, p: ParamVector) -> float:
    d = p.to_dict()
    return refine_loss(
        inst,
        Grid(d["h0"]),
        OffsetField(inst.offsets.kernel_size, d["offsets"]),
        EmbeddingParams(d["g_theta"], d["g_phi"]),
    )


def analytic_refine_grads(inst: GradcheckInstance) -> ParamVector:
    refined, state = dspn_refine_forward(
        inst.d0, inst.ds, inst.m, inst.conf, inst.features,
        inst.offsets, inst.emb, inst.iters, keep_records=True,
    )
    resid = refined.channel(0) - inst.target.channel(0)
    upstream = 2.0 * resid / resid.size
    grads = dspn_backward(upstream, state)
    return ParamVector.from_dict(
        {
            "h0": grads["h0"],
            "g_theta": grads["g_theta"],
            "g_phi": grads["g_phi"],
            "offsets": grads["offsets"],
        }
    )


def check_instance_gradients(inst: GradcheckInstance, eps: float = 1e-4) -> GradReport:
    """Compare analytic and finite-difference gradients on one instance."""
    analytic = analytic_refine_grads(inst)
    p = instance_params(inst)
    fd = finite_diff_grad(lambda v: _loss_from_vector(inst, v), p, eps=eps)
    return GradReport.compare(analytic.replaced(analytic.values), fd)


# ---------------------------------------------------------------------------
# Toy gradient-descent fitter
# ---------------------------------------------------------------------------


@dataclass
class FitParams:
    """Trainable state for the toy fitter.

    Offsets are parameterised either through the three-layer estimator
    (per-scene offsets from per-scene features) or as one raw offset field
    shared across scenes; both routes share the same backward pass.
    """

    emb: EmbeddingParams
    estimator: OffsetEstimatorParams | None = None
    offsets: OffsetField | None = None

    def __post_init__(self):
        if (self.estimator is None) == (self.offsets is None):
            raise InvalidConfig("exactly one of estimator/offsets must be set")

    def copy(self) -> "FitParams":
        return FitParams(
            emb=EmbeddingParams(self.emb.g_theta.copy(), self.emb.g_phi.copy()),
            estimator=None if self.estimator is None else self.estimator.copy(),
            offsets=None
            if self.offsets is None
            else OffsetField(self.offsets.kernel_size, self.offsets.delta.copy()),
        )


def _scene_offsets(params: FitParams, features: Grid):
    if params.estimator is not None:
        delta, cache = offset_estimator_forward(features.data, params.estimator)
        return OffsetField(params.estimator.kernel_size, delta), cache
    return params.offsets, None


def scene_refined(params: FitParams, scene, iters: int, keep_records: bool = False):
    """Refine one prepared scene bundle with the current parameters."""
    offsets, cache = _scene_offsets(params, scene.features)
    refined, state = dspn_refine_forward(
        scene.d0, scene.ds, scene.m, scene.conf, scene.features,
        offsets, params.emb, iters, keep_records=keep_records,
    )
    return refined, state, cache


@dataclass
class _SceneStack:
    """Scene bundles stacked along a leading batch axis."""

    d0: np.ndarray
    ds: np.ndarray
    replace_factor: np.ndarray
    features: np.ndarray
    target: np.ndarray


def _stack_scenes(scenes) -> _SceneStack:
    return _SceneStack(
        d0=np.stack([s.d0.channel(0) for s in scenes]),
        ds=np.stack([s.ds.channel(0) for s in scenes]),
        replace_factor=np.stack([s.m.channel(0) * s.conf.channel(0) for s in scenes]),
        features=np.stack([s.features.data for s in scenes]),
        target=np.stack([s.dstar.channel(0) for s in scenes]),
    )


FIT_CHUNK = 10  # scenes per batched forward/backward; bounds peak memory


def _fit_loss_and_grads(params: FitParams, stack: _SceneStack, iters: int, weight: float,
                        kernel_size: int, compute_grads: bool = True):
    total_scenes = stack.d0.shape[0]
    loss = 0.0
    d_theta = np.zeros_like(params.emb.g_theta)
    d_phi = np.zeros_like(params.emb.g_phi)
    d_est = None
    d_off = None
    if params.estimator is not None:
        d_est = {k: np.zeros_like(getattr(params.estimator, k)) for k in ("w1", "b1", "w2", "b2", "w3", "b3")}
    else:
        d_off = np.zeros_like(params.offsets.delta)

    px_per_scene = stack.d0.shape[1] * stack.d0.shape[2]
    for start in range(0, total_scenes, FIT_CHUNK):
        stop = min(start + FIT_CHUNK, total_scenes)
        feats = stack.features[start:stop]
        if params.estimator is not None:
            delta, cache = offset_estimator_forward(feats, params.estimator)
        else:
            delta = np.broadcast_to(params.offsets.delta, (stop - start,) + params.offsets.delta.shape)
            cache = None
        aff = affinity_forward_batched(feats, delta, params.emb, kernel_size)
        state = refine_forward_batched(
            stack.d0[start:stop], stack.ds[start:stop], stack.replace_factor[start:stop],
            aff, iters, keep_records=compute_grads,
        )
        resid = state.out - stack.target[start:stop]
        loss += weight * float((resid * resid).sum()) / px_per_scene
        if not compute_grads:
            continue
        upstream = weight * 2.0 * resid / px_per_scene / total_scenes
        grads = dspn_backward(upstream, state)
        d_theta += grads["g_theta"]
        d_phi += grads["g_phi"]
        if params.estimator is not None:
            for k, v in offset_estimator_backward(grads["offsets"], cache, params.estimator).items():
                d_est[k] += v
        else:
            d_off += grads["offsets"].sum(axis=0)
    return loss / total_scenes, {"g_theta": d_theta, "g_phi": d_phi, "estimator": d_est, "offsets": d_off}


def toy_fit(
    scenes,
    init: FitParams,
    lr: float,
    steps: int,
    seed: int = 0,
    iters: int = 3,
    weights: LossWeights | None = None,
):
    """Plain gradient descent on the refined-depth loss over a scene set.

    Each update is exactly p <- p - lr * grad. Returns the fitted
    parameters and the loss trace (initial loss followed by the loss after
    each step). The seed only matters when drawing a default init.

    Raises Diverged as soon as the loss stops being finite.
    """
    if steps < 1:
        raise InvalidConfig(f"steps must be >= 1, got {steps}")
    if not (np.isfinite(lr) and lr >= 0.0):
        raise InvalidConfig(f"lr must be finite and >= 0, got {lr}")
    if init is None:
        d_f = scenes[0].features.channels
        init = FitParams(
            emb=EmbeddingParams.init(d_f, d_f, seed=seed),
            estimator=OffsetEstimatorParams.init(d_f, seed=seed + 1),
        )
    weight = (weights or LossWeights()).refined
    kernel_size = init.estimator.kernel_size if init.estimator is not None else init.offsets.kernel_size

    params = init.copy()
    stack = _stack_scenes(scenes)

    loss, grads = _fit_loss_and_grads(params, stack, iters, weight, kernel_size)
    if not np.isfinite(loss):
        raise Diverged(f"initial loss is not finite: {loss}")
    trace = [loss]
    for step in range(steps):
        params.emb.g_theta -= lr * grads["g_theta"]
        params.emb.g_phi -= lr * grads["g_phi"]
        if params.estimator is not None:
            for k in ("w1", "b1", "w2", "b2", "w3", "b3"):
                setattr(params.estimator, k, getattr(params.estimator, k) - lr * grads["estimator"][k])
        else:
            params.offsets.delta -= lr * grads["offsets"]
        last = step == steps - 1
        try:
            # the propagation output is range-bounded, so runaway parameters
            # surface as non-finite intermediates rather than an infinite
            # loss; after a clean initial evaluation any DspnError or float
            # overflow here means the optimisation blew up
            with np.errstate(over="raise", invalid="raise"):
                loss, grads = _fit_loss_and_grads(
                    params, stack, iters, weight, kernel_size, compute_grads=not last
                )
        except (DspnError, FloatingPointError) as exc:
            raise Diverged(f"forward pass failed after {step + 1} step(s): {exc}") from exc
        if not np.isfinite(loss):
            raise Diverged(f"loss diverged to {loss}")
        trace.append(loss)
    return params, trace
