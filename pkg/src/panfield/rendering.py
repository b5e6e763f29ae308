"""Ray sampling, transmittance weights, panoptic compositing and view rendering.

Weights follow ``w_i = T_i (1 - exp(-sigma_i dt_i))`` with
``dt_i = t_{i+1} - t_i`` and a bounded last bucket ``dt_N = t_far - t_N``.
Semantic and instance logits are aggregated with the weights and only then
passed through a softmax.  Residual transmittance composites to black.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _accel
from .autodiff import Var, new_var
from .dataset_io import NONE, CameraModel, image_rays
from .errors import DomainError, NumericFault


@dataclass(frozen=True)
class RenderConfig:
    n_samples: int = 64
    stratified: bool = False
    seed: int = 0
    chunk: int = 4096
    skip_threshold: float = 0.0  # understanding path only where w > threshold

    def __post_init__(self):
        if self.n_samples < 1:
            raise DomainError("need at least one sample per ray")
        if self.chunk < 1:
            raise DomainError("chunk must be >= 1")


# ------------------------------------------------------------ sampling


def sample_distances(t_near, t_far, n: int, stratified: bool = False, rng=None) -> np.ndarray:
    """(R, n) sorted distances: bucket midpoints, or one uniform draw per bucket."""
    if n < 1:
        raise DomainError("N must be >= 1")
    t_near = np.atleast_1d(np.asarray(t_near, dtype=np.float64))
    t_far = np.atleast_1d(np.asarray(t_far, dtype=np.float64))
    if np.any(t_far <= t_near):
        raise DomainError("need t_near < t_far")
    width = (t_far - t_near) / n
    if stratified:
        rng = np.random.default_rng() if rng is None else rng
        u = rng.random((t_near.size, n))
    else:
        u = np.full((t_near.size, n), 0.5)
    return t_near[:, None] + (np.arange(n)[None, :] + u) * width[:, None]


def sample_along_ray(ray, t_near: float, t_far: float, n: int, stratified=False, rng=None) -> np.ndarray:
    return sample_distances(t_near, t_far, n, stratified, rng)[0]


# ------------------------------------------------------------ weight kernels


@_accel.njit
def _weights_fwd_nb(sigma, t, tfar, w, resid):
    n_ray, n = sigma.shape
    for r in range(n_ray):
        acc = 0.0
        for i in range(n):
            dt = (t[r, i + 1] if i + 1 < n else tfar[r]) - t[r, i]
            a = sigma[r, i] * dt
            w[r, i] = math.exp(-acc) * -math.expm1(-a)
            acc += a
        resid[r] = math.exp(-acc)


@_accel.njit
def _weights_bwd_nb(sigma, t, tfar, w, dw, dsigma):
    n_ray, n = sigma.shape
    for r in range(n_ray):
        acc = 0.0
        for i in range(n):
            dt = (t[r, i + 1] if i + 1 < n else tfar[r]) - t[r, i]
            acc += sigma[r, i] * dt
        # acc now holds the full optical depth; walk backwards
        tail = 0.0
        for i in range(n - 1, -1, -1):
            dt = (t[r, i + 1] if i + 1 < n else tfar[r]) - t[r, i]
            t_next = math.exp(-acc)
            dsigma[r, i] = dt * (dw[r, i] * t_next - tail)
            tail += dw[r, i] * w[r, i]
            acc -= sigma[r, i] * dt


def _deltas(t, tfar):
    return np.concatenate([np.diff(t, axis=1), tfar[:, None] - t[:, -1:]], axis=1)


def _weights_fwd_np(sigma, t, tfar):
    a = sigma * _deltas(t, tfar)
    acc = np.cumsum(a, axis=1)
    before = np.concatenate([np.zeros_like(acc[:, :1]), acc[:, :-1]], axis=1)
    return np.exp(-before) * -np.expm1(-a), np.exp(-acc[:, -1])


def _weights_bwd_np(sigma, t, tfar, w, dw):
    dt = _deltas(t, tfar)
    t_next = np.exp(-np.cumsum(sigma * dt, axis=1))
    prod = dw * w
    tail = np.cumsum(prod[:, ::-1], axis=1)[:, ::-1] - prod
    return dt * (dw * t_next - tail)


def _check_sorted(t):
    if t.shape[1] > 1 and np.any(np.diff(t, axis=1) <= 0):
        raise DomainError("sample distances must be strictly increasing")


def weights_batch(sigma, t, tfar, use_numba=None):
    """Weights (R, N) and residual transmittance (R,) for a batch of rays."""
    use_numba = _accel.USE_NUMBA if use_numba is None else use_numba
    sigma = np.ascontiguousarray(sigma, dtype=np.float64)
    t = np.ascontiguousarray(t, dtype=np.float64)
    tfar = np.ascontiguousarray(np.broadcast_to(tfar, (t.shape[0],)), dtype=np.float64)
    if use_numba:
        w = np.empty_like(sigma)
        resid = np.empty(sigma.shape[0])
        _weights_fwd_nb(sigma, t, tfar, w, resid)
        return w, resid
    return _weights_fwd_np(sigma, t, tfar)


def weights_backward(sigma, t, tfar, w, dw, use_numba=None):
    """Adjoint of ``weights_batch`` with respect to the densities."""
    use_numba = _accel.USE_NUMBA if use_numba is None else use_numba
    sigma = np.ascontiguousarray(sigma, dtype=np.float64)
    t = np.ascontiguousarray(t, dtype=np.float64)
    tfar = np.ascontiguousarray(np.broadcast_to(tfar, (t.shape[0],)), dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    dw = np.ascontiguousarray(dw, dtype=np.float64)
    if use_numba:
        out = np.empty_like(sigma)
        _weights_bwd_nb(sigma, t, tfar, w, dw, out)
        return out
    return _weights_bwd_np(sigma, t, tfar, w, dw)


def compute_weights(sigmas, ts, t_far):
    """Single-ray weights and residual transmittance ``T_{N+1}``."""
    sigmas = np.asarray(sigmas, dtype=np.float64)[None]
    ts = np.asarray(ts, dtype=np.float64)[None]
    _check_sorted(ts)
    if np.any(sigmas < 0):
        raise DomainError("densities must be non-negative")
    w, resid = weights_batch(sigmas, ts, np.array([t_far], dtype=np.float64))
    return w[0], float(resid[0])


# ------------------------------------------------------------ compositing


@dataclass
class RaySampleSet:
    t: np.ndarray
    dt: np.ndarray
    sigma: np.ndarray
    weights: np.ndarray
    color: np.ndarray
    sem: np.ndarray
    inst: np.ndarray
    residual: float = 1.0

    @classmethod
    def build(cls, t, t_far, sigma, color, sem, inst):
        t = np.asarray(t, dtype=np.float64)
        w, resid = compute_weights(sigma, t, t_far)
        dt = _deltas(t[None], np.array([t_far]))[0]
        return cls(t, dt, np.asarray(sigma, dtype=np.float64), w, np.asarray(color), np.asarray(sem), np.asarray(inst), resid)


@dataclass
class PanopticPixel:
    color: np.ndarray
    sem: np.ndarray
    inst: np.ndarray
    depth: float
    disparity: float
    u_star: int
    v_star: int


def softmax(z, axis=-1):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def composite_pixel(samples: RaySampleSet, thing_mask=None) -> PanopticPixel:
    w = samples.weights
    if np.any(samples.t <= 0):
        raise DomainError("disparity needs positive sample distances")
    color = w @ samples.color
    U = softmax(w @ samples.sem)
    V = softmax(w @ samples.inst)
    u_star = int(np.argmax(U))
    if thing_mask is None:
        things = np.arange(U.size) > 0
    else:
        things = np.asarray(thing_mask, dtype=bool)
    v_star = int(thing_argmax(V)) if things[u_star] else NONE
    return PanopticPixel(color, U, V, float(w @ samples.t), float(np.sum(w / samples.t)), u_star, v_star)


# Gradients below this are flushed to zero. Samples far behind a surface get
# weights near 1e-40, and the float32 denormals they produce make every matmul
# downstream several times slower while contributing nothing to an update.
GRAD_FLOOR = 1e-30


def _flush_tiny(a):
    a[np.abs(a) < GRAD_FLOOR] = 0
    return a


def _segment_accumulate(ray_idx, values, n_rays):
    out = np.zeros((n_rays, values.shape[1]), dtype=values.dtype)
    np.add.at(out, ray_idx, values)
    return out


def composite(sigma: Var, t: np.ndarray, tfar: np.ndarray, color: Optional[Var] = None,
              sem: Optional[Var] = None, inst: Optional[Var] = None, sel: Optional[np.ndarray] = None,
              weights=None, und_to_density=None):
    """Differentiable compositing of one batch of rays.

    ``sigma`` is (R, N) and ``color`` (R, N, 3).  ``sem``/``inst`` hold logits at
    the flat sample indices ``sel`` (all R*N samples when ``sel`` is None).
    Returns a dict of Vars: color, sem_logits, inst_logits, depth, disp, weights,
    plus the plain residual transmittance array.
    ``und_to_density`` (bool per ray) limits which rays pass semantic and
    instance gradients back into the density; None means all of them.
    """
    n_ray, n = sigma.value.shape
    dtype = sigma.value.dtype
    if weights is None:
        w64, resid = weights_batch(sigma.value, t, tfar)
    else:
        w64, resid = weights
    w = w64.astype(dtype)
    t_d = t.astype(dtype)
    if sel is None and (sem is not None or inst is not None):
        sel = np.arange(n_ray * n)
    ray_of = None if sel is None else sel // n
    w_sel = None if sel is None else w.reshape(-1)[sel]

    outs = {}
    inputs = [sigma] + [v for v in (color, sem, inst) if v is not None]
    outs["weights"] = new_var(w, *inputs)
    outs["depth"] = new_var((w * t_d).sum(axis=1), *inputs)
    outs["disp"] = new_var((w / t_d).sum(axis=1), *inputs)
    if color is not None:
        outs["color"] = new_var(np.einsum("rn,rnc->rc", w, color.value), *inputs)
    if sem is not None:
        outs["sem_logits"] = new_var(_segment_accumulate(ray_of, w_sel[:, None] * sem.value, n_ray), *inputs)
    if inst is not None:
        outs["inst_logits"] = new_var(_segment_accumulate(ray_of, w_sel[:, None] * inst.value, n_ray), *inputs)
    outs["residual"] = resid

    order = [k for k in ("weights", "depth", "disp", "color", "sem_logits", "inst_logits") if k in outs]
    tape = outs["weights"].tape
    if tape is not None:

        def back(grads):
            g = dict(zip(order, grads))
            dw = np.zeros_like(w)
            if g.get("weights") is not None:
                dw += g["weights"]
            if g.get("depth") is not None:
                dw += g["depth"][:, None] * t_d
            if g.get("disp") is not None:
                dw += g["disp"][:, None] / t_d
            if color is not None and g.get("color") is not None:
                gc = g["color"]
                dw += np.einsum("rc,rnc->rn", gc, color.value)
                color.accum(_flush_tiny(w[:, :, None] * gc[:, None, :]))
            flat = dw.reshape(-1)
            for key, var in (("sem_logits", sem), ("inst_logits", inst)):
                if var is None or g.get(key) is None:
                    continue
                gz = g[key][ray_of]
                dz = np.sum(gz * var.value, axis=1)
                if und_to_density is not None:
                    dz = dz * und_to_density[ray_of]
                np.add.at(flat, sel, dz)
                var.accum(w_sel[:, None] * gz)
            if sigma.requires_grad:
                sigma.accum(_flush_tiny(weights_backward(sigma.value, t, tfar, w64, dw).astype(dtype)))

        tape.record(tuple(outs[k] for k in order), back)
    return outs


# ------------------------------------------------------------ whole views


@dataclass
class PanopticImage:
    color: np.ndarray  # (H, W, 3)
    sem: np.ndarray  # (H, W, U) probabilities
    inst: np.ndarray  # (H, W, V) probabilities
    depth: np.ndarray
    disparity: np.ndarray
    opacity: np.ndarray
    sem_label: np.ndarray
    inst_label: np.ndarray


def thing_argmax(inst_prob):
    """Most likely instance channel for a thing pixel.

    Channel 0 is trained as the stuff/background target and never holds a
    thing instance, so it is skipped whenever another channel exists.
    """
    inst_prob = np.asarray(inst_prob)
    if inst_prob.shape[-1] < 2:
        return np.argmax(inst_prob, axis=-1)
    return np.argmax(inst_prob[..., 1:], axis=-1) + 1


def readout(sem_prob, inst_prob, thing_mask):
    """Argmax labels; instance label is NONE wherever the class is not a thing."""
    things = np.asarray(thing_mask, dtype=bool)
    u_star = np.argmax(sem_prob, axis=-1)
    v_star = np.where(things[u_star], thing_argmax(inst_prob), NONE)
    return u_star, v_star


def render_rays(model, origins, dirs, t_near, t_far, config: RenderConfig, rng=None):
    """Composite a set of rays with any model exposing ``density_color`` and ``logits``."""
    n_ray = origins.shape[0]
    t_near = np.broadcast_to(np.asarray(t_near, dtype=np.float64), (n_ray,))
    t_far = np.broadcast_to(np.asarray(t_far, dtype=np.float64), (n_ray,))
    if config.stratified and rng is None:
        rng = np.random.default_rng(config.seed)
    t = sample_distances(t_near, t_far, config.n_samples, config.stratified, rng)
    out = {k: [] for k in ("color", "sem", "inst", "depth", "disp", "opacity", "weight_sum", "residual")}
    for lo in range(0, n_ray, config.chunk):
        hi = min(lo + config.chunk, n_ray)
        try:
            _render_chunk(model, origins[lo:hi], dirs[lo:hi], t[lo:hi], t_far[lo:hi], config, out)
        except NumericFault as exc:
            raise NumericFault(f"{exc} (rays {lo}..{hi - 1})") from exc
    return {k: np.concatenate(v, axis=0) for k, v in out.items()}


def _render_chunk(model, o, d, t, tfar, config, out):
    n_ray, n = t.shape
    pts = o[:, None, :] + t[:, :, None] * d[:, None, :]
    dirs = np.broadcast_to(d[:, None, :], pts.shape)
    sigma, color = model.density_color(pts.reshape(-1, 3), dirs.reshape(-1, 3))
    sigma = sigma.reshape(n_ray, n).astype(np.float64)
    w, resid = weights_batch(sigma, t, tfar)
    sel = np.flatnonzero(w.reshape(-1) > config.skip_threshold) if config.skip_threshold > 0 else np.arange(n_ray * n)
    sem, inst = model.logits(pts.reshape(-1, 3)[sel])
    res = composite(Var(sigma), t, tfar, Var(color.reshape(n_ray, n, 3).astype(np.float64)),
                    Var(sem.astype(np.float64)), Var(inst.astype(np.float64)), sel, weights=(w, resid))
    out["color"].append(res["color"].value)
    out["sem"].append(softmax(res["sem_logits"].value))
    out["inst"].append(softmax(res["inst_logits"].value))
    out["depth"].append(res["depth"].value)
    out["disp"].append(res["disp"].value)
    out["opacity"].append(1.0 - resid)
    out["weight_sum"].append(w.sum(axis=1))
    out["residual"].append(resid)


def render_view(model, camera: CameraModel, config: RenderConfig = RenderConfig(), thing_mask=None) -> PanopticImage:
    """Render every pixel of ``camera``; chunking never changes the result."""
    o, d = image_rays(camera)
    res = render_rays(model, o, d, camera.t_near, camera.t_far, config)
    h, w = camera.height, camera.width
    if thing_mask is None:
        thing_mask = getattr(model, "thing_mask", None)
    if thing_mask is None:
        thing_mask = [False] + [True] * (res["sem"].shape[1] - 1)
    u_star, v_star = readout(res["sem"], res["inst"], thing_mask)
    return PanopticImage(
        color=res["color"].reshape(h, w, 3),
        sem=res["sem"].reshape(h, w, -1),
        inst=res["inst"].reshape(h, w, -1),
        depth=res["depth"].reshape(h, w),
        disparity=res["disp"].reshape(h, w),
        opacity=res["opacity"].reshape(h, w),
        sem_label=u_star.reshape(h, w),
        inst_label=v_star.reshape(h, w),
    )
