"""Patch sampling, same-label grouping, instance assignment, feature extraction and loss terms.

Every loss is a tape operation: it accepts Vars (or plain arrays) and returns a
scalar Var, so the same code serves evaluation and backpropagation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _accel
from . import autodiff as ad
from .autodiff import Var, new_var
from .dataset_io import NONE, SceneDataset, rays_for_pixels
from .errors import CapacityError, ContractError, DomainError, ValidationError
from .metrics import hungarian

# ------------------------------------------------------------ patches


@dataclass
class PatchBatch:
    """``n`` square patches of side ``size``; per-ray arrays are patch-major, row-major inside."""

    frame_ids: np.ndarray  # (n,)
    corners: np.ndarray  # (n, 2) top-left (x, y)
    size: int
    pixels: np.ndarray  # (n*P*P, 2) integer (x, y)
    origins: np.ndarray
    dirs: np.ndarray
    t_near: np.ndarray
    t_far: np.ndarray
    color: np.ndarray  # observed (n*P*P, 3)
    semantic: np.ndarray
    instance: np.ndarray  # frame-local ids, NONE on stuff
    confidence: np.ndarray
    rendered: Optional[dict] = None

    @property
    def n_patches(self) -> int:
        return int(self.frame_ids.size)

    @property
    def n_rays(self) -> int:
        return int(self.semantic.size)

    @property
    def ray_frame(self) -> np.ndarray:
        return np.repeat(self.frame_ids, self.size * self.size)

    def patch_slice(self, k: int) -> slice:
        m = self.size * self.size
        return slice(k * m, (k + 1) * m)


def sample_patches(dataset: SceneDataset, P: int, n_patches: int, rng) -> PatchBatch:
    """Draw patches uniformly over (frame, valid top-left corner)."""
    if P < 1:
        raise DomainError("patch side must be >= 1")
    for fr in dataset.frames:
        if P > min(fr.camera.height, fr.camera.width):
            raise DomainError(f"patch side {P} exceeds frame size {fr.camera.width}x{fr.camera.height}")
    fids = rng.integers(0, len(dataset.frames), size=n_patches)
    corners = np.empty((n_patches, 2), dtype=np.int64)
    dy, dx = np.mgrid[0:P, 0:P]
    dx, dy = dx.ravel(), dy.ravel()
    parts = {k: [] for k in ("pix", "o", "d", "tn", "tf", "c", "s", "i", "l")}
    for k, f in enumerate(fids):
        fr = dataset.frames[f]
        cam = fr.camera
        x0 = int(rng.integers(0, cam.width - P + 1))
        y0 = int(rng.integers(0, cam.height - P + 1))
        corners[k] = (x0, y0)
        xs, ys = x0 + dx, y0 + dy
        o, d = rays_for_pixels(cam, xs + 0.5, ys + 0.5)
        parts["pix"].append(np.stack([xs, ys], axis=1))
        parts["o"].append(o)
        parts["d"].append(d)
        parts["tn"].append(np.full(xs.size, cam.t_near))
        parts["tf"].append(np.full(xs.size, cam.t_far))
        parts["c"].append(fr.color[ys, xs])
        parts["s"].append(fr.semantic[ys, xs])
        parts["i"].append(fr.instance[ys, xs])
        parts["l"].append(fr.conf_map()[ys, xs])
    cat = {k: np.concatenate(v) if v else np.zeros(0) for k, v in parts.items()}
    return PatchBatch(
        frame_ids=fids.astype(np.int64),
        corners=corners,
        size=P,
        pixels=cat["pix"].astype(np.int64).reshape(-1, 2),
        origins=cat["o"].reshape(-1, 3),
        dirs=cat["d"].reshape(-1, 3),
        t_near=cat["tn"],
        t_far=cat["tf"],
        color=cat["c"].astype(np.float64).reshape(-1, 3),
        semantic=cat["s"].astype(np.int64),
        instance=cat["i"].astype(np.int64),
        confidence=cat["l"].astype(np.float64),
    )


# ------------------------------------------------------------ grouping


@dataclass
class ClusterGroup:
    label: int
    rays: np.ndarray  # indices into the batch
    lam: np.ndarray

    def __len__(self):
        return int(self.rays.size)

    def target(self, n_classes: int) -> np.ndarray:
        onehot = np.zeros(n_classes)
        onehot[self.label] = 1.0
        return onehot


def cluster_same_label(batch: PatchBatch, max_groups: Optional[int] = None) -> list:
    """Group each patch's rays by pseudo-label, dropping groups below two rays.

    With ``max_groups`` only the largest groups of each patch are kept (ties go
    to the lower class index).
    """
    if batch.n_rays == 0:
        raise DomainError("empty patch batch")
    groups = []
    for k in range(batch.n_patches):
        sl = batch.patch_slice(k)
        labels = batch.semantic[sl]
        classes, counts = np.unique(labels, return_counts=True)
        order = np.lexsort((classes, -counts))
        kept = [c for c, n in zip(classes[order], counts[order]) if n >= 2]
        if max_groups is not None:
            kept = kept[:max_groups]
        for c in sorted(kept):
            idx = sl.start + np.flatnonzero(labels == c)
            groups.append(ClusterGroup(int(c), idx, batch.confidence[idx]))
    return groups


# ------------------------------------------------------------ instance assignment


@dataclass
class InstanceAssignment:
    frame_id: int
    mapping: np.ndarray  # global channel of each frame-local id
    cost: np.ndarray
    total: float = 0.0

    def targets(self, local_ids) -> np.ndarray:
        """Global channel per ray; stuff rays (NONE) map to channel 0."""
        local_ids = np.asarray(local_ids, dtype=np.int64)
        if np.any(local_ids >= self.mapping.size):
            bad = int(local_ids.max())
            raise ContractError(f"frame {self.frame_id}: instance id {bad} has no assigned channel")
        out = np.zeros(local_ids.shape, dtype=np.int64)
        thing = local_ids >= 0
        out[thing] = self.mapping[local_ids[thing]]
        return out


def assignment_cost(local_ids, inst_prob, n_ids=None) -> np.ndarray:
    """``cost[j, k-1]`` = mean over pixels of id ``j`` of ``-log V_k``, for channels k >= 1."""
    local_ids = np.asarray(local_ids).ravel()
    inst_prob = np.asarray(inst_prob, dtype=np.float64).reshape(local_ids.size, -1)
    if n_ids is None:
        n_ids = int(local_ids.max()) + 1 if np.any(local_ids >= 0) else 0
    nll = -np.log(np.maximum(inst_prob[:, 1:], 1e-300))
    cost = np.zeros((n_ids, nll.shape[1]))
    for j in range(n_ids):
        sel = local_ids == j
        if np.any(sel):
            cost[j] = nll[sel].mean(axis=0)
    return cost


def assign_instances(local_ids, inst_prob, frame_id: int = 0) -> InstanceAssignment:
    """Match frame-local instance ids to global channels 1..V-1 by minimum total NLL.

    ``local_ids`` holds frame-local ids (NONE on stuff) and ``inst_prob`` the
    rendered instance distribution at the same pixels, shape (..., V).
    """
    local_ids = np.asarray(getattr(local_ids, "instance", local_ids)).ravel()
    inst_prob = np.asarray(inst_prob, dtype=np.float64)
    n_ch = inst_prob.shape[-1]
    if not np.any(local_ids >= 0):
        raise DomainError(f"frame {frame_id} has no thing pixels to assign")
    n_ids = int(local_ids.max()) + 1
    if n_ids > n_ch - 1:
        raise CapacityError(f"frame {frame_id}: {n_ids} instances exceed {n_ch - 1} global channels")
    cost = assignment_cost(local_ids, inst_prob, n_ids)
    cols, total = hungarian(cost)
    return InstanceAssignment(frame_id, cols + 1, cost, total)


# ------------------------------------------------------------ feature extractor


def _conv_fwd(x, w, stride):
    """Valid convolution, channels last: x (n, H, W, C), w (k, k, C, D)."""
    k = w.shape[0]
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    # win: (n, Ho, Wo, C, k, k)
    return np.einsum("nhwcij,ijcd->nhwd", win, w, optimize=True)


def _conv_bwd_input(g, w, stride, in_shape):
    k = w.shape[0]
    gx = np.zeros(in_shape, dtype=g.dtype)
    ho, wo = g.shape[1], g.shape[2]
    for i in range(k):
        for j in range(k):
            contrib = g @ w[i, j].T  # (n, Ho, Wo, C)
            gx[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += contrib
    return gx


class FeatureExtractor:
    """Fixed patch feature map used by the perceptual term.

    Tags: ``random-conv`` (seeded strided convolutions with abs nonlinearity),
    ``identity`` (raw pixels, for debugging) and ``precomputed`` (observed-side
    features come from stored maps; the rendered side uses the seeded network).
    """

    TAGS = ("random-conv", "identity", "precomputed")

    def __init__(self, tag="random-conv", seed=0, channels=(16, 32, 32), kernel=4, stride=2, min_size=32):
        if tag not in self.TAGS:
            raise ValidationError(f"unknown extractor tag {tag!r}")
        self.tag = tag
        self.seed = seed
        self.kernel = kernel
        self.stride = stride
        self.min_size = min_size if tag != "identity" else 1
        rng = np.random.default_rng(seed)
        self.weights = []
        c_in = 3
        for c_out in channels:
            fan_in = kernel * kernel * c_in
            self.weights.append(rng.normal(0.0, 1.0 / math.sqrt(fan_in), (kernel, kernel, c_in, c_out)))
            c_in = c_out
        if self.min_size < self._smallest_valid():
            raise ValidationError("minimum patch size leaves no output for this extractor geometry")

    @property
    def out_channels(self) -> int:
        return 3 if self.tag == "identity" else self.weights[-1].shape[-1]

    def _smallest_valid(self):
        if self.tag == "identity":
            return 1
        size = 1
        for _ in self.weights:
            size = (size - 1) * self.stride + self.kernel
        return size

    def out_size(self, P: int) -> int:
        if self.tag == "identity":
            return P
        for _ in self.weights:
            P = (P - self.kernel) // self.stride + 1
        return P

    def _check(self, x):
        if x.ndim != 4 or x.shape[1] != x.shape[2]:
            raise DomainError("expected square patches shaped (n, P, P, 3)")
        if x.shape[1] < self.min_size:
            raise DomainError(f"patch side {x.shape[1]} below extractor minimum {self.min_size}")

    def features(self, x: np.ndarray) -> np.ndarray:
        """Plain forward pass on (n, P, P, 3) patches."""
        x = np.asarray(x, dtype=np.float64)
        self._check(x)
        if self.tag == "identity":
            return x
        for w in self.weights:
            x = np.abs(_conv_fwd(x, w.astype(x.dtype), self.stride))
        return x

    def apply(self, x: Var) -> Var:
        """Differentiable forward pass."""
        x = ad.const(x)
        self._check(x.value)
        if self.tag == "identity":
            return x
        acts = [x.value]
        pre = []
        h = x.value
        for w in self.weights:
            z = _conv_fwd(h, w.astype(h.dtype), self.stride)
            pre.append(z)
            h = np.abs(z)
            acts.append(h)
        out = new_var(h, x)
        if out.requires_grad:

            def back(g):
                for layer in range(len(self.weights) - 1, -1, -1):
                    g = g * np.sign(pre[layer])
                    w = self.weights[layer].astype(g.dtype)
                    g = _conv_bwd_input(g, w, self.stride, acts[layer].shape)
                x.accum(g)

            out.tape.record(out, back)
        return out

    def observed_features(self, patches: np.ndarray, stored=None, boxes=None) -> np.ndarray:
        """Features of observed patches; with stored maps, crop and average-pool them instead."""
        if self.tag != "precomputed" or stored is None:
            return self.features(patches)
        n = patches.shape[0]
        P = patches.shape[1]
        s = self.out_size(P)
        out = np.zeros((n, s, s, stored[0].shape[0]))
        for k in range(n):
            fmap, (x0, y0, fw, fh) = stored[k], boxes[k]
            c, hf, wf = fmap.shape
            for a in range(s):
                for b in range(s):
                    ya = int(np.floor((y0 + a * P / s) * hf / fh))
                    yb = max(ya + 1, int(np.ceil((y0 + (a + 1) * P / s) * hf / fh)))
                    xa = int(np.floor((x0 + b * P / s) * wf / fw))
                    xb = max(xa + 1, int(np.ceil((x0 + (b + 1) * P / s) * wf / fw)))
                    out[k, a, b] = fmap[:, ya:yb, xa:xb].mean(axis=(1, 2))
        if out.shape[-1] != self.out_channels:
            raise ValidationError("stored feature channels do not match the extractor")
        return out


# ------------------------------------------------------------ loss weights


@dataclass(frozen=True)
class LossWeights:
    distill: float = 1.2
    sem: float = 0.1
    ins: float = 0.1
    seg: float = 0.12
    feat: float = 0.2
    reg: float = 0.001
    eps: float = 1e-4

    def __post_init__(self):
        for k in ("distill", "sem", "ins", "seg", "feat", "reg", "eps"):
            v = getattr(self, k)
            if not (v >= 0 and math.isfinite(v)):
                raise ValidationError(f"loss weight {k} must be a finite non-negative number, got {v}")


# ------------------------------------------------------------ loss terms


def charbonnier_loss(pred, target, eps: float = 1e-4) -> Var:
    pred = ad.const(pred)
    target = np.asarray(target, dtype=pred.value.dtype)
    if pred.shape != target.shape:
        raise DomainError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.value - target
    root = np.sqrt(diff * diff + eps * eps)
    n = diff.size
    out = new_var(np.asarray(root.sum() / n), pred)
    if out.requires_grad:
        out.tape.record(out, lambda g: pred.accum(g * diff / root / n))
    return out


def weighted_xent(logits, targets, lam=None, denom=None) -> Var:
    """``-(1/denom) sum_p lam_p log softmax(z_p)[target_p]``; rows with lam 0 contribute nothing."""
    z = ad.const(logits)
    targets = np.asarray(targets, dtype=np.int64)
    n = z.value.shape[0]
    if n == 0:
        raise DomainError("cross-entropy over zero rays")
    lam = np.ones(n) if lam is None else np.asarray(lam, dtype=np.float64)
    denom = n if denom is None else denom
    zmax = z.value.max(axis=1, keepdims=True)
    ez = np.exp(z.value - zmax)
    se = ez.sum(axis=1, keepdims=True)
    logp = z.value[np.arange(n), targets] - zmax[:, 0] - np.log(se[:, 0])
    terms = np.where(lam > 0, lam * logp, 0.0)
    out = new_var(np.asarray(-terms.sum() / denom, dtype=z.value.dtype), z)
    if out.requires_grad:

        def back(g):
            grad = ez / se
            grad[np.arange(n), targets] -= 1.0
            z.accum((g * lam / denom)[:, None] * grad)

        out.tape.record(out, back)
    return out


def _log_probs(probs):
    with np.errstate(divide="ignore"):
        return np.log(np.asarray(probs, dtype=np.float64))


def semantic_loss(probs, targets, lam=None) -> float:
    """Confidence-weighted cross-entropy of rendered class distributions against pseudo-labels."""
    return float(weighted_xent(_log_probs(probs), targets, lam).value)


def instance_loss(probs, local_ids, assignment: InstanceAssignment, lam=None) -> float:
    """Cross-entropy toward assigned global channels; stuff rays target channel 0."""
    return float(weighted_xent(_log_probs(probs), assignment.targets(local_ids), lam).value)


def seg_consistency_term(logits, groups, n_classes=None) -> Var:
    """Cross-entropy of every grouped ray toward its group's label, averaged over grouped rays."""
    z = ad.const(logits)
    if not groups:
        return Var(np.asarray(0.0, dtype=z.value.dtype))
    rays = np.concatenate([g.rays for g in groups])
    labels = np.concatenate([np.full(len(g), g.label) for g in groups])
    lam = np.concatenate([g.lam for g in groups])
    return weighted_xent(ad.take_rows(z, rays), labels, lam)


def seg_consistency_loss(probs, groups) -> float:
    return float(seg_consistency_term(_log_probs(probs), groups).value)


def perceptual_loss(rendered, observed, extractor: FeatureExtractor, observed_features=None) -> Var:
    """Mean over patches of the feature-space distance; only the rendered side is differentiated."""
    r = ad.const(rendered)
    fr = extractor.apply(r)
    fo = extractor.features(observed) if observed_features is None else observed_features
    if fo.shape != fr.shape:
        raise DomainError("feature shapes differ between rendered and observed patches")
    diff = fr.value - fo.astype(fr.value.dtype)
    n = diff.shape[0]
    norms = np.sqrt(np.sum(diff.reshape(n, -1) ** 2, axis=1))
    out = new_var(np.asarray(norms.sum() / n), fr)
    if out.requires_grad:

        def back(g):
            scale = np.divide(g / n, norms, out=np.zeros_like(norms), where=norms > 0)
            fr.accum(diff * scale.reshape((n,) + (1,) * (diff.ndim - 1)))

        out.tape.record(out, back)
    return out


@_accel.njit
def _tv3_nb(grid, ggrid, scale):
    rx, ry, rz, nf = grid.shape
    total = 0.0
    for i in range(rx):
        for j in range(ry):
            for k in range(rz):
                for ax in range(3):
                    i2, j2, k2 = i, j, k
                    if ax == 0:
                        i2 += 1
                        if i2 >= rx:
                            continue
                    elif ax == 1:
                        j2 += 1
                        if j2 >= ry:
                            continue
                    else:
                        k2 += 1
                        if k2 >= rz:
                            continue
                    s = 0.0
                    for f in range(nf):
                        d = grid[i, j, k, f] - grid[i2, j2, k2, f]
                        s += d * d
                    nrm = math.sqrt(s)
                    total += nrm
                    if nrm > 0.0 and scale != 0.0:
                        c = scale / nrm
                        for f in range(nf):
                            d = (grid[i, j, k, f] - grid[i2, j2, k2, f]) * c
                            ggrid[i, j, k, f] += d
                            ggrid[i2, j2, k2, f] -= d
    return total


def _tv_np(grid, gscale):
    """Sum of pair norms over all spatial axes, plus the gradient scaled by ``gscale``."""
    total = 0.0
    grad = np.zeros_like(grid)
    for ax in range(grid.ndim - 1):
        n = grid.shape[ax]
        a = np.take(grid, np.arange(n - 1), axis=ax)
        b = np.take(grid, np.arange(1, n), axis=ax)
        d = a - b
        nrm = np.sqrt(np.sum(d * d, axis=-1, keepdims=True))
        total += float(nrm.sum())
        u = np.divide(d, nrm, out=np.zeros_like(d), where=nrm > 0) * gscale
        lo = [slice(None)] * grid.ndim
        hi = [slice(None)] * grid.ndim
        lo[ax] = slice(0, n - 1)
        hi[ax] = slice(1, n)
        grad[tuple(lo)] += u
        grad[tuple(hi)] -= u
    return total, grad


def _tv_pairs(shape):
    spatial = shape[:-1]
    n = 0
    for ax in range(len(spatial)):
        n += (spatial[ax] - 1) * int(np.prod([s for i, s in enumerate(spatial) if i != ax]))
    return n


def tv_loss(grids, use_numba=None) -> Var:
    """Mean feature-difference norm over all axis-adjacent node pairs of all given grids.

    ``grids`` is one array/Var or a list of them; the last axis holds features.
    """
    if isinstance(grids, (np.ndarray, Var)):
        grids = [grids]
    grids = [ad.const(g) for g in grids]
    if not grids or any(g.value.size == 0 for g in grids):
        raise DomainError("empty grid")
    use_numba = _accel.USE_NUMBA if use_numba is None else use_numba
    n_pairs = sum(_tv_pairs(g.shape) for g in grids)
    if n_pairs == 0:
        return Var(np.asarray(0.0, dtype=grids[0].value.dtype))
    scale = 1.0 / n_pairs
    total = 0.0
    grads = []
    need = any(g.requires_grad for g in grids)
    for g in grids:
        v = g.value
        if use_numba and v.ndim == 4:
            gg = np.zeros_like(v)
            total += _tv3_nb(v, gg, scale if need else 0.0)
        else:
            t, gg = _tv_np(v, scale)
            total += t
        grads.append(gg)
    out = new_var(np.asarray(total * scale, dtype=grids[0].value.dtype), *grids)
    if out.requires_grad:

        def back(gout):
            for g, gg in zip(grids, grads):
                g.accum(gg * gout)

        out.tape.record(out, back)
    return out


def disparity_loss(weights, t) -> Var:
    """``(1/R) sum_rays sum_i w_i / t_i`` for weights and distances shaped (R, N)."""
    w = ad.const(weights)
    t = np.asarray(t, dtype=np.float64)
    if np.any(t <= 0):
        raise DomainError("disparity needs positive sample distances")
    inv = (1.0 / t).astype(w.value.dtype)
    n = w.value.shape[0]
    out = new_var(np.asarray((w.value * inv).sum() / n), w)
    if out.requires_grad:
        out.tape.record(out, lambda g: w.accum(g * inv / n))
    return out


def mean_disparity(disp) -> Var:
    """Mean of per-ray accumulated disparity (the same quantity as ``disparity_loss``)."""
    return ad.mean(ad.const(disp))


def l1_mean(a, b) -> Var:
    a = ad.const(a)
    b = np.asarray(b, dtype=a.value.dtype)
    d = a.value - b
    n = d.size
    sgn = np.sign(d)
    out = new_var(np.asarray(np.abs(d).sum() / n), a)
    if out.requires_grad:
        out.tape.record(out, lambda g: a.accum(g * sgn / n))
    return out


def distill_loss(coarse_color, fine_color, coarse_sigma, fine_sigma, eps: float = 1e-4) -> Var:
    """Charbonnier color match plus mean absolute density gap, teacher side held fixed."""
    fc = fine_color.value if isinstance(fine_color, Var) else fine_color
    fs = fine_sigma.value if isinstance(fine_sigma, Var) else fine_sigma
    return ad.add(charbonnier_loss(coarse_color, fc, eps), l1_mean(coarse_sigma, fs))
