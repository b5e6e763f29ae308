"""Analytic test scenes: piecewise-constant density primitives rendered in closed form.

Scenes are built from axis-aligned boxes and spheres with constant density,
color and labels.  Along a ray the density is piecewise constant between
primitive entry/exit points, so transmittance, color and per-primitive opacity
shares integrate exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset_io import NONE, CameraModel, ClassTaxonomy, Frame, SceneDataset, image_rays, save_dataset
from .errors import DomainError, ValidationError

OPAQUE = 1e4


@dataclass(frozen=True)
class Primitive:
    shape: str  # "box" or "sphere"
    center: tuple
    size: tuple  # box half-extents, or (radius,)
    sigma: float
    color: tuple
    semantic: int
    instance: int = 0  # scene-global id >= 1 for things, 0 for stuff

    def __post_init__(self):
        if self.shape not in ("box", "sphere"):
            raise ValidationError(f"unknown primitive shape {self.shape!r}")
        if not self.sigma > 0:
            raise ValidationError("primitive density must be positive")
        if self.shape == "sphere" and len(self.size) != 1:
            raise ValidationError("sphere size is (radius,)")
        if self.shape == "box" and len(self.size) != 3:
            raise ValidationError("box size is three half-extents")

    def extent(self) -> float:
        """Distance from the origin to the farthest point of the primitive."""
        c = np.asarray(self.center, dtype=np.float64)
        if self.shape == "sphere":
            return float(np.linalg.norm(c) + self.size[0])
        return float(np.linalg.norm(np.abs(c) + np.asarray(self.size)))

    def intervals(self, o, d):
        """Entry/exit distances (R,) along rays; rays that miss get ``t0 >= t1``."""
        c = np.asarray(self.center, dtype=np.float64)
        if self.shape == "sphere":
            oc = o - c
            b = np.sum(oc * d, axis=1)
            disc = b * b - (np.sum(oc * oc, axis=1) - self.size[0] ** 2)
            root = np.sqrt(np.maximum(disc, 0.0))
            t0, t1 = -b - root, -b + root
            miss = disc <= 0  # tangent rays count as misses
            return np.where(miss, np.inf, t0), np.where(miss, -np.inf, t1)
        h = np.asarray(self.size, dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            ta = (c - h - o) * inv
            tb = (c + h - o) * inv
        lo = np.minimum(ta, tb)
        hi = np.maximum(ta, tb)
        # axis-parallel rays: inside the slab -> unbounded, outside -> empty
        par = d == 0
        inside = (np.abs(o - c) <= h)
        lo = np.where(par, np.where(inside, -np.inf, np.inf), lo)
        hi = np.where(par, np.where(inside, np.inf, -np.inf), hi)
        return lo.max(axis=1), hi.min(axis=1)

    def contains(self, pts):
        c = np.asarray(self.center, dtype=np.float64)
        if self.shape == "sphere":
            return np.sum((pts - c) ** 2, axis=1) < self.size[0] ** 2
        return np.all(np.abs(pts - c) <= np.asarray(self.size), axis=1)


@dataclass
class SynthScene:
    name: str
    primitives: list
    taxonomy: ClassTaxonomy
    background: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        things = self.taxonomy.thing_array
        seen = set()
        for p in self.primitives:
            if not 0 < p.semantic < self.taxonomy.n_classes:
                raise ValidationError(f"primitive class {p.semantic} outside taxonomy")
            if things[p.semantic]:
                if p.instance < 1 or p.instance in seen:
                    raise ValidationError("thing primitives need unique instance ids >= 1")
                if p.instance > self.taxonomy.n_instances - 1:
                    raise ValidationError("instance id exceeds the global channel count")
                seen.add(p.instance)
            elif p.instance != 0:
                raise ValidationError("stuff primitives carry instance id 0")
            if p.extent() > 1.0:
                raise ValidationError(f"primitive extends beyond the unit ball ({p.extent():.3f})")

    @property
    def n_things(self) -> int:
        return sum(1 for p in self.primitives if p.instance > 0)


def _box(center, half, sigma, color, sem, inst=0):
    return Primitive("box", tuple(center), tuple(half), sigma, tuple(color), sem, inst)


def _sphere(center, r, sigma, color, sem, inst=0):
    return Primitive("sphere", tuple(center), (r,), sigma, tuple(color), sem, inst)


def three_boxes() -> SynthScene:
    tax = ClassTaxonomy(5, (False, False, False, True, True), 5, ("void", "ground", "mat", "crate", "pillar"))
    prims = [
        _box((0.0, 0.0, -0.35), (0.6, 0.6, 0.05), OPAQUE, (0.55, 0.5, 0.4), 1),
        _box((-0.25, 0.25, -0.29), (0.2, 0.15, 0.01), OPAQUE, (0.2, 0.35, 0.8), 2),
        _box((0.28, 0.22, -0.17), (0.13, 0.13, 0.13), OPAQUE, (0.85, 0.3, 0.2), 3, 1),
        _box((0.2, -0.3, -0.2), (0.1, 0.12, 0.1), OPAQUE, (0.9, 0.75, 0.2), 3, 2),
        _box((-0.3, -0.22, -0.02), (0.08, 0.08, 0.28), OPAQUE, (0.3, 0.8, 0.45), 4, 3),
    ]
    return SynthScene("three-boxes", prims, tax)


def orchard() -> SynthScene:
    tax = ClassTaxonomy(3, (False, True, True), 8, ("void", "tree", "bush"))
    prims = []
    for k in range(6):
        a = 2 * math.pi * k / 6
        if k % 2 == 0:
            prims.append(_sphere((0.55 * math.cos(a), 0.55 * math.sin(a), 0.05), 0.2, OPAQUE,
                                 (0.15, 0.55 + 0.06 * k, 0.2), 1, k + 1))
        else:
            prims.append(_sphere((0.5 * math.cos(a), 0.5 * math.sin(a), -0.15), 0.14, OPAQUE,
                                 (0.6, 0.3 + 0.05 * k, 0.55), 2, k + 1))
    return SynthScene("orchard", prims, tax)


def fog_road() -> SynthScene:
    tax = ClassTaxonomy(3, (False, False, False), 2, ("void", "road", "fog"))
    prims = [
        _box((0.0, 0.0, -0.4), (0.65, 0.3, 0.04), OPAQUE, (0.35, 0.35, 0.38), 1),
        _box((0.0, 0.0, -0.1), (0.55, 0.55, 0.2), 0.8, (0.85, 0.85, 0.9), 2),
    ]
    return SynthScene("fog-road", prims, tax)


SCENES = {"three-boxes": three_boxes, "orchard": orchard, "fog-road": fog_road}


def get_scene(name: str) -> SynthScene:
    try:
        return SCENES[name]()
    except KeyError:
        raise DomainError(f"unknown scene {name!r}; choose from {sorted(SCENES)}") from None


# ------------------------------------------------------------ closed-form rendering


@dataclass
class OracleImage:
    color: np.ndarray  # (H, W, 3)
    opacity: np.ndarray
    depth: np.ndarray
    sem_label: np.ndarray  # class, 0 where background dominates
    inst_label: np.ndarray  # scene-global thing id (>= 1), NONE elsewhere
    shares: np.ndarray  # (H, W, n_prim) opacity share per primitive


def analytic_rays(scene: SynthScene, o, d, t_near, t_far):
    """Exact composite along each ray: (color, opacity, depth, shares)."""
    n_ray = o.shape[0]
    t_near = np.broadcast_to(np.asarray(t_near, dtype=np.float64), (n_ray,))
    t_far = np.broadcast_to(np.asarray(t_far, dtype=np.float64), (n_ray,))
    k = len(scene.primitives)
    if k == 0:
        bg = np.broadcast_to(np.asarray(scene.background, dtype=np.float64), (n_ray, 3)).copy()
        return bg, np.zeros(n_ray), np.zeros(n_ray), np.zeros((n_ray, 0))
    t0 = np.empty((n_ray, k))
    t1 = np.empty((n_ray, k))
    for j, p in enumerate(scene.primitives):
        a, b = p.intervals(o, d)
        t0[:, j] = np.clip(a, t_near, t_far)
        t1[:, j] = np.clip(b, t_near, t_far)
    t1 = np.maximum(t0, t1)
    cuts = np.sort(np.concatenate([t0, t1, t_near[:, None], t_far[:, None]], axis=1), axis=1)
    lo, hi = cuts[:, :-1], cuts[:, 1:]
    length = hi - lo
    mid = 0.5 * (lo + hi)
    sig = np.array([p.sigma for p in scene.primitives])
    col = np.array([p.color for p in scene.primitives], dtype=np.float64)
    inside = (t0[:, None, :] <= mid[:, :, None]) & (mid[:, :, None] < t1[:, None, :]) & (length[:, :, None] > 0)
    seg_sigma_k = inside * sig  # (R, S, K)
    seg_sigma = seg_sigma_k.sum(axis=2)
    tau = seg_sigma * length
    trans_before = np.exp(-(np.cumsum(tau, axis=1) - tau))
    w = trans_before * -np.expm1(-tau)  # (R, S)
    frac = np.divide(seg_sigma_k, seg_sigma[:, :, None], out=np.zeros_like(seg_sigma_k),
                     where=seg_sigma[:, :, None] > 0)
    shares = np.einsum("rs,rsk->rk", w, frac)
    resid = np.exp(-tau.sum(axis=1))
    color = shares @ col + resid[:, None] * np.asarray(scene.background)
    depth = np.sum(w * mid, axis=1)
    return color, 1.0 - resid, depth, shares


def analytic_render(scene: SynthScene, camera: CameraModel) -> OracleImage:
    o, d = image_rays(camera)
    color, opacity, depth, shares = analytic_rays(scene, o, d, camera.t_near, camera.t_far)
    h, w = camera.height, camera.width
    sem = np.zeros(o.shape[0], dtype=np.int64)
    inst = np.full(o.shape[0], NONE, dtype=np.int64)
    if shares.shape[1]:
        best = np.argmax(shares, axis=1)
        fg = shares[np.arange(len(best)), best] > 1.0 - opacity
        cls = np.array([p.semantic for p in scene.primitives])
        ids = np.array([p.instance for p in scene.primitives])
        things = scene.taxonomy.thing_array
        sem = np.where(fg, cls[best], 0)
        inst = np.where(fg & things[cls[best]], ids[best], NONE)
    return OracleImage(
        color.reshape(h, w, 3),
        opacity.reshape(h, w),
        depth.reshape(h, w),
        sem.reshape(h, w),
        inst.reshape(h, w),
        shares.reshape(h, w, -1),
    )


class SceneField:
    """The oracle scene exposed through the renderer's model interface."""

    def __init__(self, scene: SynthScene, logit_scale: float = 10.0):
        self.scene = scene
        self.thing_mask = scene.taxonomy.thing_mask
        self.logit_scale = logit_scale

    def _density(self, pts):
        dens = np.zeros((pts.shape[0], len(self.scene.primitives)))
        for j, p in enumerate(self.scene.primitives):
            dens[:, j] = np.where(p.contains(pts), p.sigma, 0.0)
        return dens

    def density_color(self, pts, dirs):
        dens = self._density(pts)
        sigma = dens.sum(axis=1)
        col = np.array([p.color for p in self.scene.primitives], dtype=np.float64).reshape(-1, 3)
        color = np.divide(dens @ col, sigma[:, None], out=np.zeros((pts.shape[0], 3)), where=sigma[:, None] > 0)
        return sigma, color

    def logits(self, pts):
        tax = self.scene.taxonomy
        dens = self._density(pts)
        best = np.argmax(dens, axis=1) if dens.shape[1] else np.zeros(pts.shape[0], dtype=np.int64)
        hit = dens.max(axis=1) > 0 if dens.shape[1] else np.zeros(pts.shape[0], dtype=bool)
        cls = np.array([p.semantic for p in self.scene.primitives] or [0])
        ids = np.array([p.instance for p in self.scene.primitives] or [0])
        sem = np.zeros((pts.shape[0], tax.n_classes))
        inst = np.zeros((pts.shape[0], tax.n_instances))
        rows = np.arange(pts.shape[0])
        sem[rows, np.where(hit, cls[best], 0)] = self.logit_scale
        inst[rows, np.where(hit, ids[best], 0)] = self.logit_scale
        return sem, inst


# ------------------------------------------------------------ cameras


def look_at(position, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world pose with +z forward, +x right and +y down in image space."""
    pos = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - pos
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    pose = np.eye(4)
    pose[:3, 0], pose[:3, 1], pose[:3, 2], pose[:3, 3] = right, down, fwd, pos
    return pose


def orbit_camera(azimuth, elevation, radius=2.6, width=128, height=128, fov_deg=48.0) -> CameraModel:
    pos = radius * np.array([math.cos(elevation) * math.cos(azimuth),
                             math.cos(elevation) * math.sin(azimuth),
                             math.sin(elevation)])
    f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
    return CameraModel(f, f, width / 2, height / 2, width, height, look_at(pos), radius - 1.0, radius + 1.0)


def orbit_cameras(n_views, width, height, radius=2.6, elevation_deg=30.0, wobble_deg=8.0):
    """Cameras at evenly spaced azimuths with elevation wobbling around ``elevation_deg``."""
    cams = []
    for k in range(n_views):
        az = 2 * math.pi * k / n_views
        el = math.radians(elevation_deg + wobble_deg * math.sin(3 * az))
        cams.append(orbit_camera(az, el, radius, width, height))
    return cams


# ------------------------------------------------------------ label noise


@dataclass(frozen=True)
class NoiseSpec:
    p_flip: float = 0.0
    block: int = 16
    permute_instances: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p_flip <= 1.0:
            raise ValidationError("p_flip must lie in [0, 1]")
        if self.block < 1:
            raise ValidationError("block size must be >= 1")


def dense_local_ids(global_ids) -> np.ndarray:
    """Rank-compress scene-global ids of one frame to 0..k-1 (NONE kept)."""
    global_ids = np.asarray(global_ids)
    out = np.full(global_ids.shape, NONE, dtype=np.int64)
    present = np.unique(global_ids[global_ids >= 0])
    for rank, g in enumerate(present):
        out[global_ids == g] = rank
    return out


def flip_blocks(sem, n_classes, p_flip, block, rng):
    """Each block flips with probability ``p_flip`` to one class other than its majority."""
    sem = np.array(sem, dtype=np.int64, copy=True)
    h, w = sem.shape
    flipped = []
    for y0 in range(0, h, block):
        for x0 in range(0, w, block):
            u = rng.random()
            if u >= p_flip:
                continue
            blk = sem[y0 : y0 + block, x0 : x0 + block]
            major = int(np.argmax(np.bincount(blk.ravel(), minlength=n_classes)))
            choice = int(rng.integers(0, n_classes - 1))
            new = choice + (choice >= major)
            blk[...] = new
            flipped.append((y0, x0))
    return sem, flipped


def inject_label_noise(sem, inst, taxonomy: ClassTaxonomy, noise: NoiseSpec, frame_index: int = 0):
    """Noisy (semantic, frame-local instance) maps; deterministic given the seed and frame index.

    Pixels turned into a thing class by a flip share one extra frame-local id;
    pixels flipped away from thing classes lose theirs.
    """
    rng = np.random.default_rng([noise.seed, frame_index])
    things = taxonomy.thing_array
    inst = np.asarray(inst, dtype=np.int64)
    if noise.p_flip > 0:
        new_sem, _ = flip_blocks(sem, taxonomy.n_classes, noise.p_flip, noise.block, rng)
    else:
        new_sem = np.array(sem, dtype=np.int64, copy=True)
    new_inst = np.where(things[new_sem], inst, NONE)
    stray = things[new_sem] & (new_inst < 0)
    if np.any(stray):
        new_inst = np.where(stray, new_inst.max(initial=-1) + 1, new_inst)
    new_inst = dense_local_ids(new_inst)
    if noise.permute_instances:
        n = int(new_inst.max(initial=-1)) + 1
        perm = rng.permutation(n)
        new_inst = np.where(new_inst >= 0, perm[np.maximum(new_inst, 0)], NONE)
    return new_sem, new_inst


# ------------------------------------------------------------ datasets


def make_dataset(scene: SynthScene, n_views: int, resolution=(128, 128), noise: NoiseSpec = NoiseSpec(),
                 directory=None, cameras=None) -> SceneDataset:
    """Render ground truth for orbit views, derive pseudo-labels, optionally write to disk."""
    if n_views < 2:
        raise DomainError("need at least two views")
    width, height = resolution
    cams = cameras if cameras is not None else orbit_cameras(n_views, width, height)
    frames = []
    for k, cam in enumerate(cams):
        gt = analytic_render(scene, cam)
        gt_inst = np.where(gt.inst_label >= 1, gt.inst_label - 1, NONE)
        local = dense_local_ids(gt_inst)
        sem, inst = inject_label_noise(gt.sem_label, local, scene.taxonomy, noise, k)
        frames.append(Frame(cam, gt.color.astype(np.float32), sem, inst, gt_semantic=gt.sem_label.astype(np.int64),
                            gt_instance=gt_inst.astype(np.int64)))
    meta = {
        "scene": scene.name,
        "flip": repr(noise.p_flip),
        "block": str(noise.block),
        "permute": "1" if noise.permute_instances else "0",
        "noise_seed": str(noise.seed),
    }
    ds = SceneDataset(frames, scene.taxonomy, meta)
    ds.validate()
    if directory is not None:
        save_dataset(ds, Path(directory))
    return ds
