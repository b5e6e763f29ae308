"""Scene contraction, dense multi-resolution grids, frequency and SH encodings."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _accel
from .autodiff import Var, new_var
from .errors import DomainError

# ---------------------------------------------------------------- contraction


def contract(x) -> np.ndarray:
    """Identity inside the unit ball, ``(2 - 1/|x|) x/|x|`` outside.

    Works on a single 3-vector or on an (n, 3) array.
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise DomainError("contract: non-finite input")
    r = np.linalg.norm(x, axis=-1, keepdims=True)
    safe = np.maximum(r, 1.0)
    return np.where(r <= 1.0, x, (2.0 - 1.0 / safe) * x / safe)


# ---------------------------------------------------------------- grids


@dataclass
class GridPyramid:
    """Dense grids spanning ``[-bound, bound]^3``, one (R, R, R, F) array per level."""

    levels: list
    bound: float = 2.0

    def __post_init__(self):
        res = [lv.shape[0] for lv in self.levels]
        if any(b <= a for a, b in zip(res, res[1:])):
            raise ValueError(f"level resolutions must be strictly increasing, got {res}")
        for lv in self.levels:
            if lv.ndim != 4 or lv.shape[0] != lv.shape[1] or lv.shape[1] != lv.shape[2] or lv.shape[0] < 2:
                raise ValueError(f"grid level must be (R, R, R, F) with R >= 2, got {lv.shape}")

    @property
    def resolutions(self):
        return tuple(lv.shape[0] for lv in self.levels)

    @property
    def feature_dim(self) -> int:
        return self.levels[0].shape[3]

    @property
    def out_dim(self) -> int:
        return sum(lv.shape[3] for lv in self.levels)

    @classmethod
    def create(cls, resolutions, features, bound=2.0, rng=None, scale=1e-4, dtype=np.float64):
        rng = np.random.default_rng(0) if rng is None else rng
        levels = [rng.uniform(-scale, scale, size=(r, r, r, features)).astype(dtype) for r in resolutions]
        return cls(levels, bound)


@_accel.njit
def _cell(v, res, s, bound):
    g = (v + bound) * s
    if g < 0.0:
        g = 0.0
    elif g > res - 1:
        g = res - 1.0
    i = int(math.floor(g))
    if i > res - 2:
        i = res - 2
    return i, g - i


@_accel.njit
def _trilerp_fwd_nb(grid, xc, bound, out):
    res = grid.shape[0]
    nf = grid.shape[3]
    s = (res - 1) / (2.0 * bound)
    for p in range(xc.shape[0]):
        ix, fx = _cell(xc[p, 0], res, s, bound)
        iy, fy = _cell(xc[p, 1], res, s, bound)
        iz, fz = _cell(xc[p, 2], res, s, bound)
        for c in range(8):
            bx = c & 1
            by = (c >> 1) & 1
            bz = (c >> 2) & 1
            w = (fx if bx else 1.0 - fx) * (fy if by else 1.0 - fy) * (fz if bz else 1.0 - fz)
            for f in range(nf):
                out[p, f] += w * grid[ix + bx, iy + by, iz + bz, f]


@_accel.njit
def _trilerp_bwd_nb(res, xc, bound, gout, ggrid):
    nf = ggrid.shape[3]
    s = (res - 1) / (2.0 * bound)
    for p in range(xc.shape[0]):
        ix, fx = _cell(xc[p, 0], res, s, bound)
        iy, fy = _cell(xc[p, 1], res, s, bound)
        iz, fz = _cell(xc[p, 2], res, s, bound)
        for c in range(8):
            bx = c & 1
            by = (c >> 1) & 1
            bz = (c >> 2) & 1
            w = (fx if bx else 1.0 - fx) * (fy if by else 1.0 - fy) * (fz if bz else 1.0 - fz)
            for f in range(nf):
                ggrid[ix + bx, iy + by, iz + bz, f] += w * gout[p, f]


def _corners_np(res, xc, bound):
    s = (res - 1) / (2.0 * bound)
    g = np.clip((xc + bound) * s, 0.0, res - 1.0)
    i0 = np.minimum(np.floor(g).astype(np.int64), res - 2)
    fr = g - i0
    out = []
    for c in range(8):
        b = np.array([c & 1, (c >> 1) & 1, (c >> 2) & 1])
        w = np.prod(np.where(b, fr, 1.0 - fr), axis=1)
        idx = i0 + b
        out.append((idx[:, 0], idx[:, 1], idx[:, 2], w))
    return out


def _trilerp_fwd_np(grid, xc, bound):
    out = np.zeros((xc.shape[0], grid.shape[3]), dtype=grid.dtype)
    for ix, iy, iz, w in _corners_np(grid.shape[0], xc, bound):
        out += w[:, None].astype(grid.dtype) * grid[ix, iy, iz]
    return out


def _trilerp_bwd_np(shape, dtype, xc, bound, gout):
    ggrid = np.zeros(shape, dtype=dtype)
    for ix, iy, iz, w in _corners_np(shape[0], xc, bound):
        np.add.at(ggrid, (ix, iy, iz), w[:, None].astype(dtype) * gout)
    return ggrid


def trilerp(grid: np.ndarray, xc: np.ndarray, bound: float, use_numba=None) -> np.ndarray:
    """Trilinear lookup of one level at contracted points ``xc`` (n, 3) -> (n, F).

    Queries outside ``[-bound, bound]^3`` are clamped to the boundary.
    """
    use_numba = _accel.USE_NUMBA if use_numba is None else use_numba
    xc = np.ascontiguousarray(xc, dtype=np.float64)
    if use_numba:
        out = np.zeros((xc.shape[0], grid.shape[3]), dtype=grid.dtype)
        _trilerp_fwd_nb(np.ascontiguousarray(grid), xc, float(bound), out)
        return out
    return _trilerp_fwd_np(grid, xc, bound)


def trilerp_backward(shape, dtype, xc, bound, gout, use_numba=None) -> np.ndarray:
    """Adjoint of ``trilerp`` with respect to the node features."""
    use_numba = _accel.USE_NUMBA if use_numba is None else use_numba
    xc = np.ascontiguousarray(xc, dtype=np.float64)
    gout = np.ascontiguousarray(gout, dtype=dtype)
    if use_numba:
        ggrid = np.zeros(shape, dtype=dtype)
        _trilerp_bwd_nb(shape[0], xc, float(bound), gout, ggrid)
        return ggrid
    return _trilerp_bwd_np(shape, dtype, xc, bound, gout)


def trilerp_grad_points(grid: np.ndarray, xc: np.ndarray, bound: float, gout: np.ndarray) -> np.ndarray:
    """Adjoint of ``trilerp`` with respect to the query points (zero where clamped)."""
    res = grid.shape[0]
    s = (res - 1) / (2.0 * bound)
    graw = (xc + bound) * s
    inside = (graw >= 0) & (graw <= res - 1)
    gx = np.zeros_like(xc, dtype=np.float64)
    i0 = np.minimum(np.floor(np.clip(graw, 0, res - 1)).astype(np.int64), res - 2)
    fr = np.clip(graw, 0, res - 1) - i0
    for c in range(8):
        b = np.array([c & 1, (c >> 1) & 1, (c >> 2) & 1])
        vals = grid[i0[:, 0] + b[0], i0[:, 1] + b[1], i0[:, 2] + b[2]]
        proj = np.sum(vals * gout, axis=1)
        wa = np.where(b, fr, 1.0 - fr)
        da = np.where(b, 1.0, -1.0)
        for a in range(3):
            others = np.prod(np.delete(wa, a, axis=1), axis=1)
            gx[:, a] += da[a] * others * proj
    return gx * s * inside


def grid_lookup(grid: GridPyramid, xc) -> np.ndarray:
    """Features of every level at contracted point(s), concatenated coarse to fine."""
    xc = np.asarray(xc, dtype=np.float64)
    single = xc.ndim == 1
    pts = xc.reshape(-1, 3)
    out = np.concatenate([trilerp(lv, pts, grid.bound) for lv in grid.levels], axis=1)
    return out[0] if single else out


def grid_features(levels, xc: np.ndarray, bound: float) -> Var:
    """Differentiable multi-level lookup; ``levels`` are tape Vars of (R, R, R, F)."""
    feats = [trilerp(lv.value, xc, bound) for lv in levels]
    out = new_var(np.concatenate(feats, axis=1), *levels)
    if out.requires_grad:
        widths = np.cumsum([lv.value.shape[3] for lv in levels])[:-1]

        def back(g):
            for lv, piece in zip(levels, np.split(g, widths, axis=1)):
                if lv.requires_grad:
                    lv.accum(trilerp_backward(lv.value.shape, lv.value.dtype, xc, bound, piece))

        out.tape.record(out, back)
    return out


# ---------------------------------------------------------------- frequency / SH


@_accel.njit
def _pe_nb(pts, n_freq, out):
    for p in range(pts.shape[0]):
        for d in range(3):
            a = math.pi * pts[p, d]
            sv, cv = math.sin(a), math.cos(a)
            for k in range(n_freq):
                out[p, 6 * k + d] = sv
                out[p, 6 * k + 3 + d] = cv
                sv, cv = 2.0 * sv * cv, (cv - sv) * (cv + sv)


def _pe_np(pts, n_freq, out):
    s, c = np.sin(np.pi * pts), np.cos(np.pi * pts)
    for k in range(n_freq):
        out[:, 6 * k : 6 * k + 3], out[:, 6 * k + 3 : 6 * k + 6] = s, c
        s, c = 2.0 * s * c, (c - s) * (c + s)


def positional_encoding(x, n_freq: int) -> np.ndarray:
    """Per frequency ``k``: sin(2^k pi x) for the 3 coords, then cos(2^k pi x).

    Higher octaves come from double-angle steps on the base pair.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    pts = np.ascontiguousarray(x.reshape(-1, 3))
    if n_freq < 0:
        raise DomainError("n_freq must be >= 0")
    out = np.empty((pts.shape[0], 6 * n_freq), dtype=np.float64)
    if n_freq:
        (_pe_nb if _accel.USE_NUMBA else _pe_np)(pts, n_freq, out)
    return out[0] if single else out


_C0 = 0.28209479177387814
_C1 = 0.4886025119029199
_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005, -1.0925484305920792, 0.5462742152960396)
_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)
_C4 = (
    2.5033429417967046,
    -1.7701307697799304,
    0.9461746957575601,
    -0.6690465435572892,
    0.10578554691520431,
    -0.6690465435572892,
    0.47308734787878004,
    -1.7701307697799304,
    0.6258357354491761,
)


def sh_encoding(d, degree: int, debug: bool = False) -> np.ndarray:
    """Real spherical harmonics of degrees ``0..degree`` at unit direction(s) ``d``."""
    if not 0 <= degree <= 4:
        raise DomainError("SH degree must be in 0..4")
    d = np.asarray(d, dtype=np.float64)
    single = d.ndim == 1
    v = d.reshape(-1, 3)
    norm = np.linalg.norm(v, axis=1, keepdims=True)
    if debug and np.any(np.abs(norm - 1) > 1e-6):
        raise DomainError("sh_encoding: direction is not unit length")
    v = v / norm
    x, y, z = v[:, 0], v[:, 1], v[:, 2]
    out = [np.full_like(x, _C0)]
    if degree >= 1:
        out += [-_C1 * y, _C1 * z, -_C1 * x]
    if degree >= 2:
        xx, yy, zz, xy, yz, xz = x * x, y * y, z * z, x * y, y * z, x * z
        out += [
            _C2[0] * xy,
            _C2[1] * yz,
            _C2[2] * (2 * zz - xx - yy),
            _C2[3] * xz,
            _C2[4] * (xx - yy),
        ]
    if degree >= 3:
        out += [
            _C3[0] * y * (3 * xx - yy),
            _C3[1] * xy * z,
            _C3[2] * y * (4 * zz - xx - yy),
            _C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
            _C3[4] * x * (4 * zz - xx - yy),
            _C3[5] * z * (xx - yy),
            _C3[6] * x * (xx - 3 * yy),
        ]
    if degree >= 4:
        out += [
            _C4[0] * xy * (xx - yy),
            _C4[1] * yz * (3 * xx - yy),
            _C4[2] * xy * (7 * zz - 1),
            _C4[3] * yz * (7 * zz - 3),
            _C4[4] * (zz * (35 * zz - 30) + 3),
            _C4[5] * xz * (7 * zz - 3),
            _C4[6] * (xx - yy) * (7 * zz - 1),
            _C4[7] * xz * (xx - 3 * yy),
            _C4[8] * (xx * (xx - 3 * yy) - yy * (3 * xx - yy)),
        ]
    res = np.stack(out, axis=1)
    return res[0] if single else res


@dataclass(frozen=True)
class EncodingConfig:
    geo_resolutions: tuple = (16, 32, 64, 128)
    geo_features: int = 2
    bound: float = 2.0
    sem_resolution: int = 16
    sem_features: int = 1
    geo_freqs: int = 2
    sem_freqs: int = 4
    sh_degree: int = 2

    def __post_init__(self):
        if self.geo_freqs < 0 or self.sem_freqs < 0:
            raise ValueError("n_freq must be >= 0")
        if not 0 <= self.sh_degree <= 4:
            raise ValueError("SH degree must be in 0..4")
