"""The panoptic radiance field ``(x, d) -> (sigma, c, u, v)``.

Geometry: contract -> geometric pyramid (+ frequency encoding) -> geometry
decoder -> density and a geometry feature; the appearance decoder maps that
feature plus SH(d) to color.  Understanding: contract -> single-level
understanding grid (+ frequency encoding) -> semantic and instance decoders.
The understanding path never sees the view direction.

A coarse cascade reuses the first ``coarse_levels`` pyramid levels with its
own geometry/appearance decoders and serves as the distillation student.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .encoding import EncodingConfig, contract, grid_features, positional_encoding, sh_encoding
from .errors import NumericFault, ValidationError

CASCADES = ("coarse", "fine")


@dataclass(frozen=True)
class DecoderSpec:
    """``depth`` linear layers; all but the last are followed by the activation."""

    in_dim: int
    width: int
    depth: int
    out_dim: int
    activation: str = "relu"

    def __post_init__(self):
        if self.width < 1 or self.depth < 1:
            raise ValidationError("decoder width and depth must be >= 1")
        if self.activation != "relu":
            raise ValidationError(f"unsupported activation {self.activation!r}")

    def layer_dims(self):
        dims = [self.in_dim] + [self.width] * (self.depth - 1) + [self.out_dim]
        return list(zip(dims[:-1], dims[1:]))


@dataclass(frozen=True)
class FieldConfig:
    n_classes: int = 5
    n_instances: int = 4
    encoding: EncodingConfig = field(default_factory=EncodingConfig)
    geo_width: int = 64
    geo_depth: int = 2
    geo_feature_dim: int = 15
    app_width: int = 64
    app_depth: int = 2
    sem_width: int = 256
    sem_depth: int = 2
    coarse_levels: int = 2
    density_bias: float = -1.0
    grid_init: float = 1e-4

    def geo_in(self, cascade="fine") -> int:
        enc = self.encoding
        n_lv = self.n_levels(cascade)
        return n_lv * enc.geo_features + 6 * enc.geo_freqs

    def n_levels(self, cascade="fine") -> int:
        n = len(self.encoding.geo_resolutions)
        return min(self.coarse_levels, n) if cascade == "coarse" else n

    def decoders(self) -> dict:
        enc = self.encoding
        sh_dim = (enc.sh_degree + 1) ** 2
        sem_in = enc.sem_features + 6 * enc.sem_freqs
        specs = {
            "geo": DecoderSpec(self.geo_in("fine"), self.geo_width, self.geo_depth, 1 + self.geo_feature_dim),
            "app": DecoderSpec(self.geo_feature_dim + sh_dim, self.app_width, self.app_depth, 3),
            "sem": DecoderSpec(sem_in, self.sem_width, self.sem_depth, self.n_classes),
            "inst": DecoderSpec(sem_in, self.sem_width, self.sem_depth, self.n_instances),
        }
        if self.coarse_levels > 0:
            specs["coarse_geo"] = replace(specs["geo"], in_dim=self.geo_in("coarse"))
            specs["coarse_app"] = specs["app"]
        return specs


class ParamStore:
    """Named parameter arrays with matching gradient accumulators."""

    def __init__(self, arrays=None):
        self.arrays = OrderedDict(arrays or {})
        self.grads = OrderedDict((k, np.zeros_like(v)) for k, v in self.arrays.items())

    def __getitem__(self, name):
        return self.arrays[name]

    def __setitem__(self, name, value):
        self.arrays[name] = value
        self.grads[name] = np.zeros_like(value)

    def __contains__(self, name):
        return name in self.arrays

    def names(self):
        return list(self.arrays)

    def shapes(self):
        return {k: v.shape for k, v in self.arrays.items()}

    def copy(self) -> "ParamStore":
        return ParamStore((k, v.copy()) for k, v in self.arrays.items())

    def astype(self, dtype) -> "ParamStore":
        return ParamStore((k, v.astype(dtype)) for k, v in self.arrays.items())

    def zero_grad(self):
        for g in self.grads.values():
            g[...] = 0

    def check_finite(self):
        for k, v in self.arrays.items():
            if not np.all(np.isfinite(v)):
                raise NumericFault(f"parameter {k} is not finite")

    def as_vars(self, tape=None, frozen=()):
        """Wrap arrays as tape parameters (or constants when ``tape`` is None)."""
        out = {}
        for k, v in self.arrays.items():
            if tape is None or any(k.startswith(f) for f in frozen):
                out[k] = Var(v, name=k)
            else:
                out[k] = tape.param(v, k)
        return out

    def collect(self, pvars):
        """Copy gradients accumulated on tape Vars into ``self.grads``."""
        for k, var in pvars.items():
            if var.grad is not None:
                self.grads[k] += var.grad

    def __eq__(self, other):
        return (
            isinstance(other, ParamStore)
            and list(self.arrays) == list(other.arrays)
            and all(np.array_equal(self.arrays[k], other.arrays[k]) for k in self.arrays)
        )

    __hash__ = None


def _glorot(rng, fan_in, fan_out, dtype):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out)).astype(dtype)


def init_params(cfg: FieldConfig, seed: int = 0, dtype=np.float32) -> ParamStore:
    rng = np.random.default_rng(seed)
    enc = cfg.encoding
    ps = ParamStore()
    for i, r in enumerate(enc.geo_resolutions):
        ps[f"geo_grid.l{i}"] = rng.uniform(-cfg.grid_init, cfg.grid_init, (r, r, r, enc.geo_features)).astype(dtype)
    r = enc.sem_resolution
    ps["sem_grid"] = rng.uniform(-cfg.grid_init, cfg.grid_init, (r, r, r, enc.sem_features)).astype(dtype)
    for name, spec in cfg.decoders().items():
        for i, (a, b) in enumerate(spec.layer_dims()):
            ps[f"{name}.W{i}"] = _glorot(rng, a, b, dtype)
            bias = np.zeros(b, dtype=dtype)
            if name in ("geo", "coarse_geo") and i == spec.depth - 1:
                bias[0] = cfg.density_bias
            ps[f"{name}.b{i}"] = bias
    return ps


def zero_decoders(params: ParamStore) -> ParamStore:
    """Copy of ``params`` with every decoder weight and bias set to zero."""
    out = params.copy()
    for k in out.names():
        if "grid" not in k:
            out.arrays[k][...] = 0
    return out


# ------------------------------------------------------------ forward


def _mlp(P, name: str, depth: int, x: Var) -> Var:
    h = x
    for i in range(depth):
        h = ad.linear(h, P[f"{name}.W{i}"], P[f"{name}.b{i}"])
        if not np.all(np.isfinite(h.value)):
            raise NumericFault(f"non-finite output in layer {name}.{i}")
        if i < depth - 1:
            h = ad.relu(h)
    return h


class NeuralField:
    """Differentiable evaluation of the field over a parameter dict of Vars."""

    def __init__(self, cfg: FieldConfig):
        self.cfg = cfg

    def encode_points(self, xs):
        xc = contract(xs)
        enc = self.cfg.encoding
        return xc, positional_encoding(xc, enc.geo_freqs), positional_encoding(xc, enc.sem_freqs)

    def geometry(self, P, xc, pe_geo, cascade="fine"):
        cfg = self.cfg
        n_lv = cfg.n_levels(cascade)
        prefix = "coarse_geo" if cascade == "coarse" else "geo"
        levels = [P[f"geo_grid.l{i}"] for i in range(n_lv)]
        feat = grid_features(levels, xc, cfg.encoding.bound)
        dtype = feat.value.dtype
        x = ad.concat([feat, Var(pe_geo.astype(dtype))]) if pe_geo.shape[1] else feat
        out = _mlp(P, prefix, cfg.geo_depth, x)
        sigma = ad.reshape(ad.softplus(ad.cols(out, 0, 1)), (-1,))
        return sigma, ad.cols(out, 1, 1 + cfg.geo_feature_dim)

    def appearance(self, P, geo_feat: Var, sh: np.ndarray, cascade="fine"):
        prefix = "coarse_app" if cascade == "coarse" else "app"
        x = ad.concat([geo_feat, Var(sh.astype(geo_feat.value.dtype))])
        return ad.sigmoid(_mlp(P, prefix, self.cfg.app_depth, x))

    def understanding(self, P, xc, pe_sem):
        cfg = self.cfg
        feat = grid_features([P["sem_grid"]], xc, cfg.encoding.bound)
        dtype = feat.value.dtype
        x = ad.concat([feat, Var(pe_sem.astype(dtype))]) if pe_sem.shape[1] else feat
        sem = _mlp(P, "sem", cfg.sem_depth, x)
        inst = _mlp(P, "inst", cfg.sem_depth, x)
        return sem, inst

    def forward(self, P, xs, ds, cascade="fine"):
        """All four outputs at points ``xs`` (n, 3) viewed along ``ds`` (n, 3)."""
        xc, pe_geo, pe_sem = self.encode_points(xs)
        sh = sh_encoding(ds, self.cfg.encoding.sh_degree)
        sigma, gf = self.geometry(P, xc, pe_geo, cascade)
        color = self.appearance(P, gf, sh, cascade)
        sem, inst = self.understanding(P, xc, pe_sem)
        return sigma, color, sem, inst


@dataclass
class FieldSample:
    sigma: np.ndarray
    color: np.ndarray
    sem: np.ndarray
    inst: np.ndarray
    teacher: bool = False

    def __len__(self):
        return int(np.size(self.sigma))

    def __getitem__(self, i):
        return FieldSample(self.sigma[i], self.color[i], self.sem[i], self.inst[i], self.teacher)


def _check_cascade(cascade):
    if cascade not in CASCADES:
        raise ValidationError(f"cascade must be one of {CASCADES}, got {cascade!r}")


def field_eval_batch(params: ParamStore, cfg: FieldConfig, xs, ds, cascade="fine") -> FieldSample:
    _check_cascade(cascade)
    xs = np.asarray(xs, dtype=np.float64).reshape(-1, 3)
    ds = np.asarray(ds, dtype=np.float64).reshape(-1, 3)
    sigma, color, sem, inst = NeuralField(cfg).forward(params.as_vars(), xs, ds, cascade)
    return FieldSample(sigma.value, color.value, sem.value, inst.value)


def field_eval(params: ParamStore, cfg: FieldConfig, x, d, cascade="fine") -> FieldSample:
    out = field_eval_batch(params, cfg, np.asarray(x)[None], np.asarray(d)[None], cascade)
    return FieldSample(float(out.sigma[0]), out.color[0], out.sem[0], out.inst[0])


def cascade_pair_eval(params: ParamStore, cfg: FieldConfig, xs, ds):
    """Coarse (student) and fine (teacher, flagged non-differentiable) samples."""
    coarse = field_eval_batch(params, cfg, xs, ds, "coarse")
    fine = field_eval_batch(params, cfg, xs, ds, "fine")
    fine.teacher = True
    return coarse, fine


class FieldModel:
    """Adapter exposing a parameter store to the renderer."""

    def __init__(self, params: ParamStore, cfg: FieldConfig, thing_mask=None, cascade="fine"):
        _check_cascade(cascade)
        self.params = params
        self.cfg = cfg
        self.thing_mask = thing_mask
        self.cascade = cascade
        self._net = NeuralField(cfg)
        self._vars = params.as_vars()

    def density_color(self, xs, ds):
        xc, pe_geo, _ = self._net.encode_points(xs)
        sigma, gf = self._net.geometry(self._vars, xc, pe_geo, self.cascade)
        color = self._net.appearance(self._vars, gf, sh_encoding(ds, self.cfg.encoding.sh_degree), self.cascade)
        return sigma.value, color.value

    def logits(self, xs):
        if len(xs) == 0:
            dt = self.params["sem_grid"].dtype
            return np.zeros((0, self.cfg.n_classes), dt), np.zeros((0, self.cfg.n_instances), dt)
        xc = contract(xs)
        pe_sem = positional_encoding(xc, self.cfg.encoding.sem_freqs)
        sem, inst = self._net.understanding(self._vars, xc, pe_sem)
        return sem.value, inst.value
