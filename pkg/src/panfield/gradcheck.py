"""Central-difference verification of every loss term's gradients on a tiny field.

The preset uses a two-level pyramid, narrow decoders, one 8x8 patch with 8
deterministic samples per ray and a small strided extractor, all in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Tape
from .config import TrainConfig
from .field import NeuralField, ParamStore, init_params
from .rendering import sample_distances
from .supervision import cluster_same_label, sample_patches
from .synth_oracle import NoiseSpec, make_dataset, three_boxes
from .trainer import TERMS, StepInputs, forward_terms, instance_targets, term_weights, total_loss

GRADCHECK_PRESET = dict(
    geo_resolutions="4,6",
    geo_features=2,
    sem_resolution=4,
    sem_features=2,
    geo_freqs=1,
    sem_freqs=1,
    sh_degree=1,
    geo_width=8,
    geo_feature_dim=3,
    app_width=8,
    sem_width=8,
    coarse_levels=1,
    patch_size=8,
    patches_per_step=1,
    n_samples=8,
    skip_threshold=0.0,
    seg_max_groups=0,
    extractor_channels="3,3,3",
    extractor_kernel=2,
    extractor_stride=2,
    extractor_min=8,
    holdout_every=0,
)


def preset_config(**overrides) -> TrainConfig:
    return TrainConfig(**{**GRADCHECK_PRESET, **overrides})


@dataclass
class GroupResult:
    group: str
    max_rel_error: float
    n_probes: int
    all_zero: bool  # analytic gradient identically zero and every probe's FD estimate negligible


@dataclass
class GradcheckReport:
    h: float
    tolerance: float
    results: dict = field(default_factory=dict)  # term -> list of GroupResult

    def offenders(self):
        return [(t, r.group, r.max_rel_error) for t, rs in self.results.items() for r in rs
                if r.max_rel_error > self.tolerance]

    @property
    def max_error(self) -> float:
        return max((r.max_rel_error for rs in self.results.values() for r in rs), default=0.0)

    def text(self) -> str:
        lines = [f"# central differences h={self.h:g}, tolerance {self.tolerance:g}"]
        for term, rs in self.results.items():
            for r in rs:
                flag = " zero" if r.all_zero else ""
                lines.append(f"{term}\t{r.group}\t{r.max_rel_error:.3e}\t{r.n_probes}{flag}")
        return "\n".join(lines) + "\n"


def param_group(name: str) -> str:
    return name.split(".")[0]


class GradcheckProblem:
    """A fixed batch, field and extractor on which losses are pure functions of the parameters."""

    def __init__(self, cfg: TrainConfig = None, seed: int = 0):
        self.cfg = cfg or preset_config(seed=seed)
        ds = make_dataset(three_boxes(), 2, (8, 8), NoiseSpec(permute_instances=True, seed=seed))
        tax = ds.taxonomy
        self.fcfg = replace(self.cfg.field_config(tax.n_classes, tax.n_instances), grid_init=0.5)
        self.params = init_params(self.fcfg, seed, dtype=np.float64)
        rng = np.random.default_rng(seed)
        # move biases off zero so no unit sits exactly at a ReLU kink
        for k in self.params.names():
            if ".b" in k:
                self.params.arrays[k] += rng.uniform(-0.1, 0.1, self.params.arrays[k].shape)
        self.net = NeuralField(self.fcfg)
        self.extractor = self.cfg.feature_extractor()
        batch = sample_patches(ds, self.cfg.patch_size, self.cfg.patches_per_step, rng)
        t = sample_distances(batch.t_near, batch.t_far, self.cfg.n_samples, True, rng)
        groups = cluster_same_label(batch, self.cfg.seg_max_groups or None)
        self.inputs = StepInputs(batch, t, instance_targets(batch, {}), groups)
        self.lw = self.cfg.loss_weights()
        self.teacher = None
        self.teacher = self._terms(self.params.as_vars())["_teacher"]

    def _terms(self, P):
        return forward_terms(self.net, P, self.inputs, self.extractor, self.lw, TERMS, 0.0, True, self.teacher)

    def weights_for(self, term: str) -> dict:
        if term == "total":
            return term_weights(self.lw)
        return {k: (1.0 if k == term else 0.0) for k in TERMS}

    def loss(self, params: ParamStore, weights: dict, tape=None):
        P = params.as_vars(tape)
        loss, _ = total_loss(self._terms(P), weights)
        return loss, P

    def value(self, params: ParamStore, weights: dict) -> float:
        return float(self.loss(params, weights)[0].value)

    def gradient(self, weights: dict) -> ParamStore:
        tape = Tape()
        loss, P = self.loss(self.params, weights, tape)
        tape.backward(loss)
        out = self.params.copy()
        out.zero_grad()
        out.collect(P)
        return out

    def central_difference(self, weights: dict, name: str, index, h: float) -> float:
        p = self.params.copy()
        arr = p.arrays[name]
        orig = arr[index]
        arr[index] = orig + h
        fp = self.value(p, weights)
        arr[index] = orig - h
        fm = self.value(p, weights)
        return (fp - fm) / (2 * h)


def relative_error(a: float, n: float, floor: float = 1e-10) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def check_term(problem: GradcheckProblem, term: str, n_probe: int, h: float, rng) -> list:
    weights = problem.weights_for(term)
    grads = problem.gradient(weights)
    by_group = {}
    for name in grads.names():
        by_group.setdefault(param_group(name), []).append(name)
    results = []
    for group, names in by_group.items():
        flat = [(nm, idx, float(grads.grads[nm][idx])) for nm in names for idx in np.ndindex(grads.grads[nm].shape)]
        nonzero = [c for c in flat if abs(c[2]) > 1e-7]
        if nonzero:
            pick = rng.choice(len(nonzero), size=min(n_probe, len(nonzero)), replace=False)
            probes = [nonzero[i] for i in sorted(pick)]
        else:
            pick = rng.choice(len(flat), size=min(n_probe, len(flat)), replace=False)
            probes = [flat[i] for i in sorted(pick)]
        worst = 0.0
        fd_small = True
        for nm, idx, a in probes:
            n = problem.central_difference(weights, nm, idx, h)
            if nonzero:
                worst = max(worst, relative_error(a, n))
            else:
                # analytic zero: the numeric estimate must vanish to rounding level
                fd_small &= abs(n) < 1e-9
                worst = max(worst, 0.0 if abs(n) < 1e-9 else 1.0)
        all_zero = not nonzero and all(not np.any(grads.grads[nm]) for nm in names) and fd_small
        results.append(GroupResult(group, worst, len(probes), all_zero))
    return results


def gradcheck(cfg: TrainConfig = None, n_probe: int = 4, h: float = 1e-5, tolerance: float = 1e-3,
              terms=TERMS + ("total",), seed: int = 0) -> GradcheckReport:
    problem = GradcheckProblem(cfg, seed)
    rng = np.random.default_rng(seed + 1)
    report = GradcheckReport(h, tolerance)
    for term in terms:
        report.results[term] = check_term(problem, term, n_probe, h, rng)
    return report
