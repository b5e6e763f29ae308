"""Loss assembly, the optimization loop and finite-difference gradient checking."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .checkpoint import Checkpoint, save_checkpoint
from .config import TrainConfig
from .dataset_io import SceneDataset, load_dataset, rays_for_pixels
from .encoding import contract, positional_encoding, sh_encoding
from .errors import NumericFault, ValidationError
from .field import FieldConfig, FieldModel, NeuralField, ParamStore, init_params
from .optim import Adam
from .rendering import RenderConfig, composite, render_rays, sample_distances, weights_batch
from .supervision import (
    FeatureExtractor,
    InstanceAssignment,
    LossWeights,
    PatchBatch,
    assign_instances,
    charbonnier_loss,
    cluster_same_label,
    distill_loss,
    perceptual_loss,
    sample_patches,
    seg_consistency_term,
    tv_loss,
    weighted_xent,
)

log = logging.getLogger("panfield.train")

TERMS = ("color", "distill", "sem", "ins", "seg", "feat", "tv", "disp")


def term_weights(lw: LossWeights) -> dict:
    return {
        "color": 1.0,
        "distill": lw.distill,
        "sem": lw.sem,
        "ins": lw.ins,
        "seg": lw.seg,
        "feat": lw.feat,
        "tv": lw.reg,
        "disp": lw.reg,
    }


def total_loss(terms: dict, weights, names=TERMS):
    """Weighted sum of loss terms; returns ``(scalar Var, breakdown)``.

    ``weights`` is a LossWeights or an explicit ``{term: weight}`` map.  The
    breakdown holds each raw term value plus ``total``, the weighted sum
    accumulated in double precision.
    """
    wmap = term_weights(weights) if isinstance(weights, LossWeights) else dict(weights)
    used = [n for n in names if n in terms]
    breakdown = {}
    total = 0.0
    for n in used:
        v = float(np.asarray(ad.const(terms[n]).value))
        if not math.isfinite(v):
            raise NumericFault(f"loss term {n} is not finite ({v})")
        breakdown[n] = v
        total += wmap.get(n, 0.0) * v
    breakdown["total"] = total
    loss = ad.weighted_sum([terms[n] for n in used], [wmap.get(n, 0.0) for n in used])
    return loss, breakdown


# ------------------------------------------------------------ one forward pass


@dataclass
class StepInputs:
    batch: PatchBatch
    t: np.ndarray  # (R, N) sample distances
    inst_targets: np.ndarray  # (R,) global channel per ray
    groups: list


def forward_terms(net: NeuralField, P: dict, inputs: StepInputs, extractor: FeatureExtractor, lw: LossWeights,
                  active=TERMS, skip_threshold: float = 0.0, cascade: bool = True, teacher=None,
                  und_to_density: str = "joint") -> dict:
    """All requested loss terms as Vars for one batch of patches.

    The distillation target is the fine field's own (color, density) unless
    ``teacher`` pins it to fixed arrays, which finite-difference checks need
    because the target is treated as a constant by the gradient.
    """
    cfg = net.cfg
    enc = cfg.encoding
    b, t = inputs.batch, inputs.t
    n_ray, n = t.shape
    n_tot = n_ray * n
    tfar = b.t_far
    pts = b.origins[:, None, :] + t[:, :, None] * b.dirs[:, None, :]
    xc = contract(pts.reshape(-1, 3))
    sh = sh_encoding(np.repeat(b.dirs, n, axis=0), enc.sh_degree)
    pe_geo = positional_encoding(xc, enc.geo_freqs)

    sigma, gf = net.geometry(P, xc, pe_geo, "fine")
    color = net.appearance(P, gf, sh, "fine")
    sig2 = ad.reshape(sigma, (n_ray, n))
    w, resid = weights_batch(sig2.value, t, tfar)
    need_und = any(k in active for k in ("sem", "ins", "seg"))
    sem = inst = sel = None
    if need_und:
        sel = np.flatnonzero(w.reshape(-1) > skip_threshold) if skip_threshold > 0 else np.arange(n_tot)
        xs = xc[sel]
        sem, inst = net.understanding(P, xs, positional_encoding(xs, enc.sem_freqs))
    out = composite(sig2, t, tfar, ad.reshape(color, (n_ray, n, 3)), sem, inst, sel, weights=(w, resid),
                    und_to_density=density_gate(und_to_density, b.semantic))

    dtype = sigma.value.dtype
    zero = Var(np.asarray(0.0, dtype=dtype))
    terms = {}
    terms["color"] = charbonnier_loss(out["color"], b.color, lw.eps)
    if "sem" in active:
        terms["sem"] = weighted_xent(out["sem_logits"], b.semantic, b.confidence)
    if "ins" in active:
        terms["ins"] = weighted_xent(out["inst_logits"], inputs.inst_targets, b.confidence)
    if "seg" in active:
        terms["seg"] = seg_consistency_term(out["sem_logits"], inputs.groups)
    if "feat" in active:
        p = b.size
        rendered = ad.reshape(out["color"], (b.n_patches, p, p, 3))
        terms["feat"] = perceptual_loss(rendered, b.color.reshape(b.n_patches, p, p, 3), extractor)
    if "tv" in active:
        levels = [P[f"geo_grid.l{i}"] for i in range(cfg.n_levels("fine"))]
        terms["tv"] = ad.add(tv_loss(levels), tv_loss([P["sem_grid"]]))
    if "disp" in active:
        terms["disp"] = ad.mean(out["disp"])
    if "distill" in active:
        if cascade and cfg.coarse_levels > 0:
            sig_c, gf_c = net.geometry(P, xc, pe_geo, "coarse")
            col_c = net.appearance(P, gf_c, sh, "coarse")
            sig_c2 = ad.reshape(sig_c, (n_ray, n))
            coarse = composite(sig_c2, t, tfar, ad.reshape(col_c, (n_ray, n, 3)))
            target_color, target_sigma = teacher if teacher is not None else (out["color"].value, sig2.value)
            terms["distill"] = distill_loss(coarse["color"], target_color, sig_c2, target_sigma, lw.eps)
        else:
            terms["distill"] = zero
    for k in active:
        terms.setdefault(k, zero)
    terms["_render"] = out
    terms["_teacher"] = (out["color"].value, sig2.value)
    return terms


def density_gate(mode: str, semantic: np.ndarray):
    """Per-ray mask of which understanding losses may reshape the density.

    A void ray can only score its void label by growing geometry where there
    is none, so "non-void" keeps those rays from building an opaque backdrop.
    """
    if mode == "joint":
        return None
    if mode == "non-void":
        return (semantic != 0).astype(np.float64)
    if mode == "none":
        return np.zeros(semantic.shape, dtype=np.float64)
    raise ValidationError(f"und_to_density must be joint, non-void or none, got {mode!r}")


def active_terms(lw: LossWeights, cascade: bool):
    wmap = term_weights(lw)
    act = [k for k in TERMS if wmap[k] > 0 or k == "color"]
    if not cascade and "distill" in act:
        act.remove("distill")
    return tuple(act)


# ------------------------------------------------------------ instance assignment


def instance_targets(batch: PatchBatch, assignments: dict) -> np.ndarray:
    out = np.zeros(batch.n_rays, dtype=np.int64)
    frames = batch.ray_frame
    for f in np.unique(frames):
        sel = frames == f
        a = assignments.get(int(f))
        ids = batch.instance[sel]
        if a is None:
            out[sel] = 0 if not np.any(ids >= 0) else np.where(ids >= 0, ids + 1, 0)
        else:
            out[sel] = a.targets(ids)
    return out


def refresh_assignments(params: ParamStore, fcfg: FieldConfig, dataset: SceneDataset, frames, n_pixels: int,
                        n_samples: int, rng, skip_threshold=0.0) -> dict:
    """Re-solve every frame's id-to-channel matching from the current rendered instance distribution."""
    model = FieldModel(params, fcfg, dataset.taxonomy.thing_mask)
    rcfg = RenderConfig(n_samples=n_samples, skip_threshold=skip_threshold, chunk=8192)
    out = {}
    for f in frames:
        fr = dataset.frames[f]
        thing_pix = np.flatnonzero(fr.instance.ravel() >= 0)
        if thing_pix.size == 0:
            continue
        if thing_pix.size > n_pixels:
            thing_pix = np.sort(rng.choice(thing_pix, n_pixels, replace=False))
        ys, xs = np.divmod(thing_pix, fr.camera.width)
        o, d = rays_for_pixels(fr.camera, xs + 0.5, ys + 0.5)
        res = render_rays(model, o, d, fr.camera.t_near, fr.camera.t_far, rcfg)
        out[f] = assign_instances(fr.instance.ravel()[thing_pix], res["inst"], f)
    return out


# ------------------------------------------------------------ training


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list = field(default_factory=list)  # breakdown dicts per step
    seconds: float = 0.0


def training_frames(n_frames: int, holdout_every: int):
    if holdout_every <= 0:
        return list(range(n_frames)), []
    held = [k for k in range(n_frames) if k % holdout_every == holdout_every - 1]
    return [k for k in range(n_frames) if k not in held], held


class Trainer:
    def __init__(self, cfg: TrainConfig, dataset: Optional[SceneDataset] = None, out_dir=None):
        self.cfg = cfg
        self.dataset = dataset if dataset is not None else load_dataset(cfg.dataset)
        tax = self.dataset.taxonomy
        self.fcfg = cfg.field_config(tax.n_classes, tax.n_instances)
        self.lw = cfg.loss_weights()
        self.extractor = cfg.feature_extractor()
        if cfg.alpha_feat > 0 and cfg.patch_size < self.extractor.min_size:
            raise ValidationError(f"patch_size {cfg.patch_size} below extractor minimum {self.extractor.min_size}")
        self.params = init_params(self.fcfg, cfg.seed)
        self.opt = Adam(self.params, cfg.lr_grid, cfg.lr_decoder, (cfg.beta1, cfg.beta2), cfg.adam_eps)
        self.rng = np.random.default_rng(cfg.seed)
        self.net = NeuralField(self.fcfg)
        self.train_frames, self.held_out = training_frames(len(self.dataset.frames), cfg.holdout_every)
        self.train_set = SceneDataset([self.dataset.frames[k] for k in self.train_frames], tax, self.dataset.meta)
        self.assignments = {}
        self.step_index = 0
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.active = active_terms(self.lw, cfg.cascade)
        self.warmup = cfg.warmup_steps()

    def checkpoint(self) -> Checkpoint:
        tax = self.dataset.taxonomy
        return Checkpoint(self.cfg, self.params.copy(), dict(self.assignments), self.step_index,
                          self.rng.bit_generator.state, tax.n_classes, tax.n_instances, tax.thing_mask)

    def _refresh_due(self, step):
        return step == 0 or step in self.warmup or step % self.cfg.assign_every == 0

    def step(self) -> dict:
        cfg = self.cfg
        s = self.step_index
        if self._refresh_due(s):
            self.assignments = refresh_assignments(self.params, self.fcfg, self.dataset, self.train_frames,
                                                   cfg.assign_pixels, cfg.n_samples, self.rng, cfg.skip_threshold)
        batch = sample_patches(self.train_set, cfg.patch_size, cfg.patches_per_step, self.rng)
        batch.frame_ids = np.asarray(self.train_frames)[batch.frame_ids]
        t = sample_distances(batch.t_near, batch.t_far, cfg.n_samples, True, self.rng)
        groups = cluster_same_label(batch, cfg.seg_max_groups or None) if "seg" in self.active else []
        inputs = StepInputs(batch, t, instance_targets(batch, self.assignments), groups)

        tape = Tape()
        P = self.params.as_vars(tape)
        terms = forward_terms(self.net, P, inputs, self.extractor, self.lw, self.active, cfg.skip_threshold,
                              cfg.cascade, und_to_density=cfg.und_to_density)
        loss, breakdown = total_loss(terms, self.lw, self.active)
        tape.backward(loss)
        self.params.zero_grad()
        self.params.collect(P)
        for k, g in self.params.grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericFault(f"gradient of {k} is not finite")
        self.opt.step()
        self.params.check_finite()
        self.step_index += 1
        breakdown["step"] = s
        return breakdown

    def run(self, iterations: Optional[int] = None, log_path=None) -> TrainResult:
        cfg = self.cfg
        iterations = cfg.iterations if iterations is None else iterations
        history = []
        start = time.perf_counter()
        log_file = open(log_path, "w") if log_path else None
        try:
            if log_file:
                log_file.write("step\ttotal\t" + "\t".join(self.active) + "\n")
            for _ in range(iterations):
                try:
                    bd = self.step()
                except NumericFault as exc:
                    # loss and gradient faults surface before the update, so the live state is the last good one
                    if self.out_dir is not None:
                        save_checkpoint(self.checkpoint(), self.out_dir / "checkpoint_fault")
                    raise NumericFault(f"step {self.step_index}: {exc}") from exc
                history.append(bd)
                if log_file:
                    log_file.write(f"{bd['step']}\t{bd['total']!r}\t" + "\t".join(repr(bd[k]) for k in self.active) + "\n")
                if cfg.log_every and bd["step"] % cfg.log_every == 0:
                    log.info("step %d total %.5f %s", bd["step"], bd["total"],
                             " ".join(f"{k}={bd[k]:.4g}" for k in self.active))
                if cfg.checkpoint_every and self.out_dir is not None and self.step_index % cfg.checkpoint_every == 0:
                    save_checkpoint(self.checkpoint(), self.out_dir / f"checkpoint_{self.step_index:06d}")
        finally:
            if log_file:
                log_file.close()
        # final assignment so that checkpoints carry the matching of the final field
        if self.step_index > 0:
            self.assignments = refresh_assignments(self.params, self.fcfg, self.dataset, self.train_frames,
                                                   cfg.assign_pixels, cfg.n_samples, self.rng, cfg.skip_threshold)
        ckpt = self.checkpoint()
        if self.out_dir is not None:
            save_checkpoint(ckpt, self.out_dir / "checkpoint")
        return TrainResult(ckpt, history, time.perf_counter() - start)


def train(cfg: TrainConfig, dataset: Optional[SceneDataset] = None, out_dir=None) -> TrainResult:
    trainer = Trainer(cfg, dataset, out_dir)
    log_path = None if out_dir is None else Path(out_dir) / "train_log.tsv"
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    return trainer.run(log_path=log_path)
