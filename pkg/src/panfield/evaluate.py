"""Held-out evaluation against oracle ground truth and image export of rendered views."""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint
from .dataset_io import NONE, SceneDataset, write_f32, write_ppm, write_u16
from .errors import ParseError, ValidationError
from .field import FieldModel
from .metrics import SegmentSet, miou, panoptic_quality, psnr
from .rendering import PanopticImage, RenderConfig, render_view
from .synth_oracle import orbit_camera
from .trainer import training_frames


@dataclass
class EvalReport:
    views: list
    psnr: float
    psnr_per_view: list
    miou: float
    iou_per_class: dict
    pq: float
    sq: float
    rq: float
    tp: int
    fp: int
    fn: int
    sq_vacuous: bool
    pq_per_class: dict = field(default_factory=dict)
    note: str = "ground truth: oracle maps of the held-out views"

    def as_dict(self) -> dict:
        return {
            "views": self.views,
            "psnr": self.psnr,
            "psnr_per_view": self.psnr_per_view,
            "miou": self.miou,
            "iou_per_class": {str(k): v for k, v in self.iou_per_class.items()},
            "pq": self.pq,
            "sq": self.sq,
            "rq": self.rq,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "sq_vacuous": self.sq_vacuous,
            "pq_per_class": {str(k): v for k, v in self.pq_per_class.items()},
            "note": self.note,
        }

    def text(self) -> str:
        lines = [
            f"# {self.note}",
            f"views {' '.join(str(v) for v in self.views)}",
            f"psnr {self.psnr:.4f}",
            f"miou {self.miou:.6f}",
            f"pq {self.pq:.6f}",
            f"sq {self.sq:.6f}" + (" (vacuous: no true positives)" if self.sq_vacuous else ""),
            f"rq {self.rq:.6f}",
            f"tp {self.tp} fp {self.fp} fn {self.fn}",
        ]
        lines += [f"view {v} psnr {p:.4f}" for v, p in zip(self.views, self.psnr_per_view)]
        lines += [f"class {c} iou {v:.6f}" for c, v in sorted(self.iou_per_class.items())]
        for c, d in sorted(self.pq_per_class.items()):
            lines.append(f"class {c} pq {d['pq']:.6f} sq {d['sq']:.6f} rq {d['rq']:.6f} "
                         f"tp {d['tp']} fp {d['fp']} fn {d['fn']}")
        return "\n".join(lines) + "\n"


def score_maps(colors, sem_maps, inst_maps, frames, taxonomy, views) -> EvalReport:
    """Compare predicted maps with the ground-truth maps stored on ``frames``."""
    for fr in frames:
        if fr.gt_semantic is None or fr.gt_instance is None:
            raise ValidationError("evaluation needs ground-truth label maps")
    per_view = [psnr(np.clip(c, 0, 1), fr.color) for c, fr in zip(colors, frames)]
    iou = miou(list(sem_maps), [fr.gt_semantic for fr in frames], taxonomy)
    pred = SegmentSet.from_maps(sem_maps, inst_maps, taxonomy.thing_mask)
    gt = SegmentSet.from_maps([fr.gt_semantic for fr in frames], [fr.gt_instance for fr in frames],
                              taxonomy.thing_mask)
    pq = panoptic_quality(pred, gt)
    per_class = {c: vars(v) for c, v in pq.per_class.items()}
    return EvalReport(list(views), float(np.mean(per_view)), per_view, iou.miou, iou.per_class,
                      pq.pq, pq.sq, pq.rq, pq.tp, pq.fp, pq.fn, pq.sq_vacuous, per_class)


def model_from_checkpoint(ckpt: Checkpoint) -> FieldModel:
    fcfg = ckpt.config.field_config(ckpt.n_classes, ckpt.n_instances)
    return FieldModel(ckpt.params, fcfg, ckpt.thing_mask)


def eval_render_config(ckpt: Checkpoint, n_samples=None) -> RenderConfig:
    return RenderConfig(n_samples=n_samples or 2 * ckpt.config.n_samples, stratified=False,
                        chunk=1024, skip_threshold=ckpt.config.skip_threshold)


def evaluate(ckpt: Checkpoint, dataset: SceneDataset, views=None, n_samples=None) -> EvalReport:
    if not dataset.has_gt:
        raise ValidationError("dataset has no ground-truth maps (gt/ subtree missing)")
    if views is None:
        _, views = training_frames(len(dataset.frames), ckpt.config.holdout_every)
        if not views:
            views = list(range(len(dataset.frames)))
    model = model_from_checkpoint(ckpt)
    rcfg = eval_render_config(ckpt, n_samples)
    colors, sems, insts = [], [], []
    for v in views:
        img = render_view(model, dataset.frames[v].camera, rcfg)
        colors.append(img.color)
        sems.append(img.sem_label)
        insts.append(img.inst_label)
    return score_maps(colors, sems, insts, [dataset.frames[v] for v in views], dataset.taxonomy, views)


def write_report(report: EvalReport, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval_report.txt").write_text(report.text())
    (out / "eval_report.json").write_text(json.dumps(report.as_dict(), indent=2, sort_keys=True) + "\n")


# ------------------------------------------------------------ view export


def parse_orbit(spec: str, default_res=(128, 128)):
    """Cameras from ``orbit:n=8[,radius=2.6][,elevation=30][,res=WxH][,start=0]``."""
    m = re.fullmatch(r"orbit:(.*)", spec.strip())
    if not m:
        raise ParseError(f"bad camera spec {spec!r}; expected orbit:n=K,...")
    opts = {}
    for item in filter(None, m.group(1).split(",")):
        key, eq, val = item.partition("=")
        if not eq:
            raise ParseError(f"bad orbit option {item!r}")
        opts[key.strip()] = val.strip()
    unknown = set(opts) - {"n", "radius", "elevation", "res", "start"}
    if unknown or "n" not in opts:
        raise ParseError(f"orbit spec needs n=K and accepts radius, elevation, res, start; got {sorted(opts)}")
    try:
        n = int(opts["n"])
        radius = float(opts.get("radius", 2.6))
        elev = math.radians(float(opts.get("elevation", 30.0)))
        start = math.radians(float(opts.get("start", 0.0)))
        w, h = default_res
        if "res" in opts:
            w, h = (int(v) for v in opts["res"].lower().split("x"))
    except ValueError as exc:
        raise ParseError(f"bad orbit spec {spec!r}: {exc}") from None
    if n < 1 or radius <= 1.0 or w < 1 or h < 1:
        raise ParseError(f"orbit spec out of range: {spec!r}")
    return [orbit_camera(start + 2 * math.pi * k / n, elev, radius, w, h) for k in range(n)]


def _palette(n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    pal = rng.uniform(0.15, 1.0, (max(n, 1), 3))
    pal[0] = 0.0
    return pal


def label_visual(img: PanopticImage) -> np.ndarray:
    """Semantic palette on the left half, instance palette (things only) on the right."""
    sem = _palette(img.sem.shape[-1], 7)[img.sem_label]
    inst_pal = _palette(img.inst.shape[-1] + 1, 11)
    inst = inst_pal[np.where(img.inst_label >= 0, img.inst_label + 1, 0)]
    return np.concatenate([sem, inst], axis=1)


def export_view(img: PanopticImage, out_dir, name: str) -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / f"{name}.ppm", out / f"{name}.sem.u16", out / f"{name}.inst.u16", out / f"{name}.depth.f32",
             out / f"{name}.vis.ppm"]
    write_ppm(paths[0], np.clip(img.color, 0, 1))
    write_u16(paths[1], img.sem_label)
    write_u16(paths[2], np.where(img.inst_label >= 0, img.inst_label, NONE))
    write_f32(paths[3], img.depth.astype(np.float32))
    write_ppm(paths[4], label_visual(img))
    return paths


def render_views(ckpt: Checkpoint, cameras, out_dir, n_samples=None, names=None) -> list:
    model = model_from_checkpoint(ckpt)
    rcfg = eval_render_config(ckpt, n_samples)
    written = []
    for k, cam in enumerate(cameras):
        img = render_view(model, cam, rcfg)
        written.append(export_view(img, out_dir, names[k] if names else f"view_{k:04d}"))
    return written
