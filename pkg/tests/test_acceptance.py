"""Acceptance criteria 1-9.

Every test carries a ``criterion`` marker; the summary at the end of the
pytest run prints one PASS/FAIL line per criterion with its measured values.
The learning criteria (6-8) share four training runs of about half an hour
each, trained once per session.
"""

import time

import numpy as np
import pytest

from panfield.checkpoint import load_checkpoint, save_checkpoint
from panfield.config import TrainConfig
from panfield.dataset_io import ClassTaxonomy, image_rays
from panfield.encoding import EncodingConfig
from panfield.evaluate import evaluate, model_from_checkpoint, render_views
from panfield.field import FieldConfig, FieldModel, init_params
from panfield.gradcheck import gradcheck
from panfield.metrics import SegmentSet, hungarian, miou, panoptic_quality
from panfield.rendering import RenderConfig, render_rays, render_view
from panfield.synth_oracle import (
    NoiseSpec,
    SceneField,
    analytic_render,
    get_scene,
    make_dataset,
    orbit_cameras,
    three_boxes,
)
from panfield.trainer import train

from oracles import brute_assignment

# First oracle run of criterion 6 (three-boxes, 40 training views, seed 0).
# A later run may not fall below these by more than the slack.
PINNED = {"psnr": 31.3653, "miou": 0.918900, "pq": 0.835254}
SLACK = {"psnr": 1.0, "miou": 0.02, "pq": 0.04}

DESK_VIEWS = 44  # every 11th view is held out, leaving 40 for training
DESK_RES = (128, 128)
DESK_MINUTES = 30.0
# Desk schedule: 2000 steps at four times the default step sizes.
DESK_TRAIN = dict(iterations=2000, lr_grid=0.02, lr_decoder=0.005, holdout_every=11, seed=0)


def detail(request, text):
    request.node.user_properties.append(("detail", text))


# ------------------------------------------------------------ 1


@pytest.mark.criterion(1, "gradient suite, max relative error < 1e-4 in under 2 min")
def test_criterion_1_gradient_suite(request):
    start = time.perf_counter()
    report = gradcheck(n_probe=4, h=1e-5, tolerance=1e-4)
    seconds = time.perf_counter() - start
    detail(request, f"max rel err {report.max_error:.2e} over {len(report.results)} losses, {seconds:.0f}s")
    assert not report.offenders(), report.text()
    assert report.max_error < 1e-4
    assert seconds < 120


# ------------------------------------------------------------ 2


@pytest.mark.criterion(2, "rendering conservation on 1e5 random rays within 1e-6")
def test_criterion_2_conservation(request):
    rng = np.random.default_rng(0)
    n_rays = 100_000
    cfg = FieldConfig(n_classes=5, n_instances=5, encoding=EncodingConfig(geo_resolutions=(8, 16), sem_resolution=8),
                      geo_width=16, app_width=16, sem_width=16, grid_init=0.5)
    model = FieldModel(init_params(cfg, seed=3), cfg, (False, False, False, True, True))
    o = rng.normal(size=(n_rays, 3))
    o *= (2.6 / np.linalg.norm(o, axis=1))[:, None]
    d = -o / 2.6 + rng.normal(0, 0.2, (n_rays, 3))
    d /= np.linalg.norm(d, axis=1)[:, None]
    start = time.perf_counter()
    out = render_rays(model, o, d, 1.6, 3.6, RenderConfig(n_samples=32, stratified=True, seed=1, chunk=8192))
    seconds = time.perf_counter() - start
    cons = float(np.max(np.abs(out["weight_sum"] + out["residual"] - 1)))
    su = float(np.max(np.abs(out["sem"].sum(axis=1) - 1)))
    sv = float(np.max(np.abs(out["inst"].sum(axis=1) - 1)))
    detail(request, f"|sum w + T - 1| {cons:.1e}, |sum U - 1| {su:.1e}, |sum V - 1| {sv:.1e}, {seconds:.0f}s")
    assert cons < 1e-6 and su < 1e-6 and sv < 1e-6


# ------------------------------------------------------------ 3


def _shortest_chord(scene, cam):
    o, d = image_rays(cam)
    chord = np.full(len(o), np.inf)
    for prim in scene.primitives:
        a, b = prim.intervals(o, d)
        length = np.clip(b, cam.t_near, cam.t_far) - np.clip(a, cam.t_near, cam.t_far)
        chord = np.minimum(chord, np.where(length > 0, length, np.inf))
    return chord


@pytest.mark.criterion(3, "oracle agreement at N=512, max per-channel error <= 0.01 on all scenes")
def test_criterion_3_oracle_agreement(request):
    start = time.perf_counter()
    worst = {}
    for name in ("three-boxes", "orchard", "fog-road"):
        scene = get_scene(name)
        err_max, n_bad, n_bad_thin, n_pix = 0.0, 0, 0, 0
        for cam in orbit_cameras(4, *DESK_RES):
            ref = analytic_render(scene, cam)
            img = render_view(SceneField(scene), cam, RenderConfig(n_samples=512), scene.taxonomy.thing_mask)
            err = np.abs(img.color - ref.color).max(axis=-1).ravel()
            bad = err > 0.01
            bucket = (cam.t_far - cam.t_near) / 512
            n_bad += int(bad.sum())
            n_bad_thin += int(np.sum(bad & (_shortest_chord(scene, cam) < bucket)))
            n_pix += err.size
            err_max = max(err_max, float(err.max()))
        worst[name] = err_max
        detail(request, f"{name} max {err_max:.3f}, {n_bad}/{n_pix} px over 0.01 "
                        f"({n_bad_thin} cross an opaque chord shorter than one bucket)")
    seconds = time.perf_counter() - start
    detail(request, f"{seconds:.0f}s")
    assert seconds < 300
    assert all(v <= 0.01 for v in worst.values()), worst


# ------------------------------------------------------------ 4


@pytest.mark.criterion(4, "hungarian equals brute force on 1000 matrices up to 6x6")
def test_criterion_4_assignment_exactness(request):
    rng = np.random.default_rng(4)
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(1, 7))
        m = int(rng.integers(n, 7))
        cost = rng.normal(size=(n, m))
        cols, total = hungarian(cost)
        assert len(set(cols.tolist())) == n
        best = brute_assignment(cost.tolist())
        mismatches += total != best
    detail(request, f"{mismatches} cost mismatches")
    assert mismatches == 0


# ------------------------------------------------------------ 5


@pytest.mark.criterion(5, "PQ = SQ*RQ within 1e-9 on 100 segment sets, worked examples exact")
def test_criterion_5_metric_identities(request):
    rng = np.random.default_rng(5)
    things = (False, False, True, True)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(20, 200))
        gs = np.repeat(rng.integers(0, 4, n // 5 + 1), 5)[:n]
        gi = np.where(np.array(things)[gs], np.repeat(rng.integers(0, 4, n // 5 + 1), 5)[:n], -1)
        flip = rng.random(n) < rng.uniform(0, 0.6)
        ps = np.where(flip, rng.integers(0, 4, n), gs)
        pi = np.where(np.array(things)[ps], np.where(flip, rng.integers(0, 4, n), np.maximum(gi, 0)), -1)
        r = panoptic_quality(SegmentSet.from_maps([ps], [pi], things), SegmentSet.from_maps([gs], [gi], things))
        worst = max(worst, abs(r.pq - r.sq * r.rq))
    # worked examples
    tax = ClassTaxonomy(2, (False, False), 1)
    m = miou(np.array([[1, 1, 0, 0]]), np.array([[0, 1, 1, 0]]), tax)
    gt = SegmentSet.from_masks({(2, 1): range(10)}, 20, things)
    pred = SegmentSet.from_masks({(2, 4): range(8), (3, 1): range(15, 20)}, 20, things)
    pq = panoptic_quality(pred, gt)
    empty = panoptic_quality(SegmentSet.from_masks({}, 4), SegmentSet.from_masks({(1, 0): [0, 1]}, 4))
    detail(request, f"max |PQ - SQ*RQ| {worst:.1e}")
    assert worst < 1e-9
    assert m.per_class[1] == 1 / 3 and m.per_class[0] == 1 / 3 and m.miou == 1 / 3
    assert (pq.tp, pq.fp, pq.fn) == (1, 1, 0)
    assert pq.sq == 0.8 and pq.pq == 0.8 / 1.5 and pq.rq == 1 / 1.5
    assert (empty.pq, empty.rq, empty.sq) == (0.0, 0.0, 1.0)


# ------------------------------------------------------------ 6-8 shared runs


RUNS = {
    "clean_permuted": dict(flip=0.0, permute=True, alpha_seg=0.12),
    "clean_plain": dict(flip=0.0, permute=False, alpha_seg=0.12),
    "noisy_seg": dict(flip=0.1, permute=True, alpha_seg=0.12),
    "noisy_noseg": dict(flip=0.1, permute=True, alpha_seg=0.0),
}


class DeskRuns:
    def __init__(self, root):
        self.root = root
        self.done = {}

    def get(self, name):
        if name not in self.done:
            spec = RUNS[name]
            ds = make_dataset(three_boxes(), DESK_VIEWS, DESK_RES,
                              NoiseSpec(p_flip=spec["flip"], permute_instances=spec["permute"], seed=1))
            cfg = TrainConfig(alpha_seg=spec["alpha_seg"], **DESK_TRAIN)
            start = time.perf_counter()
            res = train(cfg, ds, self.root / name)
            minutes = (time.perf_counter() - start) / 60
            report = evaluate(res.checkpoint, ds)
            self.done[name] = (report, minutes)
        return self.done[name]


@pytest.fixture(scope="session")
def desk_runs(tmp_path_factory):
    return DeskRuns(tmp_path_factory.mktemp("desk"))


@pytest.mark.criterion(6, "desk-scale learning: PSNR >= 28, mIoU >= 0.90, PQ >= 0.80 within 30 min")
def test_criterion_6_desk_learning(request, desk_runs):
    rep, minutes = desk_runs.get("clean_permuted")
    detail(request, f"PSNR {rep.psnr:.2f} dB, mIoU {rep.miou:.4f}, PQ {rep.pq:.4f} "
                    f"(SQ {rep.sq:.3f}, RQ {rep.rq:.3f}), {minutes:.1f} min training")
    assert minutes <= DESK_MINUTES
    assert rep.psnr >= 28.0 and rep.miou >= 0.90 and rep.pq >= 0.80
    for key, value in (("psnr", rep.psnr), ("miou", rep.miou), ("pq", rep.pq)):
        if PINNED[key] is not None:
            assert value >= PINNED[key] - SLACK[key], f"{key} regressed: {value} vs pinned {PINNED[key]}"


@pytest.mark.criterion(7, "10% label flips: seg-consistency run beats the ablation by >= 0.03 mIoU")
def test_criterion_7_noise_robustness(request, desk_runs):
    with_seg, t1 = desk_runs.get("noisy_seg")
    without, t2 = desk_runs.get("noisy_noseg")
    _, t6 = desk_runs.get("clean_permuted")
    gain = with_seg.miou - without.miou
    detail(request, f"mIoU {with_seg.miou:.4f} with vs {without.miou:.4f} without (gain {gain:+.4f}), "
                    f"{t1 + t2:.1f} min for both runs (budget {2 * DESK_MINUTES:.0f}; criterion 6 took {t6:.1f})")
    assert t1 + t2 <= 2 * DESK_MINUTES
    assert gain >= 0.03


@pytest.mark.criterion(8, "per-frame instance permutation changes PQ by at most 2 points")
def test_criterion_8_permutation_invariance(request, desk_runs):
    permuted, _ = desk_runs.get("clean_permuted")
    plain, _ = desk_runs.get("clean_plain")
    gap = abs(permuted.pq - plain.pq)
    detail(request, f"PQ {permuted.pq:.4f} permuted vs {plain.pq:.4f} plain (gap {gap:.4f}), "
                    f"mIoU gap {abs(permuted.miou - plain.miou):.4f}")
    assert gap <= 0.02


# ------------------------------------------------------------ 9


@pytest.mark.criterion(9, "same-seed training and checkpoint roundtrip are bit-identical")
def test_criterion_9_determinism(request, tmp_path):
    ds = make_dataset(three_boxes(), 4, (48, 48), NoiseSpec(permute_instances=True, seed=9))
    cfg = TrainConfig(iterations=6, holdout_every=0, assign_warmup="3", seed=9)
    a = train(cfg, ds, tmp_path / "a")
    train(cfg, ds, tmp_path / "b")
    same = {f: (tmp_path / "a" / "checkpoint" / f).read_bytes() == (tmp_path / "b" / "checkpoint" / f).read_bytes()
            for f in ("params.bin", "manifest.txt", "assign.txt")}
    logs_same = (tmp_path / "a" / "train_log.tsv").read_text() == (tmp_path / "b" / "train_log.tsv").read_text()

    back = load_checkpoint(tmp_path / "a" / "checkpoint")
    cam = ds.frames[1].camera
    rc = RenderConfig(n_samples=64)
    before = render_view(model_from_checkpoint(a.checkpoint), cam, rc)
    after = render_view(model_from_checkpoint(back), cam, rc)
    images_same = all(np.array_equal(getattr(before, k), getattr(after, k))
                      for k in ("color", "sem", "inst", "depth", "sem_label", "inst_label"))
    save_checkpoint(back, tmp_path / "c")
    resaved = (tmp_path / "c" / "params.bin").read_bytes() == (tmp_path / "a" / "checkpoint" / "params.bin").read_bytes()
    files_a = render_views(back, [cam], tmp_path / "ra")
    files_b = render_views(load_checkpoint(tmp_path / "c"), [cam], tmp_path / "rb")
    files_same = all(p.read_bytes() == q.read_bytes() for p, q in zip(files_a[0], files_b[0]))
    detail(request, f"checkpoint files equal {same}, loss logs equal {logs_same}, roundtrip render equal "
                    f"{images_same}, resave equal {resaved}, exported files equal {files_same}")
    assert all(same.values()) and logs_same and images_same and resaved and files_same
