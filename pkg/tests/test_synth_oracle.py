import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from panfield.dataset_io import NONE, ClassTaxonomy, image_rays, load_dataset
from panfield.errors import DomainError, ValidationError
from panfield.synth_oracle import (
    OPAQUE,
    NoiseSpec,
    Primitive,
    SynthScene,
    analytic_rays,
    analytic_render,
    dense_local_ids,
    flip_blocks,
    get_scene,
    inject_label_noise,
    make_dataset,
    orbit_camera,
    three_boxes,
)

TAX = ClassTaxonomy(3, (False, False, True), 4)


def partition(ids):
    """Pixel groups of a label map, independent of the label values."""
    groups = {}
    for p, v in enumerate(np.asarray(ids).ravel()):
        groups.setdefault(int(v), []).append(p)
    return sorted(tuple(g) for k, g in groups.items() if k != NONE)


def test_empty_scene_shows_background():
    scene = SynthScene("empty", [], TAX, background=(0.1, 0.2, 0.3))
    img = analytic_render(scene, orbit_camera(0.0, 0.3, 2.6, 4, 4))
    np.testing.assert_allclose(img.color, np.broadcast_to([0.1, 0.2, 0.3], (4, 4, 3)))
    assert np.all(img.opacity == 0) and np.all(img.sem_label == 0) and np.all(img.inst_label == NONE)


def test_opaque_box_covers_the_pixel():
    box = Primitive("box", (0.0, 0.0, 0.0), (0.5, 0.5, 0.5), OPAQUE, (0.9, 0.1, 0.4), 2, 3)
    scene = SynthScene("box", [box], TAX)
    o = np.array([[-2.0, 0.0, 0.0]])
    color, opacity, depth, shares = analytic_rays(scene, o, np.array([[1.0, 0.0, 0.0]]), 0.5, 3.5)
    np.testing.assert_allclose(color[0], [0.9, 0.1, 0.4], atol=1e-12)
    assert opacity[0] == 1.0 and depth[0] == pytest.approx(2.0, abs=1e-3)
    img = analytic_render(scene, orbit_camera(0.0, 0.0, 2.6, 3, 3))
    assert img.sem_label[1, 1] == 2 and img.inst_label[1, 1] == 3


def test_two_slabs_compose_in_closed_form():
    c1, c2 = np.array([1.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0])
    # thickness 0.5 at density 2 gives optical depth 1 per slab
    slabs = [Primitive("box", (-0.25, 0.0, 0.0), (0.25, 0.1, 0.1), 2.0, tuple(c1), 1),
             Primitive("box", (0.25, 0.0, 0.0), (0.25, 0.1, 0.1), 2.0, tuple(c2), 2, 1)]
    scene = SynthScene("slabs", slabs, TAX)
    color, opacity, _, shares = analytic_rays(scene, np.array([[-2.0, 0.0, 0.0]]), np.array([[1.0, 0.0, 0.0]]),
                                              0.5, 3.5)
    a = 1 - math.exp(-1)
    np.testing.assert_allclose(color[0], a * c1 + math.exp(-1) * a * c2, atol=1e-12)
    assert 1 - opacity[0] == pytest.approx(math.exp(-2), abs=1e-12)
    np.testing.assert_allclose(shares[0], [a, math.exp(-1) * a], atol=1e-12)


def test_overlapping_densities_add():
    a = Primitive("box", (0.0, 0.0, 0.0), (0.2, 0.2, 0.2), 1.5, (1.0, 0.0, 0.0), 1)
    b = Primitive("box", (0.0, 0.0, 0.0), (0.2, 0.2, 0.2), 0.5, (0.0, 1.0, 0.0), 1)
    scene = SynthScene("overlap", [a, b], TAX)
    _, opacity, _, shares = analytic_rays(scene, np.array([[-2.0, 0.0, 0.0]]), np.array([[1.0, 0.0, 0.0]]), 0.5, 3.5)
    assert 1 - opacity[0] == pytest.approx(math.exp(-2.0 * 0.4), abs=1e-12)
    assert shares[0, 0] == pytest.approx(3 * shares[0, 1], rel=1e-12)


def test_tangent_sphere_ray_misses():
    s = Primitive("sphere", (0.0, 0.0, 0.0), (0.5,), OPAQUE, (1, 1, 1), 1)
    t0, t1 = s.intervals(np.array([[-2.0, 0.5, 0.0]]), np.array([[1.0, 0.0, 0.0]]))
    assert not t0[0] < t1[0]


def test_scene_validation():
    with pytest.raises(ValidationError):
        SynthScene("x", [Primitive("box", (0, 0, 0), (0.1, 0.1, 0.1), 1.0, (1, 1, 1), 2, 0)], TAX)
    with pytest.raises(ValidationError):
        SynthScene("x", [Primitive("box", (0, 0, 0), (0.1, 0.1, 0.1), 1.0, (1, 1, 1), 1, 2)], TAX)
    with pytest.raises(ValidationError):
        SynthScene("x", [Primitive("sphere", (0.8, 0, 0), (0.3,), 1.0, (1, 1, 1), 1)], TAX)
    with pytest.raises(ValidationError):
        Primitive("cone", (0, 0, 0), (0.1,), 1.0, (1, 1, 1), 1)
    with pytest.raises(ValidationError):
        NoiseSpec(p_flip=1.5)


@pytest.mark.parametrize("name", ["three-boxes", "orchard", "fog-road"])
def test_standard_scenes_are_consistent(name):
    scene = get_scene(name)
    assert scene.primitives
    img = analytic_render(scene, orbit_camera(0.4, 0.5, 2.6, 24, 24))
    things = np.array(scene.taxonomy.thing_mask)
    assert np.all((img.inst_label >= 1) == things[img.sem_label])
    assert np.all(img.opacity >= 0) and np.all(img.opacity <= 1)


def test_unknown_scene_name():
    with pytest.raises(Exception) as info:
        get_scene("moon")
    assert "moon" in str(info.value)


# ------------------------------------------------------------ noise


def test_noise_disabled_is_identity():
    rng = np.random.default_rng(0)
    sem = rng.integers(0, 3, (8, 8))
    inst = dense_local_ids(np.where(sem == 2, rng.integers(0, 3, (8, 8)), NONE))
    s, i = inject_label_noise(sem, inst, TAX, NoiseSpec())
    np.testing.assert_array_equal(s, sem)
    np.testing.assert_array_equal(i, inst)


def test_whole_image_block_flips_to_one_wrong_class():
    sem = np.array([[1, 1, 1], [1, 2, 0]])
    out, flipped = flip_blocks(sem, 3, 1.0, 8, np.random.default_rng(0))
    assert flipped == [(0, 0)]
    assert len(np.unique(out)) == 1 and out[0, 0] != 1


def test_flip_rate_on_many_blocks():
    sem = np.zeros((100, 100), dtype=np.int64)
    out, flipped = flip_blocks(sem, 3, 0.1, 1, np.random.default_rng(8))
    frac = np.mean(out != 0)
    assert len(flipped) == np.sum(out != 0)
    assert abs(frac - 0.1) < 3 * math.sqrt(0.1 * 0.9 / 1e4)


@given(st.integers(0, 2**31 - 1), st.integers(0, 5))
def test_noise_is_deterministic_and_permutation_keeps_partition(seed, frame):
    rng = np.random.default_rng(seed)
    sem = np.where(rng.random((12, 12)) < 0.5, 2, 1)
    inst = dense_local_ids(np.where(sem == 2, rng.integers(0, 3, (12, 12)), NONE))
    spec = NoiseSpec(p_flip=0.0, permute_instances=True, seed=seed)
    s1, i1 = inject_label_noise(sem, inst, TAX, spec, frame)
    s2, i2 = inject_label_noise(sem, inst, TAX, spec, frame)
    np.testing.assert_array_equal(i1, i2)
    np.testing.assert_array_equal(s1, sem)
    assert partition(i1) == partition(inst)
    noisy = NoiseSpec(p_flip=0.3, block=4, seed=seed)
    a = inject_label_noise(sem, inst, TAX, noisy, frame)
    b = inject_label_noise(sem, inst, TAX, noisy, frame)
    np.testing.assert_array_equal(a[0], b[0])
    things = np.array(TAX.thing_mask)
    assert np.all((a[1] >= 0) == things[a[0]])


# ------------------------------------------------------------ datasets


def test_clean_dataset_labels_equal_ground_truth():
    ds = make_dataset(three_boxes(), 2, (12, 12))
    for fr in ds.frames:
        np.testing.assert_array_equal(fr.semantic, fr.gt_semantic)
        assert partition(fr.instance) == partition(fr.gt_instance)


def test_written_dataset_loads(tmp_path):
    ds = make_dataset(get_scene("orchard"), 8, (64, 64), NoiseSpec(p_flip=0.1, seed=2), tmp_path / "ds")
    back = load_dataset(tmp_path / "ds")
    assert len(back.frames) == 8
    for a, b in zip(ds.frames, back.frames):
        np.testing.assert_array_equal(a.semantic, b.semantic)
        np.testing.assert_array_equal(a.gt_semantic, b.gt_semantic)
        assert b.color.shape == (64, 64, 3)
    assert (tmp_path / "ds" / "gt").is_dir()


def test_permuted_frames_share_the_ground_truth_partition():
    ds = make_dataset(three_boxes(), 2, (24, 24), NoiseSpec(permute_instances=True, seed=5))
    relabelled = 0
    for fr in ds.frames:
        assert partition(fr.instance) == partition(fr.gt_instance)
        mapping = {int(g): int(l) for g, l in zip(fr.gt_instance.ravel(), fr.instance.ravel()) if g >= 0}
        # without the permutation, local ids would follow the order of global ids
        relabelled += [mapping[g] for g in sorted(mapping)] != list(range(len(mapping)))
    assert relabelled >= 1


def test_dataset_needs_two_views():
    with pytest.raises(DomainError):
        make_dataset(three_boxes(), 1, (8, 8))
