import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from panfield.dataset_io import (
    NONE,
    CameraModel,
    ClassTaxonomy,
    Frame,
    SceneDataset,
    confidence_from_probs,
    load_dataset,
    quantize_color,
    ray_for_pixel,
    rays_for_pixels,
    read_f32,
    read_ppm,
    read_u16,
    save_dataset,
    write_f32,
    write_ppm,
    write_u16,
)
from panfield.errors import DomainError, LoadError, ValidationError
from panfield.synth_oracle import make_dataset, orbit_camera, three_boxes


def identity_camera(**kw):
    args = dict(fx=100.0, fy=100.0, cx=50.0, cy=50.0, width=200, height=100, pose=np.eye(4), t_near=0.1, t_far=5.0)
    args.update(kw)
    return CameraModel(**args)


def test_principal_point_maps_to_optical_axis():
    ray = ray_for_pixel(identity_camera(), 50.0, 50.0)
    np.testing.assert_allclose(ray.direction, [0, 0, 1], atol=1e-15)


def test_off_axis_pixel_direction():
    ray = ray_for_pixel(identity_camera(), 150.0, 50.0)
    np.testing.assert_allclose(ray.direction, [2**-0.5, 0, 2**-0.5], atol=1e-12)


def test_out_of_range_pixel_rejected():
    with pytest.raises(DomainError):
        ray_for_pixel(identity_camera(), 200.0, 10.0)
    with pytest.raises(DomainError):
        ray_for_pixel(identity_camera(), -0.1, 10.0)


@given(az=st.floats(0, 6.28), el=st.floats(-1.2, 1.2), px=st.floats(0, 31.99), py=st.floats(0, 23.99))
def test_rays_are_unit_and_start_at_camera(az, el, px, py):
    cam = orbit_camera(az, el, 2.6, 32, 24)
    ray = ray_for_pixel(cam, px, py)
    assert abs(np.linalg.norm(ray.direction) - 1) < 1e-9
    np.testing.assert_array_equal(ray.origin, cam.pose[:3, 3])
    o, d = rays_for_pixels(cam, [px], [py])
    np.testing.assert_allclose(d[0], ray.direction, atol=1e-15)


def test_camera_rejects_bad_pose_and_bounds():
    bad = np.eye(4)
    bad[0, 0] = 2.0
    with pytest.raises(ValidationError):
        identity_camera(pose=bad)
    flip = np.diag([1.0, 1.0, -1.0, 1.0])
    with pytest.raises(ValidationError):
        identity_camera(pose=flip)
    with pytest.raises(ValidationError):
        identity_camera(t_near=0.0)


def test_half_grey_quantizes_to_128(tmp_path):
    write_ppm(tmp_path / "c.ppm", np.full((1, 1, 3), 0.5))
    np.testing.assert_array_equal(read_ppm(tmp_path / "c.ppm"), np.full((1, 1, 3), np.float32(128 / 255)))
    assert quantize_color(np.array([0.5]))[0] == 128


def test_u16_labels_are_lossless(tmp_path):
    labels = np.array([[0, 300], [65534, NONE]])
    write_u16(tmp_path / "l.u16", labels)
    np.testing.assert_array_equal(read_u16(tmp_path / "l.u16", none_value=True), labels)
    assert (tmp_path / "l.u16").read_bytes().startswith(b"u16 2 2\n")


def test_f32_roundtrip(tmp_path):
    a = np.random.default_rng(0).normal(size=(3, 4, 5)).astype(np.float32)
    write_f32(tmp_path / "a.f32", a)
    np.testing.assert_array_equal(read_f32(tmp_path / "a.f32"), a)


def test_empty_directory_reports_missing_manifest(tmp_path):
    with pytest.raises(LoadError, match="manifest not found"):
        load_dataset(tmp_path)


def test_single_frame_roundtrip_is_exact(tmp_path):
    tax = ClassTaxonomy(3, (False, False, True), 2)
    cam = orbit_camera(0.3, 0.4, 2.6, 4, 3)
    color = (np.arange(36).reshape(3, 4, 3) / 35.0).astype(np.float32)
    color = np.round(color * 255) / 255
    sem = np.array([[0, 1, 2, 2], [1, 1, 2, 0], [0, 0, 0, 2]])
    inst = np.where(sem == 2, 0, NONE)
    inst[2, 3] = 1
    conf = np.full((3, 4), 0.75, dtype=np.float32)
    ds = SceneDataset([Frame(cam, color.astype(np.float32), sem, inst, conf)], tax, {"note": "x"})
    save_dataset(ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    fr, orig = back.frames[0], ds.frames[0]
    assert back.taxonomy == tax
    assert fr.camera == orig.camera
    np.testing.assert_array_equal(fr.semantic, sem)
    np.testing.assert_array_equal(fr.instance, inst)
    np.testing.assert_array_equal(fr.color, orig.color)
    np.testing.assert_array_equal(fr.confidence, conf)


def test_oracle_dataset_roundtrip_and_counts(tmp_path):
    ds = make_dataset(three_boxes(), 8, (12, 10), directory=tmp_path / "boxes")
    back = load_dataset(tmp_path / "boxes")
    assert len(back.frames) == 8
    assert back.taxonomy.n_classes == 5
    assert back.has_gt
    for a, b in zip(ds.frames, back.frames):
        assert a.camera == b.camera
        np.testing.assert_array_equal(a.semantic, b.semantic)
        np.testing.assert_array_equal(a.instance, b.instance)
        np.testing.assert_array_equal(a.gt_semantic, b.gt_semantic)
        np.testing.assert_array_equal(a.gt_instance, b.gt_instance)
        np.testing.assert_allclose(a.color, b.color, atol=0.5 / 255 + 1e-7)


def test_corrupt_label_file_is_named(tmp_path):
    make_dataset(three_boxes(), 2, (8, 8), directory=tmp_path / "d")
    victim = next((tmp_path / "d" / "labels").glob("*.sem.u16"))
    victim.write_bytes(b"u16 8 8\n\x00")
    with pytest.raises(LoadError, match=victim.name):
        load_dataset(tmp_path / "d")


def test_validation_catches_sparse_ids_and_stuff_ids():
    tax = ClassTaxonomy(3, (False, False, True), 4)
    cam = orbit_camera(0.0, 0.5, 2.6, 2, 1)
    col = np.zeros((1, 2, 3), np.float32)
    with pytest.raises(ValidationError, match="dense"):
        SceneDataset([Frame(cam, col, np.array([[2, 2]]), np.array([[0, 2]]))], tax).validate()
    with pytest.raises(ValidationError, match="NONE"):
        SceneDataset([Frame(cam, col, np.array([[1, 2]]), np.array([[0, 1]]))], tax).validate()


def test_confidence_is_max_probability():
    probs = np.array([[[0.2]], [[0.7]], [[0.1]]])
    assert confidence_from_probs(probs)[0, 0] == pytest.approx(0.7)
