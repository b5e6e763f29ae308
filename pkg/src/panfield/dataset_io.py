"""Cameras, rays, pseudo-label frames and the on-disk dataset layout.

Conventions: right-handed camera frame with +z forward, image x to the right
and y down; pixel ``(i, j)`` has its center at ``(i + 0.5, j + 0.5)``.
Frame-local instance ids use ``NONE = -1`` in memory and ``0xFFFF`` on disk.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DomainError, LoadError, ValidationError, WriteError

NONE = -1
_U16_NONE = 0xFFFF
FORMAT_VERSION = 1


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: np.ndarray  # 4x4 camera -> world
    t_near: float
    t_far: float

    def __post_init__(self):
        pose = np.array(self.pose, dtype=np.float64).reshape(4, 4)
        object.__setattr__(self, "pose", pose)
        rot = pose[:3, :3]
        if not np.allclose(rot.T @ rot, np.eye(3), rtol=0, atol=1e-9):
            raise ValidationError("camera pose rotation is not orthonormal")
        if np.linalg.det(rot) <= 0:
            raise ValidationError("camera pose rotation has negative determinant")
        if not 0 < self.t_near < self.t_far:
            raise ValidationError(f"need 0 < t_near < t_far, got {self.t_near}, {self.t_far}")
        if self.width < 1 or self.height < 1:
            raise ValidationError("camera resolution must be positive")

    @property
    def position(self) -> np.ndarray:
        return self.pose[:3, 3].copy()

    def __eq__(self, other):
        if not isinstance(other, CameraModel):
            return NotImplemented
        return (
            (self.fx, self.fy, self.cx, self.cy, self.width, self.height, self.t_near, self.t_far)
            == (other.fx, other.fy, other.cx, other.cy, other.width, other.height, other.t_near, other.t_far)
            and np.array_equal(self.pose, other.pose)
        )

    __hash__ = None


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    px: float
    py: float


@dataclass(frozen=True)
class PseudoLabelPixel:
    semantic: int
    instance: int  # frame-local id or NONE
    confidence: float


@dataclass(frozen=True)
class ClassTaxonomy:
    """Semantic classes (index 0 is void) and the global instance channel count."""

    n_classes: int
    thing_mask: tuple
    n_instances: int
    names: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "thing_mask", tuple(bool(t) for t in self.thing_mask))
        object.__setattr__(self, "names", tuple(self.names))
        if len(self.thing_mask) != self.n_classes:
            raise ValidationError("thing mask length must equal the class count")
        if self.thing_mask and self.thing_mask[0]:
            raise ValidationError("void class 0 cannot be a thing class")
        if self.names and len(self.names) != self.n_classes:
            raise ValidationError("class name count must equal the class count")
        if self.n_instances < 1:
            raise ValidationError("need at least one instance channel")

    @property
    def n_thing(self) -> int:
        return sum(self.thing_mask)

    @property
    def n_stuff(self) -> int:
        return self.n_classes - self.n_thing

    @property
    def thing_array(self) -> np.ndarray:
        return np.array(self.thing_mask, dtype=bool)


@dataclass
class Frame:
    camera: CameraModel
    color: np.ndarray  # (H, W, 3) float32 in [0, 1]
    semantic: np.ndarray  # (H, W) int64 class ids
    instance: np.ndarray  # (H, W) int64 frame-local ids, NONE on stuff
    confidence: Optional[np.ndarray] = None  # (H, W) float32, None means all ones
    features: Optional[np.ndarray] = None  # (C, H', W') float32
    gt_semantic: Optional[np.ndarray] = None
    gt_instance: Optional[np.ndarray] = None  # scene-global ids, NONE on stuff

    @property
    def n_local_instances(self) -> int:
        ids = self.instance[self.instance >= 0]
        return int(ids.max()) + 1 if ids.size else 0

    def conf_map(self) -> np.ndarray:
        if self.confidence is None:
            return np.ones(self.semantic.shape, dtype=np.float32)
        return self.confidence

    def pixel_label(self, x: int, y: int) -> PseudoLabelPixel:
        conf = 1.0 if self.confidence is None else float(self.confidence[y, x])
        return PseudoLabelPixel(int(self.semantic[y, x]), int(self.instance[y, x]), conf)


@dataclass
class SceneDataset:
    frames: list
    taxonomy: ClassTaxonomy
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.frames)

    @property
    def has_gt(self) -> bool:
        return all(f.gt_semantic is not None and f.gt_instance is not None for f in self.frames)

    def validate(self) -> None:
        tax = self.taxonomy
        things = tax.thing_array
        for k, fr in enumerate(self.frames):
            h, w = fr.camera.height, fr.camera.width
            if fr.color.shape != (h, w, 3):
                raise ValidationError(f"frame {k}: color shape {fr.color.shape} != {(h, w, 3)}")
            if fr.semantic.shape != (h, w) or fr.instance.shape != (h, w):
                raise ValidationError(f"frame {k}: label shape mismatch")
            if fr.semantic.min() < 0 or fr.semantic.max() >= tax.n_classes:
                raise ValidationError(f"frame {k}: semantic label outside taxonomy")
            is_thing = things[fr.semantic]
            if np.any(is_thing != (fr.instance >= 0)):
                raise ValidationError(f"frame {k}: instance ids must be NONE exactly on non-thing pixels")
            ids = np.unique(fr.instance[fr.instance >= 0])
            if ids.size and not np.array_equal(ids, np.arange(ids.size)):
                raise ValidationError(f"frame {k}: frame-local instance ids are not dense")
            if ids.size > tax.n_instances:
                raise ValidationError(f"frame {k}: {ids.size} instances exceed V={tax.n_instances}")
            if fr.confidence is not None:
                c = fr.confidence
                if c.shape != (h, w) or np.any(c < 0) or np.any(c > 1):
                    raise ValidationError(f"frame {k}: confidence must be an (H, W) map in [0, 1]")


def confidence_from_probs(probs: np.ndarray) -> np.ndarray:
    """Per-pixel confidence from a class-probability volume of shape (U, H, W)."""
    return np.max(probs, axis=0).astype(np.float32)


# ---------------------------------------------------------------- rays


def camera_directions(camera: CameraModel, px, py) -> np.ndarray:
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    local = np.stack(
        [(px - camera.cx) / camera.fx, (py - camera.cy) / camera.fy, np.ones_like(px)], axis=-1
    )
    world = local @ camera.pose[:3, :3].T
    return world / np.linalg.norm(world, axis=-1, keepdims=True)


def ray_for_pixel(camera: CameraModel, px: float, py: float) -> Ray:
    if not (0 <= px < camera.width and 0 <= py < camera.height):
        raise DomainError(f"pixel ({px}, {py}) outside {camera.width}x{camera.height} image")
    d = camera_directions(camera, px, py)
    return Ray(camera.position, d, float(px), float(py))


def rays_for_pixels(camera: CameraModel, px, py):
    """Vectorized ``ray_for_pixel``: returns (origins, directions), each (n, 3)."""
    px = np.asarray(px, dtype=np.float64).ravel()
    py = np.asarray(py, dtype=np.float64).ravel()
    if px.size and (px.min() < 0 or px.max() >= camera.width or py.min() < 0 or py.max() >= camera.height):
        raise DomainError("pixel coordinates outside the image")
    d = camera_directions(camera, px, py)
    o = np.broadcast_to(camera.position, d.shape).copy()
    return o, d


def image_rays(camera: CameraModel):
    """Rays through every pixel center in row-major order."""
    jj, ii = np.mgrid[0 : camera.height, 0 : camera.width]
    return rays_for_pixels(camera, ii.ravel() + 0.5, jj.ravel() + 0.5)


# ---------------------------------------------------------------- raw formats


def write_ppm(path, color: np.ndarray) -> None:
    """8-bit binary PPM; channel value v is stored as round(255 v)."""
    q = quantize_color(color)
    h, w, _ = q.shape
    try:
        with open(path, "wb") as fh:
            fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            fh.write(q.tobytes())
    except OSError as exc:
        raise WriteError(f"cannot write {path}: {exc}") from exc


def quantize_color(color: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(np.asarray(color, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def _ppm_tokens(data: bytes, count: int):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    return tokens, pos + 1


def read_ppm(path) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc
    try:
        (magic, w, h, maxval), pos = _ppm_tokens(data, 4)
        w, h, maxval = int(w), int(h), int(maxval)
    except (ValueError, IndexError) as exc:
        raise LoadError(f"corrupt PPM header in {path}") from exc
    if magic != b"P6" or maxval != 255:
        raise LoadError(f"{path}: only 8-bit binary P6 is supported")
    raw = np.frombuffer(data, dtype=np.uint8, count=h * w * 3, offset=pos) if len(data) - pos >= h * w * 3 else None
    if raw is None:
        raise LoadError(f"{path}: truncated pixel data")
    return raw.reshape(h, w, 3).astype(np.float32) / np.float32(255.0)


def write_u16(path, labels: np.ndarray) -> None:
    arr = np.asarray(labels)
    if arr.ndim != 2:
        raise WriteError(f"{path}: label map must be 2-D")
    out = np.where(arr < 0, _U16_NONE, arr)
    if out.max(initial=0) > _U16_NONE:
        raise WriteError(f"{path}: label value exceeds u16 range")
    h, w = arr.shape
    try:
        with open(path, "wb") as fh:
            fh.write(f"u16 {h} {w}\n".encode("ascii"))
            fh.write(out.astype("<u2").tobytes())
    except OSError as exc:
        raise WriteError(f"cannot write {path}: {exc}") from exc


def _split_header(path, data: bytes):
    nl = data.find(b"\n")
    if nl < 0:
        raise LoadError(f"{path}: missing header line")
    return data[:nl].decode("ascii", errors="replace").split(), data[nl + 1 :]


def read_u16(path, none_value: bool = False) -> np.ndarray:
    """Read a u16 label map; with ``none_value`` 0xFFFF becomes NONE."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc
    head, body = _split_header(path, data)
    if len(head) != 3 or head[0] != "u16":
        raise LoadError(f"{path}: bad header {head!r}")
    h, w = int(head[1]), int(head[2])
    if len(body) != 2 * h * w:
        raise LoadError(f"{path}: expected {2 * h * w} bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype="<u2").reshape(h, w).astype(np.int64)
    if none_value:
        arr[arr == _U16_NONE] = NONE
    return arr


def write_f32(path, array: np.ndarray, header: bool = True) -> None:
    arr = np.asarray(array, dtype="<f4")
    try:
        with open(path, "wb") as fh:
            if header:
                fh.write(("f32 " + " ".join(str(s) for s in arr.shape) + "\n").encode("ascii"))
            fh.write(arr.tobytes())
    except OSError as exc:
        raise WriteError(f"cannot write {path}: {exc}") from exc


def read_f32(path, shape: Optional[Sequence[int]] = None) -> np.ndarray:
    """Read an f32 file; headerless files need ``shape``."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc
    if shape is None:
        head, body = _split_header(path, data)
        if not head or head[0] != "f32":
            raise LoadError(f"{path}: bad header {head!r}")
        shape = tuple(int(s) for s in head[1:])
    else:
        body = data
    n = int(np.prod(shape))
    if len(body) != 4 * n:
        raise LoadError(f"{path}: expected {4 * n} bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(shape).astype(np.float32)


# ---------------------------------------------------------------- dataset dir


def _frame_name(k: int) -> str:
    return f"{k:04d}"


def _camera_line(cam: CameraModel) -> str:
    vals = [cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height, cam.t_near, cam.t_far]
    vals += list(cam.pose.ravel())
    return " ".join(repr(float(v)) if not isinstance(v, (int, np.integer)) else str(int(v)) for v in vals)


def _parse_camera(line: str, where: str) -> CameraModel:
    parts = line.split()
    if len(parts) != 24:
        raise LoadError(f"{where}: expected 24 values, found {len(parts)}")
    try:
        fx, fy, cx, cy = (float(p) for p in parts[:4])
        w, h = int(parts[4]), int(parts[5])
        t_near, t_far = float(parts[6]), float(parts[7])
        pose = np.array([float(p) for p in parts[8:]]).reshape(4, 4)
        return CameraModel(fx, fy, cx, cy, w, h, pose, t_near, t_far)
    except (ValueError, ValidationError) as exc:
        raise LoadError(f"{where}: {exc}") from exc


def save_dataset(dataset: SceneDataset, directory) -> None:
    root = Path(directory)
    tax = dataset.taxonomy
    try:
        for sub in ("images", "labels"):
            (root / sub).mkdir(parents=True, exist_ok=True)
        lines = [
            f"panfield-dataset {FORMAT_VERSION}",
            f"frames {len(dataset.frames)}",
            f"classes {tax.n_classes}",
            f"instances {tax.n_instances}",
            "things " + " ".join(str(int(t)) for t in tax.thing_mask),
        ]
        if tax.names:
            lines.append("names " + " ".join(tax.names))
        for key, value in sorted(dataset.meta.items()):
            lines.append(f"meta {key} {value}")
        (root / "manifest.txt").write_text("\n".join(lines) + "\n")
        (root / "cameras.txt").write_text("\n".join(_camera_line(f.camera) for f in dataset.frames) + "\n")
    except OSError as exc:
        raise WriteError(f"cannot write dataset to {root}: {exc}") from exc

    for k, fr in enumerate(dataset.frames):
        name = _frame_name(k)
        write_ppm(root / "images" / f"{name}.ppm", fr.color)
        write_u16(root / "labels" / f"{name}.sem.u16", fr.semantic)
        write_u16(root / "labels" / f"{name}.inst.u16", fr.instance)
        if fr.confidence is not None:
            (root / "conf").mkdir(exist_ok=True)
            write_f32(root / "conf" / f"{name}.f32", fr.confidence, header=False)
        if fr.features is not None:
            (root / "feat").mkdir(exist_ok=True)
            write_f32(root / "feat" / f"{name}.f32", fr.features)
        if fr.gt_semantic is not None:
            (root / "gt").mkdir(exist_ok=True)
            write_u16(root / "gt" / f"{name}.sem.u16", fr.gt_semantic)
            write_u16(root / "gt" / f"{name}.inst.u16", fr.gt_instance)


def _read_manifest(root: Path) -> dict:
    path = root / "manifest.txt"
    if not path.is_file():
        raise LoadError(f"manifest not found: {path}")
    out = {"meta": {}}
    for raw in path.read_text().splitlines():
        parts = raw.split()
        if not parts:
            continue
        key, rest = parts[0], parts[1:]
        if key == "meta" and len(rest) >= 2:
            out["meta"][rest[0]] = " ".join(rest[1:])
        else:
            out[key] = rest
    try:
        if out["panfield-dataset"][0] != str(FORMAT_VERSION):
            raise LoadError(f"{path}: unsupported version {out['panfield-dataset'][0]}")
        out["frames"] = int(out["frames"][0])
        out["classes"] = int(out["classes"][0])
        out["instances"] = int(out["instances"][0])
        out["things"] = tuple(bool(int(t)) for t in out["things"])
    except (KeyError, IndexError, ValueError) as exc:
        raise LoadError(f"{path}: malformed manifest ({exc})") from exc
    return out


def load_dataset(directory) -> SceneDataset:
    root = Path(directory)
    man = _read_manifest(root)
    try:
        tax = ClassTaxonomy(man["classes"], man["things"], man["instances"], tuple(man.get("names", ())))
    except ValidationError as exc:
        raise LoadError(f"{root / 'manifest.txt'}: {exc}") from exc
    cam_path = root / "cameras.txt"
    if not cam_path.is_file():
        raise LoadError(f"cameras file not found: {cam_path}")
    cam_lines = [ln for ln in cam_path.read_text().splitlines() if ln.strip()]
    if len(cam_lines) != man["frames"]:
        raise LoadError(f"{cam_path}: {len(cam_lines)} cameras for {man['frames']} frames")

    frames = []
    for k, line in enumerate(cam_lines):
        name = _frame_name(k)
        cam = _parse_camera(line, f"{cam_path}:{k + 1}")
        color = read_ppm(root / "images" / f"{name}.ppm")
        sem = read_u16(root / "labels" / f"{name}.sem.u16")
        inst = read_u16(root / "labels" / f"{name}.inst.u16", none_value=True)
        shape = (cam.height, cam.width)
        for what, arr in (("image", color.shape[:2]), ("semantic labels", sem.shape), ("instance labels", inst.shape)):
            if arr != shape:
                raise LoadError(f"frame {name}: {what} shape {arr} != camera {shape}")
        conf = None
        conf_path = root / "conf" / f"{name}.f32"
        if conf_path.is_file():
            conf = read_f32(conf_path, shape=shape)
        feats = None
        feat_path = root / "feat" / f"{name}.f32"
        if feat_path.is_file():
            feats = read_f32(feat_path)
        gt_sem = gt_inst = None
        if (root / "gt" / f"{name}.sem.u16").is_file():
            gt_sem = read_u16(root / "gt" / f"{name}.sem.u16")
            gt_inst = read_u16(root / "gt" / f"{name}.inst.u16", none_value=True)
        frames.append(Frame(cam, color, sem, inst, conf, feats, gt_sem, gt_inst))

    ds = SceneDataset(frames, tax, dict(man["meta"]))
    ds.validate()
    return ds


def replace_frame(frame: Frame, **changes) -> Frame:
    return dataclasses.replace(frame, **changes)
