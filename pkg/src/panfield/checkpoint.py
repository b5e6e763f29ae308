"""Checkpoint directories: ``manifest.txt`` + ``params.bin`` (little-endian f32) + ``assign.txt``."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig, build_config, config_items, parse_value
from .errors import LoadError, WriteError
from .field import ParamStore
from .supervision import InstanceAssignment

CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    config: TrainConfig
    params: ParamStore
    assignments: dict = field(default_factory=dict)  # frame index -> InstanceAssignment
    iteration: int = 0
    rng_state: dict = field(default_factory=dict)
    n_classes: int = 0
    n_instances: int = 0
    thing_mask: tuple = ()


def save_checkpoint(ckpt: Checkpoint, directory) -> None:
    root = Path(directory)
    try:
        root.mkdir(parents=True, exist_ok=True)
        lines = [
            f"panfield-checkpoint {CHECKPOINT_VERSION}",
            f"iteration {ckpt.iteration}",
            f"classes {ckpt.n_classes}",
            f"instances {ckpt.n_instances}",
            "things " + " ".join(str(int(t)) for t in ckpt.thing_mask),
            "rng " + json.dumps(ckpt.rng_state, sort_keys=True),
        ]
        lines += [f"config {k} {v}" for k, v in config_items(ckpt.config)]
        offset = 0
        chunks = []
        for name, arr in ckpt.params.arrays.items():
            data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            shape = ",".join(str(s) for s in arr.shape)
            lines.append(f"param {name} f32 {shape} {offset} {len(data)}")
            chunks.append(data)
            offset += len(data)
        (root / "params.bin").write_bytes(b"".join(chunks))
        (root / "manifest.txt").write_text("\n".join(lines) + "\n")
        assign = []
        for f in sorted(ckpt.assignments):
            a = ckpt.assignments[f]
            assign.append(f"{f} " + " ".join(str(int(c)) for c in a.mapping))
        (root / "assign.txt").write_text("\n".join(assign) + ("\n" if assign else ""))
    except OSError as exc:
        raise WriteError(f"cannot write checkpoint to {root}: {exc}") from exc


def load_checkpoint(directory) -> Checkpoint:
    root = Path(directory)
    man_path = root / "manifest.txt"
    if not man_path.is_file():
        raise LoadError(f"checkpoint manifest not found: {man_path}")
    try:
        blob = (root / "params.bin").read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read {root / 'params.bin'}: {exc}") from exc
    values = {}
    params = ParamStore()
    head = {}
    rng_state = {}
    for n, raw in enumerate(man_path.read_text().splitlines(), 1):
        parts = raw.split(" ", 1)
        if not raw.strip():
            continue
        key, rest = parts[0], parts[1] if len(parts) > 1 else ""
        try:
            if key == "config":
                k, _, v = rest.partition(" ")
                values[k] = parse_value(k, v)
            elif key == "param":
                name, dtype, shape, off, size = rest.split()
                shape = tuple(int(s) for s in shape.split(",") if s)
                off, size = int(off), int(size)
                if dtype != "f32" or off + size > len(blob):
                    raise ValueError("bad parameter record")
                arr = np.frombuffer(blob[off : off + size], dtype="<f4").astype(np.float32).reshape(shape)
                params[name] = arr.copy()
            elif key == "rng":
                rng_state = json.loads(rest)
            else:
                head[key] = rest
        except (ValueError, json.JSONDecodeError) as exc:
            raise LoadError(f"{man_path}:{n}: {exc}") from exc
    if head.get("panfield-checkpoint") != str(CHECKPOINT_VERSION):
        raise LoadError(f"{man_path}: unsupported checkpoint version {head.get('panfield-checkpoint')!r}")
    assignments = {}
    assign_path = root / "assign.txt"
    if assign_path.is_file():
        for raw in assign_path.read_text().splitlines():
            if raw.strip():
                nums = [int(v) for v in raw.split()]
                assignments[nums[0]] = InstanceAssignment(nums[0], np.array(nums[1:], dtype=np.int64), np.zeros((0, 0)))
    return Checkpoint(
        config=build_config(values),
        params=params,
        assignments=assignments,
        iteration=int(head.get("iteration", 0)),
        rng_state=rng_state,
        n_classes=int(head.get("classes", 0)),
        n_instances=int(head.get("instances", 0)),
        thing_mask=tuple(bool(int(t)) for t in head.get("things", "").split()),
    )
