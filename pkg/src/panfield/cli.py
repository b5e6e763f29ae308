"""Command-line entry point: ``panfield synth|train|render|eval|gradcheck``.

Failures print one JSON object on stderr, prefixed with ``panfield-error``,
and exit nonzero; the exit code depends on the error kind.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import FIELD_TYPES, SECTIONS, build_config, config_text, parse_value, read_config_file
from .errors import PanfieldError, ParseError, UsageError

EXIT_CODES = {
    "usage": 2,
    "parse": 2,
    "load": 3,
    "write": 3,
    "validation": 4,
    "domain": 4,
    "capacity": 4,
    "contract": 4,
    "numeric": 5,
    "gradcheck": 6,
}


class GradcheckFailed(PanfieldError):
    kind = "gradcheck"


def error_line(kind: str, message: str, code: int) -> str:
    return "panfield-error " + json.dumps({"kind": kind, "code": code, "message": message}, sort_keys=True)


def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def _parse_res(text: str):
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ParseError(f"resolution must look like WxH, got {text!r}") from None
    if w < 1 or h < 1:
        raise ParseError(f"resolution must be positive, got {text!r}")
    return w, h


def _int_list(text: str):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ParseError(f"expected a comma-separated list of integers, got {text!r}") from None


# ------------------------------------------------------------ subcommands


def cmd_synth(args) -> None:
    from .synth_oracle import NoiseSpec, get_scene, make_dataset

    if args.out is None:
        raise UsageError("synth needs --out DIR")
    noise = NoiseSpec(p_flip=args.flip, block=args.block, permute_instances=args.permute_instances, seed=args.seed)
    ds = make_dataset(get_scene(args.scene), args.views, _parse_res(args.res), noise, Path(args.out))
    print(f"wrote {len(ds.frames)} frames of {args.scene} to {args.out}")


def train_config(args):
    file_values = read_config_file(args.config) if args.config else {}
    overrides = {}
    for key in FIELD_TYPES:
        raw = getattr(args, key, None)
        if raw is not None:
            overrides[key] = parse_value(key, raw)
    return build_config(file_values, overrides)


def cmd_train(args) -> None:
    from .trainer import train

    cfg = train_config(args)
    if not cfg.dataset:
        raise UsageError("train needs a dataset (--dataset DIR or [data] dataset = DIR)")
    out = Path(args.out or "run")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(config_text(cfg))
    res = train(cfg, None, out)
    last = res.history[-1]["total"] if res.history else float("nan")
    print(f"trained {res.checkpoint.iteration} steps in {res.seconds:.1f}s, final loss {last:.6g}; "
          f"checkpoint in {out / 'checkpoint'}")


def cmd_render(args) -> None:
    from .checkpoint import load_checkpoint
    from .dataset_io import load_dataset
    from .evaluate import parse_orbit, render_views

    ckpt = load_checkpoint(args.checkpoint)
    out = Path(args.out or "renders")
    if (args.camera is None) == (args.frame is None):
        raise UsageError("render needs exactly one of --camera SPEC or --frame K")
    if args.frame is not None:
        ds_dir = args.dataset or ckpt.config.dataset
        if not ds_dir:
            raise UsageError("--frame needs --dataset DIR (or a checkpoint that records one)")
        ds = load_dataset(ds_dir)
        if not 0 <= args.frame < len(ds.frames):
            raise UsageError(f"frame {args.frame} out of range (dataset has {len(ds.frames)})")
        cams, names = [ds.frames[args.frame].camera], [f"frame_{args.frame:04d}"]
    else:
        cams, names = parse_orbit(args.camera), None
    written = render_views(ckpt, cams, out, args.samples, names)
    print(f"wrote {len(written)} views to {out}")


def cmd_eval(args) -> None:
    from .checkpoint import load_checkpoint
    from .dataset_io import load_dataset
    from .evaluate import evaluate, write_report

    ckpt = load_checkpoint(args.checkpoint)
    ds_dir = args.dataset or ckpt.config.dataset
    if not ds_dir:
        raise UsageError("eval needs --dataset DIR")
    views = _int_list(args.views) if args.views else None
    report = evaluate(ckpt, load_dataset(ds_dir), views, args.samples)
    out = Path(args.out or ".")
    write_report(report, out)
    sys.stdout.write(report.text())


def cmd_gradcheck(args) -> None:
    from .gradcheck import gradcheck, preset_config
    from .trainer import TERMS

    terms = tuple(args.terms.split(",")) if args.terms else TERMS + ("total",)
    unknown = set(terms) - set(TERMS + ("total",))
    if unknown:
        raise UsageError(f"unknown loss terms {sorted(unknown)}")
    file_values = read_config_file(args.config) if args.config else {}
    cfg = preset_config(**{**file_values, "seed": args.seed})
    report = gradcheck(cfg, args.n_probe, args.h, args.tolerance, terms, args.seed)
    text = report.text()
    sys.stdout.write(text)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "gradcheck.txt").write_text(text)
    bad = report.offenders()
    if bad:
        listing = ", ".join(f"{t}/{g}={e:.3e}" for t, g, e in bad)
        raise GradcheckFailed(f"relative error above {args.tolerance:g}: {listing}")


# ------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="FILE", help="sectioned key = value config file")
    common.add_argument("--seed", type=int, default=None, metavar="S")
    common.add_argument("--out", metavar="DIR")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="panfield", description="Panoptic radiance field toolkit.")
    parser.add_argument("--version", action="version", version=f"panfield {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", parents=[common], help="render an analytic scene into a dataset")
    p.add_argument("--scene", default="three-boxes")
    p.add_argument("--views", type=int, default=44, metavar="N")
    p.add_argument("--res", default="128x128", metavar="WxH")
    p.add_argument("--flip", type=float, default=0.0, metavar="P", help="per-block semantic flip probability")
    p.add_argument("--block", type=int, default=16, metavar="B")
    p.add_argument("--permute-instances", action="store_true")
    p.set_defaults(run=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="optimize a field on a dataset")
    for section, keys in SECTIONS.items():
        group = p.add_argument_group(f"[{section}] keys (override the config file)")
        for key in keys:
            if key != "seed":
                group.add_argument(_flag(key), dest=key, metavar=FIELD_TYPES[key].__name__.upper())
    p.set_defaults(run=cmd_train)

    p = sub.add_parser("render", parents=[common], help="render views from a checkpoint")
    p.add_argument("--checkpoint", required=True, metavar="DIR")
    p.add_argument("--camera", metavar="SPEC", help="orbit:n=K[,radius=R][,elevation=E][,res=WxH][,start=A]")
    p.add_argument("--frame", type=int, metavar="K", help="render the camera of dataset frame K")
    p.add_argument("--dataset", metavar="DIR")
    p.add_argument("--samples", type=int, metavar="N", help="samples per ray (default twice the training count)")
    p.set_defaults(run=cmd_render)

    p = sub.add_parser("eval", parents=[common], help="score held-out views against ground truth")
    p.add_argument("--checkpoint", required=True, metavar="DIR")
    p.add_argument("--dataset", metavar="DIR")
    p.add_argument("--views", metavar="LIST", help="comma-separated frame indices (default: held-out frames)")
    p.add_argument("--samples", type=int, metavar="N")
    p.set_defaults(run=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="central-difference gradient check")
    p.add_argument("--n-probe", type=int, default=4, metavar="K")
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--terms", metavar="LIST", help="comma-separated subset of loss terms and 'total'")
    p.set_defaults(run=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse already printed usage; add the machine-readable line for real errors
        if exc.code not in (0, None):
            print(error_line("usage", "invalid command line", EXIT_CODES["usage"]), file=sys.stderr)
            return EXIT_CODES["usage"]
        return 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    if args.seed is None:
        args.seed = 0 if args.command in ("synth", "gradcheck") else None
    try:
        args.run(args)
    except PanfieldError as exc:
        code = EXIT_CODES.get(exc.kind, 1)
        print(error_line(exc.kind, str(exc), code), file=sys.stderr)
        return code
    except OSError as exc:
        print(error_line("io", str(exc), 3), file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
