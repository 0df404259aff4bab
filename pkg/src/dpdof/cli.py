"""``dpdof`` command line."""
from __future__ import annotations

import argparse
import glob
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import bench, bokeh
from .edgeaware import FaceRect
from .imagecore import ImageFormatError, LINEAR, load_image
from .lensmodel import CalibrationError
from .pipeline import (InputError, PipelineConfig, SynthScene, calibrate, load_config, run,
                       write_scene)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NONCONVERGED = 3


def _ints(text):
    return [int(v) for v in text.replace(",", " ").split()]


def _floats(text):
    return [float(v) for v in text.replace(",", " ").split()]


def _tap(text):
    v = _floats(text)
    if len(v) != 2:
        raise argparse.ArgumentTypeError("tap needs x,y")
    return tuple(v)


def _face(text):
    try:
        return FaceRect.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def build_parser():
    p = argparse.ArgumentParser(prog="dpdof", description="Synthetic shallow depth of field.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("render", help="render a defocused image")
    r.add_argument("--mode", choices=["dp", "seg", "dp+seg"], default="dp")
    r.add_argument("--image", required=True, help="sRGB color image")
    r.add_argument("--dp-left", help="left dual-pixel view (linear)")
    r.add_argument("--dp-right", help="right dual-pixel view (linear)")
    r.add_argument("--mask", help="person mask in [0, 1]")
    r.add_argument("--face", type=_face, metavar="X0,Y0,X1,Y1", help="face rectangle, half-open")
    r.add_argument("--tap", type=_tap, metavar="X,Y", help="tap-to-focus point")
    r.add_argument("--calib", help="calibration table from 'dpdof calibrate'")
    r.add_argument("--config", help="INI file overriding defaults")
    r.add_argument("--out", required=True)
    r.add_argument("--diagnostics", metavar="DIR", help="write disparity, confidence, radius and mask maps")
    r.add_argument("--threads", type=int, help="worker threads for the layer blurs")
    r.add_argument("--strict", action="store_true", help="exit 3 if a solve did not converge")

    c = sub.add_parser("calibrate", help="fit an aberration table from DP captures")
    c.add_argument("--manifest", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--grid", default="17,13", help="control grid width,height")

    s = sub.add_parser("synth", help="write a synthetic DP scene")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)

    n = sub.add_parser("noise-bank", help="build periodic noise tiles from flat fields")
    n.add_argument("--flats", required=True, help="glob of flat-field images")
    n.add_argument("--periods", default="61,67,73")
    n.add_argument("--size", type=int, default=96)
    n.add_argument("--highpass-sigma", type=float, default=2.0)
    n.add_argument("--feather", type=int, default=4)
    n.add_argument("--out", required=True)

    b = sub.add_parser("bench", help="time the scatter blurs")
    b.add_argument("--sizes", default="512")
    b.add_argument("--radii", default="4,8,16,32")
    b.add_argument("--repetitions", type=int, default=3)
    b.add_argument("--backends", default=None, help="cython,python (default: all available)")
    b.add_argument("--csv", required=True)
    return p


def _render(args) -> int:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    cfg = replace(cfg, mode=args.mode, image=args.image, dp_left=args.dp_left,
                  dp_right=args.dp_right, mask_path=args.mask, face=args.face, tap=args.tap,
                  calib=args.calib, out=args.out, diagnostics=args.diagnostics,
                  emit_diagnostics=args.diagnostics is not None)
    if args.threads is not None:
        cfg = replace(cfg, threads=args.threads)
    report = run(cfg)
    print(report.summary())
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    if args.strict and not report.converged:
        return EXIT_NONCONVERGED
    return EXIT_OK


def _calibrate(args) -> int:
    gw, gh = _ints(args.grid)
    table = calibrate(args.manifest, grid_w=gw, grid_h=gh)
    table.save(args.out)
    print(f"wrote {args.out} ({len(table.focus_distances)} focus distance(s))")
    return EXIT_OK


def _synth(args) -> int:
    try:
        doc = json.loads(Path(args.spec).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read scene spec {args.spec}: {exc}") from exc
    try:
        scene = SynthScene.from_json(doc)
    except (TypeError, KeyError) as exc:
        raise InputError(f"{args.spec}: {exc}") from exc
    paths = write_scene(scene, args.out)
    for k, v in paths.items():
        print(f"{k}: {v}")
    return EXIT_OK


def _noise_bank(args) -> int:
    files = sorted(glob.glob(args.flats))
    if not files:
        raise InputError(f"no files match {args.flats!r}")
    flats = [load_image(f, LINEAR).data.mean(axis=2) for f in files]
    bank = bokeh.build_noise_bank(flats, args.size, _ints(args.periods), args.highpass_sigma,
                                  args.feather)
    bank.save(args.out)
    print(f"wrote {len(bank.periods)} patches to {args.out}")
    return EXIT_OK


def _bench(args) -> int:
    backends = args.backends.split(",") if args.backends else None
    rows = bench.bench_blur(_ints(args.sizes), _ints(args.radii), args.repetitions, backends)
    bench.write_csv(rows, args.csv)
    for r in rows:
        print(f"{r['size']:5d} {r['radius']:3d} {r['method']:9s} {r['backend']:7s} {r['ms']:10.2f} ms")
    return EXIT_OK


COMMANDS = {
    "render": _render,
    "calibrate": _calibrate,
    "synth": _synth,
    "noise-bank": _noise_bank,
    "bench": _bench,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    try:
        return COMMANDS[args.command](args)
    except (InputError, CalibrationError, ImageFormatError, FileNotFoundError, ValueError) as exc:
        print(f"dpdof {args.command}: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
