"""Batch command line: phantom generation, extraction, evaluation, overlays.

Exit codes: 0 success, 2 usage or input error, 3 when no rib cage / no ribs
could be found in the volume.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .centerline import CenterlineSet, load_centerlines, resample_arclength, save_centerlines
from .evalbench import DEFAULT_DELTA_MM, build_report, report_to_json, report_to_text
from .phantom import PhantomSpec, generate
from .probmap import combined_probability
from .tracer import RibCageNotFound, RibsNotFound, TraceParams, extract_all
from .volgrid import ProbabilityMap, RvfError, VoxelGrid, read_rvf, write_rvf

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NOT_FOUND = 3

_AXES = {"x": 0, "y": 1, "z": 2}


def write_pgm(path: str, image: np.ndarray) -> None:
    """Binary P5 portable graymap; image is (rows, cols) uint8."""
    rows, cols = image.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{cols} {rows}\n255\n".encode())
        f.write(image.astype(np.uint8).tobytes())


def mip_image(q: VoxelGrid, axis: int) -> np.ndarray:
    """Maximum intensity projection scaled to 0..255, (rows, cols) layout.

    Columns run along the first remaining axis, rows along the second.
    """
    arr = q.values.max(axis=axis)
    img = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    return img.T.copy()


def burn_centerlines(image: np.ndarray, q: VoxelGrid, lines: CenterlineSet, axis: int) -> None:
    keep = [a for a in range(3) if a != axis]
    spacing = np.asarray(q.spacing)
    origin = np.asarray(q.origin)
    dims = np.asarray(q.dims)
    for rib in lines.ribs:
        pts = resample_arclength(rib.points, 1.0)
        uv = np.round((pts[:, keep] - origin[keep]) / spacing[keep]).astype(int)
        ok = np.all((uv >= 0) & (uv < dims[keep]), axis=1)
        uv = uv[ok]
        image[uv[:, 1], uv[:, 0]] = 255


def _fail(message: str, code: int) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def cmd_phantom(args) -> int:
    try:
        spec = PhantomSpec.from_json_file(args.spec)
        pmap, gt = generate(spec, args.spacing)
    except (ValueError, OSError, json.JSONDecodeError) as e:
        return _fail(str(e), EXIT_INPUT)
    write_rvf(args.out, pmap)
    save_centerlines(args.out + ".gt.json", gt)
    print(f"wrote {args.out}.rvf, {args.out}.raw, {args.out}.gt.json ({len(gt.ribs)} ribs)")
    return EXIT_OK


def cmd_trace(args) -> int:
    try:
        volume = read_rvf(args.prob)
        if not isinstance(volume, ProbabilityMap):
            return _fail(f"{args.prob}: expected a 4-channel probability map", EXIT_INPUT)
        params = TraceParams.from_json_file(args.config) if args.config else TraceParams()
    except (RvfError, ValueError, OSError, json.JSONDecodeError) as e:
        return _fail(str(e), EXIT_INPUT)
    try:
        lines = extract_all(volume, params, provenance=args.prob)
    except (RibCageNotFound, RibsNotFound) as e:
        return _fail(str(e), EXIT_NOT_FOUND)
    save_centerlines(args.out, lines)
    for rib in lines.ribs:
        scores = ", ".join(f"{k}={v:.2f}" for k, v in rib.class_scores.items())
        print(f"{rib.label:<10} side={rib.side:<7} length={rib.length():7.1f} mm  {scores}")
    print(f"wrote {args.out} ({len(lines.ribs)} ribs)")
    return EXIT_OK


def cmd_eval(args) -> int:
    if len(args.pred) != len(args.gt) or not args.pred:
        return _fail("need equal-length, non-empty --pred and --gt lists", EXIT_INPUT)
    try:
        cases = [
            (load_centerlines(p), load_centerlines(g))
            for p, g in zip(args.pred, args.gt)
        ]
        report = build_report(cases, delta=args.delta)
    except (ValueError, OSError, json.JSONDecodeError) as e:
        return _fail(str(e), EXIT_INPUT)
    text = report_to_text(report)
    with open(args.report, "w") as f:
        f.write(report_to_json(report))
    txt_path = (
        args.report[: -len(".json")] + ".txt"
        if args.report.endswith(".json")
        else args.report + ".txt"
    )
    with open(txt_path, "w") as f:
        f.write(text)
    print(text, end="")
    return EXIT_OK


def cmd_overlay(args) -> int:
    try:
        volume = read_rvf(args.prob)
        lines = load_centerlines(args.lines)
    except (RvfError, ValueError, OSError, json.JSONDecodeError) as e:
        return _fail(str(e), EXIT_INPUT)
    q = combined_probability(volume) if isinstance(volume, ProbabilityMap) else volume
    axis = _AXES[args.axis]
    image = mip_image(q, axis)
    burn_centerlines(image, q, lines, axis)
    write_pgm(args.out, image)
    print(f"wrote {args.out} ({image.shape[1]}x{image.shape[0]})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ribtrace",
        description="Rib centerline extraction and evaluation on probability volumes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic rib cage volume")
    p.add_argument("--spec", required=True, help="phantom spec JSON file")
    p.add_argument("--spacing", type=float, required=True, help="voxel spacing in mm")
    p.add_argument("--out", required=True, help="output path prefix")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("trace", help="extract labeled rib centerlines")
    p.add_argument("--prob", required=True, help="4-channel RVF probability volume")
    p.add_argument("--config", help="trace parameter JSON (strict keys)")
    p.add_argument("--out", required=True, help="output centerline JSON")
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("eval", help="evaluate predictions against ground truth")
    p.add_argument("--pred", nargs="+", required=True, help="prediction JSON files")
    p.add_argument("--gt", nargs="+", required=True, help="ground truth JSON files")
    p.add_argument("--delta", type=float, default=DEFAULT_DELTA_MM, help="match tolerance in mm")
    p.add_argument("--report", required=True, help="report output path (JSON)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("overlay", help="write a MIP with centerlines burned in")
    p.add_argument("--prob", required=True, help="RVF volume (1 or 4 channels)")
    p.add_argument("--lines", required=True, help="centerline JSON")
    p.add_argument("--axis", choices=sorted(_AXES), required=True)
    p.add_argument("--out", required=True, help="output PGM path")
    p.set_defaults(func=cmd_overlay)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
