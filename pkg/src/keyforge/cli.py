"""Command-line entry point.

Exit codes: 0 success, 1 stage/processing failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .bitting import BitMask, BittingCode, KeySpec, decode_mask, locate_keypoints, segment_threshold, validate_macs
from .errors import KeyforgeError
from .geometry import PerspectiveParams, detect_flip_heuristic, homography_from_correspondences, warp_image
from .imageio import read_image, read_mask, write_image, write_mask
from .model3d import BowSpec, attach_bow, build_blade_mesh, emit_csg_script, mesh_diagnostics, profile_from_code, write_stl
from .pipeline import ARRANGEMENTS, PipelineConfig, eval_dataset, run_pipeline
from .synth import RenderStyle, SceneConfig, canonical_corners, generate_dataset, load_manifest, render_key_mask


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _spec(args) -> KeySpec:
    return KeySpec.load(args.keyspec) if args.keyspec else KeySpec.default()


def _floats(text: str, n: int, what: str) -> list[float]:
    try:
        vals = [float(v) for v in text.replace(";", ",").split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"{what}: expected {n} numbers") from exc
    if len(vals) != n:
        raise UsageError(f"{what}: expected {n} numbers, got {len(vals)}")
    return vals


def _config(args) -> PipelineConfig:
    data = {}
    if getattr(args, "config", None):
        data = json.loads(Path(args.config).read_text(encoding="utf-8"))
    for key in ("patch_size", "mask_size", "detector", "segmenter", "mpe_gate", "stations", "ring"):
        val = getattr(args, key, None)
        if val is not None:
            data[key] = val
    if getattr(args, "full_resolution", False):
        data["patch_size"], data["mask_size"] = None, None
    if args.keyspec:
        data["keyspec"] = args.keyspec
    try:
        return PipelineConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad pipeline config: {exc}") from exc


def _canvas_size(spec: KeySpec, px_per_mm: float) -> tuple[int, int]:
    return RenderStyle().canvas_size(spec, px_per_mm)


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    config = SceneConfig(px_per_mm=args.px_per_mm)
    path = generate_dataset(args.out, args.count, args.seed, _spec(args), config, frame=not args.noframe)
    print(path)
    return 0


def cmd_rectify(args) -> int:
    spec = _spec(args)
    size = tuple(args.size) if args.size else _canvas_size(spec, args.px_per_mm)
    if args.theta:
        theta = PerspectiveParams(tuple(_floats(args.theta, 8, "--theta")))
    elif args.corners:
        corners = np.array(_floats(args.corners, 8, "--corners")).reshape(4, 2)
        theta = homography_from_correspondences(corners, canonical_corners(size))
    else:
        raise UsageError("rectify needs --theta or --corners")
    img = read_image(args.image)
    if img.ndim == 3:
        img = img.mean(axis=2)
    write_image(args.out, warp_image(img, theta, size[0], size[1]))
    return 0


def cmd_segment(args) -> int:
    patch = read_image(args.patch)
    mask = segment_threshold(patch)
    decision = detect_flip_heuristic(mask)
    if decision.flipped and not args.no_flip:
        mask = mask.flipped_vertical()
    write_mask(args.out, mask.bits)
    print(f"{decision.orientation} {decision.confidence:.4f}")
    return 0


def cmd_decode(args) -> int:
    spec = _spec(args)
    bits = read_mask(args.mask)
    mask = BitMask(bits, locate_keypoints(bits))
    code, heights = decode_mask(mask, spec)
    violations = validate_macs(code, spec)
    if args.json:
        print(json.dumps({"code": str(code), "heights": [float(h) for h in heights], "macs_valid": not violations}))
    else:
        print(code)
    if violations:
        print(f"MacsFail: adjacent cuts exceed MACS {spec.macs} at {violations}", file=sys.stderr)
        return 1
    return 0


def cmd_model(args) -> int:
    spec = _spec(args)
    try:
        code = BittingCode.parse(args.code)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    violations = validate_macs(code, spec)
    if violations or any(d < 0 or d >= spec.depth_chart.num_depths for d in code):
        print(f"MacsFail: code {code} is not cuttable for {spec.name}", file=sys.stderr)
        return 1
    profile = profile_from_code(code, spec)
    bow = BowSpec.default(spec)
    mesh = attach_bow(build_blade_mesh(spec, profile, args.stations, args.ring), bow, spec)
    write_stl(mesh, args.out)
    if args.csg:
        emit_csg_script(spec, profile, bow, args.csg)
    diag = mesh_diagnostics(mesh)
    print(json.dumps({"stl": str(args.out), "triangles": len(mesh), **diag.to_dict()}, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    config = replace(_config(args), out_dir=str(args.out))
    report = eval_dataset(args.manifest, config, args.arrangement, seed=args.seed, out_dir=args.out)
    print(json.dumps(report["aggregate"], indent=2, sort_keys=True))
    return 0


def cmd_pipeline(args) -> int:
    config = replace(_config(args), out_dir=str(args.out))
    manifest = load_manifest(args.manifest)
    matches = [a for a in manifest.scenes if a.scene_id == args.scene]
    if not matches:
        raise UsageError(f"scene {args.scene!r} not in {args.manifest}")
    ann = matches[0]
    spec = manifest.spec if not args.keyspec else _spec(args)
    gt = render_key_mask(ann.code, spec, ann.px_per_mm, manifest.scene_config.style) if len(ann.code) else None
    report = run_pipeline(manifest.load_image(ann), ann, config, spec=spec, gt_mask=gt, mask_root=manifest.root)
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return 0 if report.stage is None else 1


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="seed for every random draw")
    common.add_argument("--keyspec", help="key spec JSON (default: built-in 5-pin spec)")

    pipe = argparse.ArgumentParser(add_help=False)
    pipe.add_argument("--config", help="pipeline config JSON")
    pipe.add_argument("--detector", choices=["annotation", "marker_box"])
    pipe.add_argument("--segmenter", choices=["threshold", "mask_file"])
    pipe.add_argument("--patch-size", dest="patch_size", type=int)
    pipe.add_argument("--mask-size", dest="mask_size", type=int)
    pipe.add_argument(
        "--full-resolution", dest="full_resolution", action="store_true", help="decode at canvas resolution (no patch/mask resize)"
    )
    pipe.add_argument("--mpe-gate", dest="mpe_gate", type=float)
    pipe.add_argument("--stations", type=int)
    pipe.add_argument("--ring", type=int)

    p = _Parser(prog="keyforge", description="Key bitting recovery and printable key models.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic scene dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=100)
    s.add_argument("--px-per-mm", dest="px_per_mm", type=float, default=27.0)
    s.add_argument("--noframe", action="store_true", help="omit the fiducial markers")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("rectify", parents=[common], help="warp a scene to the upright key frame")
    s.add_argument("--image", required=True)
    s.add_argument("--theta", help="8 comma-separated homography parameters (scene -> patch)")
    s.add_argument("--corners", help="4 marker corners x,y;x,y;x,y;x,y (TL, TR, BR, BL)")
    s.add_argument("--size", type=int, nargs=2, metavar=("W", "H"))
    s.add_argument("--px-per-mm", dest="px_per_mm", type=float, default=27.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_rectify)

    s = sub.add_parser("segment", parents=[common], help="threshold-segment an upright patch")
    s.add_argument("--patch", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--no-flip", dest="no_flip", action="store_true", help="keep the mask as segmented")
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("decode", parents=[common], help="decode a bitting code from an upright mask")
    s.add_argument("--mask", required=True)
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("model", parents=[common], help="build a key STL straight from a code")
    s.add_argument("--code", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--csg", help="also write an OpenSCAD-style CSG script")
    s.add_argument("--stations", type=int, default=256)
    s.add_argument("--ring", type=int, default=128)
    s.set_defaults(func=cmd_model)

    s = sub.add_parser("eval", parents=[common, pipe], help="evaluate a manifest under one arrangement")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--arrangement", choices=ARRANGEMENTS, default="orig-frame")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("pipeline", parents=[common, pipe], help="run the full pipeline on one manifest scene")
    s.add_argument("--manifest", required=True)
    s.add_argument("--scene", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pipeline)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except KeyforgeError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
