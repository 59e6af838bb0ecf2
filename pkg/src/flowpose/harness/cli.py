"""Command line: synth, init, track, eval, viz."""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from ..tracker import TrackResult, initialize, load_config, track
from .io import (FormatError, read_annotation, read_bundle, read_flo, read_result, read_states,
                 write_bundle, write_result, write_states)


def _config(path: str):
    return load_config(None if path in ("-", "") else path)


def cmd_synth(args) -> int:
    from .synth import gt_annotation, load_motion_script, synth_sequence
    from .io import format_annotation
    script = load_motion_script(None if args.script == "walk" else args.script)
    bundle = synth_sequence(script, noise=args.noise, seed=args.seed)
    out = write_bundle(bundle, args.outdir)
    ann = gt_annotation(bundle.gt[0], bundle.camera, theta_noise=args.annotate_noise, seed=args.seed)
    (out / "annotation.txt").write_text(format_annotation(ann))
    print(f"wrote {len(bundle)} frames to {out}")
    return 0


def cmd_init(args) -> int:
    bundle = read_bundle(args.bundle)
    ann = read_annotation(args.annotation)
    cfg = _config(args.config)
    res = initialize(bundle.masks[0], bundle.flows[1], ann, bundle.camera, cfg)
    write_states([res.state], args.output)
    for stage, r in res.stages.items():
        print(f"{stage}: {r.iterations} iterations, cost {r.value:.6g} ({r.message})")
    return 0


def cmd_track(args) -> int:
    bundle = read_bundle(args.bundle)
    state0 = read_states(args.state0)[0]
    cfg = _config(args.config)
    start = time.perf_counter()

    def progress(i, state):
        if args.verbose:
            print(f"frame {i} done", file=sys.stderr)

    result = track(bundle.frames(), state0, cfg.filter_bank(state0), bundle.camera, cfg, progress)
    write_result(result, args.output)
    degraded = [d["frame"] for d in result.diagnostics if d.get("error")]
    print(f"tracked {len(result)} frames in {time.perf_counter() - start:.1f} s"
          + (f"; degraded frames: {degraded}" if degraded else ""))
    return 0


def cmd_eval(args) -> int:
    from .metrics import joint_error_2d, joint_error_global, joint_error_local
    from .synth import gt_joints_2d
    result = read_result(args.result)
    bundle = read_bundle(args.bundle)
    if bundle.gt is None:
        raise FormatError("bundle carries no ground truth")
    gt = [bundle.gt[s.frame] for s in result.states]
    lines = []
    for label, scale in (("scaled", True), ("rigid", False)):
        per_frame, local = joint_error_local(result.states, gt, scale)
        lines.append(f"local_{label}_cm = {local:.6f}")
        lines.append(f"global_{label}_cm = {joint_error_global(result.states, gt, scale):.6f}")
        if scale != args.no_scale:
            lines.append("per_frame_local_cm = " + " ".join(f"{v:.4f}" for v in per_frame))
    lines.append(f"mean_2d_px = {joint_error_2d(result.states, gt_joints_2d(gt, bundle.camera), bundle.camera):.6f}")
    lines.append(f"alignment = {'rigid' if args.no_scale else 'similarity'}")
    text = "\n".join(lines) + "\n"
    if args.output:
        Path(args.output).write_text(text)
    print(text, end="")
    return 0


def cmd_viz(args) -> int:
    from .viz import skeleton_overlay, write_flow_png
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    src = Path(args.input)
    if src.suffix == ".flo":
        write_flow_png(read_flo(src), out / (src.stem + ".png"))
        print(f"wrote {out / (src.stem + '.png')}")
        return 0
    if args.bundle is None:
        raise FormatError("drawing a result needs --bundle for the camera")
    bundle = read_bundle(args.bundle)
    result: TrackResult = read_result(src)
    for st in result.states:
        mask = bundle.masks[st.frame] if st.frame < len(bundle) else None
        skeleton_overlay(st, bundle.camera, mask).save(out / f"skeleton_{st.frame:04d}.png")
        fl = bundle.flows[st.frame] if st.frame < len(bundle) else None
        if fl is not None:
            write_flow_png(fl, out / f"flow_{st.frame:04d}.png")
    print(f"wrote {len(result)} overlays to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowpose", description="Flow-based monocular 3D body tracking.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render a scripted sequence with ground truth")
    s.add_argument("script", help="motion script path, or 'walk' for the packaged walk")
    s.add_argument("outdir")
    s.add_argument("--noise", type=float, default=None, help="flow noise std in px (overrides script)")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--annotate-noise", type=float, default=0.15,
                   help="uniform perturbation of the manual pose in the written annotation (rad)")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("init", help="three-step initialization of frame 0")
    s.add_argument("bundle")
    s.add_argument("annotation")
    s.add_argument("config", help="config file or '-' for defaults")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_init)

    s = sub.add_parser("track", help="track all frames from an initialized state")
    s.add_argument("bundle")
    s.add_argument("state0")
    s.add_argument("config", help="config file or '-' for defaults")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("-v", "--verbose", action="store_true")
    s.set_defaults(func=cmd_track)

    s = sub.add_parser("eval", help="3D/2D joint errors against the bundle ground truth")
    s.add_argument("result")
    s.add_argument("bundle")
    s.add_argument("--no-scale", action="store_true", help="rigid instead of similarity alignment")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("viz", help="PNG flow images and skeleton overlays")
    s.add_argument("input", help="a .flo file or a result file")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--bundle", help="bundle providing camera, masks and flows for a result")
    s.set_defaults(func=cmd_viz)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # report every failure as one machine-readable line
        print(json.dumps({"error": type(exc).__name__, "command": args.command, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
