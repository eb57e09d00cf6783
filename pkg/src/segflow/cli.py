"""Command-line entry point: ``segflow {segment,flow,eval,viz,synth}``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 solver failure. Diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import io_eval
from .errors import ConfigError, DataError, SolverError
from .pipeline import estimate_scene_flow, segment_reference
from .solver import write_trace_csv
from .synth import render_sequence, scene_by_name

logger = logging.getLogger("segflow")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_SOLVER = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Argument errors raise instead of exiting with argparse's status 2."""

    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _config_parent() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--config", type=Path, help="YAML run configuration (defaults when omitted)")
    group = parent.add_argument_group("config overrides", "any config key as --section.key VALUE")
    for key in cfgmod.dotted_keys():
        group.add_argument(f"--{key}", dest=f"override:{key}", metavar="VALUE", default=None)
    return parent


def _run_config(args) -> cfgmod.RunConfig:
    cfg = cfgmod.load_config(args.config) if args.config else cfgmod.RunConfig()
    overrides = {
        k.split(":", 1)[1]: v for k, v in vars(args).items() if k.startswith("override:") and v is not None
    }
    return cfgmod.apply_overrides(cfg, overrides) if overrides else cfg


def _intrinsics(args) -> io_eval.IntrinsicsFile:
    path = args.intrinsics or Path(args.sequence) / "intrinsics.txt"
    return io_eval.read_intrinsics(path)


def _load_window(args, cfg: cfgmod.RunConfig):
    intr = _intrinsics(args)
    frames = io_eval.load_sequence(
        args.sequence, intr, cfg.energy.gaussian_sigma, cfg.pipeline.start, cfg.pipeline.window
    )
    return frames, intr.camera


def cmd_segment(args) -> int:
    cfg = _run_config(args)
    frames, K = _load_window(args, cfg)
    seg, adj = segment_reference(frames, K, cfg.pipeline_config())
    io_eval.write_label_png(args.out, seg.labels)
    print(f"{seg.n_segments} segments, {adj.n_pairs} adjacency pairs -> {args.out}")
    return EXIT_OK


def cmd_flow(args) -> int:
    cfg = _run_config(args)
    frames, K = _load_window(args, cfg)
    result = estimate_scene_flow(frames, K, cfg.pipeline_config())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    flow = result.flow
    valid = flow.valid[None] & np.all(np.isfinite(flow.flow2d), axis=-1)
    io_eval.write_flow_3d(out / "flow.sf3d", flow.displacement, valid)
    for i, t in enumerate(flow.targets):
        idx = frames[t].index
        io_eval.write_flow_2d(out / f"flow_{idx:04d}.flo", flow.flow2d[i])
        if args.png:
            io_eval.write_png(out / f"flow_{idx:04d}.png", io_eval.colorize_flow(flow.flow2d[i], args.max_flow))
    io_eval.write_label_png(out / "segments.png", result.segmentation.labels)
    np.savetxt(out / "motion_labels.txt", result.motion_labels, fmt="%d")
    cfgmod.save_config(cfg, out / "config.yaml")
    if args.trace:
        write_trace_csv(result.trace, args.trace)
    print(
        f"{result.segmentation.n_segments} segments, {len(set(result.motion_labels.tolist()))} motion groups, "
        f"{len(result.trace)} LM iterations -> {out}"
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    flow = io_eval.read_flow_2d(args.flow)
    gt = io_eval.read_flow_2d(args.gt)
    mean, epe = io_eval.compute_epe(flow, gt)
    print(f"mean EPE {mean:.6f}")
    if args.map:
        np.save(args.map, epe)
    return EXIT_OK


def cmd_viz(args) -> int:
    flow = io_eval.read_flow_2d(args.flow)
    io_eval.write_png(args.out, io_eval.colorize_flow(flow, args.max_flow))
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = scene_by_name(args.scene)
    if args.intensity_noise or args.depth_noise or args.seed is not None:
        spec = spec.with_noise(args.intensity_noise, args.depth_noise, args.seed)
    scene = render_sequence(spec)
    out = Path(args.out)
    intr = io_eval.IntrinsicsFile(spec.camera, args.depth_scale)
    indices = io_eval.write_sequence(out, scene.intensity, scene.depth, intr)
    gt = scene.flow
    valid = gt.valid[None] & np.all(np.isfinite(gt.flow2d), axis=-1)
    io_eval.write_flow_3d(out / "gt_flow.sf3d", gt.displacement, valid)
    for i, t in enumerate(gt.targets):
        io_eval.write_flow_2d(out / f"gt_flow_{indices[t]:04d}.flo", gt.flow2d[i])
    io_eval.write_label_png(out / "gt_bodies.png", scene.labels)
    cfg = cfgmod.RunConfig()
    cfg.segmentation.min_size = spec.min_size
    cfg.pipeline.window = spec.n_frames
    cfgmod.save_config(cfg, out / "config.yaml")
    print(f"{spec.name}: {spec.n_frames} frames -> {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="segflow", description="Piecewise-rigid multiframe RGB-D scene flow.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v info, -vv debug")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    parent = _config_parent()

    p = sub.add_parser("segment", parents=[parent], help="segment the reference frame and write a label image")
    p.add_argument("sequence", help="directory with colorNNNN.png / depthNNNN.png")
    p.add_argument("--intrinsics", type=Path, help="intrinsics file (default: <sequence>/intrinsics.txt)")
    p.add_argument("--out", required=True, help="output label PNG (label + 1, 0 = discarded)")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("flow", parents=[parent], help="estimate scene flow over one temporal window")
    p.add_argument("sequence", help="directory with colorNNNN.png / depthNNNN.png")
    p.add_argument("--intrinsics", type=Path, help="intrinsics file (default: <sequence>/intrinsics.txt)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--png", action="store_true", help="also write color-coded flow images")
    p.add_argument("--max-flow", type=float, default=None, help="fixed normalizer for --png")
    p.add_argument("--trace", help="write the joint solve's energy trace as CSV")
    p.set_defaults(func=cmd_flow)

    p = sub.add_parser("eval", help="mean end-point error between two .flo files")
    p.add_argument("flow")
    p.add_argument("gt")
    p.add_argument("--map", help="write the per-pixel EPE map as .npy (NaN where undefined)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("viz", help="color-code a .flo file")
    p.add_argument("flow")
    p.add_argument("--out", required=True)
    p.add_argument("--max-flow", type=float, default=None)
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("synth", help="write a catalog scene with ground truth")
    p.add_argument("scene", help="S1..S5 or a descriptive scene name")
    p.add_argument("--out", required=True)
    p.add_argument("--intensity-noise", type=float, default=0.0)
    p.add_argument("--depth-noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--depth-scale", type=float, default=5000.0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        sys.stderr.write(str(e))
        return EXIT_USAGE
    logging.basicConfig(
        level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)],
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except SolverError as e:
        print(f"solver error: {e}", file=sys.stderr)
        return EXIT_SOLVER
    except OSError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
