"""Command-line front end.

    zbufdepth losses     --scene-seed 3 --occlusion zbuffer
    zbufdepth gradcheck  --scene-seed 3
    zbufdepth zbuf-stats --scene-seed 3
    zbufdepth bench      --threads 4

Exit codes: 0 success, 1 gradient check failed, 2 configuration error,
3 malformed input file, 4 internal invariant violation.
Setting ``ZBUF_DETERMINISTIC=1`` forces the single-threaded scatter.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import geometry as geo
from . import gradcheck as gc
from . import imageio
from . import losses as L
from . import scene as sc
from .errors import FormatError, InternalError, InvalidInput
from .zbuffer import cell_multiplicity, zbuffer_parallel, zbuffer_serial_oracle

log = logging.getLogger("zbufdepth")

SCHEMA_VERSION = 1
EXIT_GRADCHECK = 1
EXIT_CONFIG = 2
EXIT_FORMAT = 3
EXIT_INTERNAL = 4
GRADCHECK_TOL = 1e-4
BENCH_SOFT_TARGET_MS = 100.0

DEFAULT_KIND = {"losses": "kitti", "gradcheck": "smooth", "zbuf-stats": "kitti",
                "bench": "kitti"}


def _deterministic_forced():
    return os.environ.get("ZBUF_DETERMINISTIC", "") == "1"


def _scatter_mode(threads):
    if threads > 1 and not _deterministic_forced():
        return "threaded"
    return "deterministic"


# --- inputs ------------------------------------------------------------------

class Inputs:
    """Two frames plus pose/intrinsics, and ground truth when generated."""

    def __init__(self, frame_t, frame_t1, pose, intr, gt=None, gt_reverse=None, source=None):
        self.frame_t = frame_t
        self.frame_t1 = frame_t1
        self.pose = pose
        self.intr = intr
        self.gt = gt
        self.gt_reverse = gt_reverse
        self.source = source or {}


def _load_inputs(args, need_reverse_gt=False):
    if args.frames is not None:
        frame_t, frame_t1, pose, intr = imageio.load_frames(args.frames)
        if args.noise:
            raise InvalidInput("--noise applies to generated scenes only")
        return Inputs(frame_t, frame_t1, pose, intr, source={"frames": str(args.frames)})
    kind = args.scene_kind or DEFAULT_KIND[args.command]
    seed = 0 if args.scene_seed is None else args.scene_seed
    spec = sc.RECIPES[kind](seed)
    gt = sc.generate(spec)
    gt_rev = sc.generate(sc.swapped(spec)) if need_reverse_gt else None
    noise = spec.noise if args.noise is None else args.noise
    if noise < 0:
        raise InvalidInput("--noise must be >= 0")
    d_t = sc.perturb_depth(gt, noise, seed, "t")
    d_t1 = sc.perturb_depth(gt, noise, seed + 1, "t1")
    frame_t, frame_t1 = gt.frames(d_t, d_t1)
    return Inputs(frame_t, frame_t1, gt.pose, gt.intrinsics, gt, gt_rev,
                  {"scene_kind": kind, "scene_seed": seed, "noise": noise})


def _weights(args):
    return L.LossWeights(args.lambda1, args.lambda2, args.lambda3, args.lambda4)


# --- commands ----------------------------------------------------------------

def _direction_report(name, e):
    return {
        "direction": name,
        "values": e.values,
        "contributing_counts": e.counts,
        "zbuffer_iterations": e.zbuffer_iterations,
        "negative_in_frame": len(e.negative),
        "excluded": e.exclusions,
    }


def cmd_losses(args):
    inp = _load_inputs(args, need_reverse_gt=True)
    weights = _weights(args)
    breakdown = L.total_loss(inp.frame_t, inp.frame_t1, inp.pose, inp.intr, weights,
                             args.occlusion, args.heuristic_tol, _scatter_mode(args.threads))
    fwd, bwd = breakdown.directions
    excluded = {k: fwd.exclusions[k] + bwd.exclusions[k] for k in fwd.exclusions}
    report = {
        "command": "losses",
        "input": inp.source,
        "occlusion_mode": L.OcclusionMode(args.occlusion).value,
        "weights": weights.as_dict(),
        "losses": breakdown.to_dict(),
        "zbuffer_iterations": [fwd.zbuffer_iterations, bwd.zbuffer_iterations],
        "negative_set_size": len(fwd.negative) + len(bwd.negative),
        "excluded": excluded,
        "directions": [_direction_report("t->t1", fwd), _direction_report("t1->t", bwd)],
    }
    if inp.gt is not None:
        occ = [int(np.count_nonzero(g.landing_t_to_t1 & ~g.visible_t_to_t1))
               for g in (inp.gt, inp.gt_reverse)]
        report["ground_truth"] = {
            "occluded": {"t->t1": occ[0], "t1->t": occ[1], "total": sum(occ)},
            "negative_set": int(np.count_nonzero(inp.gt.negative_set_t_to_t1))
            + int(np.count_nonzero(inp.gt_reverse.negative_set_t_to_t1)),
        }
    return report, 0


def cmd_gradcheck(args):
    inp = _load_inputs(args)
    weights = _weights(args)
    analytic = gc.grad_total_wrt_depths(inp.frame_t, inp.frame_t1, inp.pose, inp.intr,
                                        weights, args.occlusion, args.heuristic_tol)
    if args.corrupt_gradient:
        analytic = tuple(gc.GradientMap(g.values + args.corrupt_gradient, g.validity)
                         for g in analytic)
    rep = gc.finite_diff_check(inp.frame_t, inp.frame_t1, inp.pose, inp.intr, weights,
                               step=args.step, skip_margin=args.skip_margin,
                               occlusion_mode=args.occlusion,
                               heuristic_tol=args.heuristic_tol, analytic=analytic)
    passed = rep.max_relative_error < GRADCHECK_TOL
    report = {
        "command": "gradcheck",
        "input": inp.source,
        "occlusion_mode": L.OcclusionMode(args.occlusion).value,
        "weights": weights.as_dict(),
        "step": args.step,
        "skip_margin": args.skip_margin,
        "tolerance": GRADCHECK_TOL,
        "relative_error_floor": gc.REL_ERROR_FLOOR,
        **rep.to_dict(),
        "passed": passed,
    }
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for name, g in zip(("t", "t1"), analytic):
            (out / f"grad_depth_{name}.pfm").write_bytes(imageio.write_gradient(g))
    return report, 0 if passed else EXIT_GRADCHECK


def _histogram(raster, cell_count):
    counts = np.bincount(cell_multiplicity(raster, cell_count))
    return {str(m): int(c) for m, c in enumerate(counts) if m > 0 and c}


def cmd_zbuf_stats(args):
    inp = _load_inputs(args)
    mode = _scatter_mode(args.threads)
    directions = []
    for name, frame, pose in (("t->t1", inp.frame_t, geo.invert(inp.pose)),
                              ("t1->t", inp.frame_t1, inp.pose)):
        _, _, outcome = geo.splat(frame.depth, pose, inp.intr)
        cand = outcome.in_frame_positive
        d, k = outcome.depth[cand], outcome.raster_index[cand]
        res = zbuffer_parallel(d, k, inp.intr.cell_count, mode=mode, threads=args.threads)
        ref = zbuffer_serial_oracle(d, k, inp.intr.cell_count)
        agree = (np.array_equal(res.visible, ref.visible)
                 and np.array_equal(res.zbuffer, ref.zbuffer))
        if not agree:
            raise InternalError(f"{name}: parallel z-buffer disagrees with the oracle")
        directions.append({
            "direction": name,
            "points": int(len(d)),
            "iterations": res.iterations,
            "round_sizes": list(res.round_sizes),
            "visible": int(len(res.visible)),
            "multiplicity_histogram": _histogram(k, inp.intr.cell_count),
            "agrees_with_oracle": agree,
        })
    report = {"command": "zbuf-stats", "input": inp.source, "scatter_mode": mode,
              "threads": args.threads, "directions": directions}
    return report, 0


def bench_frame(seed):
    """Full 352x1216 frame: one point per pixel, splatted with a wrap-around
    stereo shift so every pixel yields exactly one in-range point."""
    gt = sc.generate(sc.kitti_like_spec(seed), visibility=False)
    intr = gt.intrinsics
    jj, ii = np.mgrid[0:intr.height, 0:intr.width]
    depth = gt.depth_t.values
    shift = intr.fx * sc.KITTI_BASELINE / depth
    cols = np.mod(geo.round_half_away(ii - shift).astype(np.int64), intr.width)
    raster = (jj * intr.width + cols).reshape(-1)
    return depth.reshape(-1).copy(), raster, intr.cell_count


def _time(fn, repeats):
    times = []
    result = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        result = fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times), result


def cmd_bench(args):
    seed = 0 if args.scene_seed is None else args.scene_seed
    depths, raster, cells = bench_frame(seed)
    n = len(depths)
    # warm up the compiled kernels outside the timed region
    zbuffer_parallel(depths[:8], raster[:8], cells)
    zbuffer_parallel(depths[:8], raster[:8], cells, mode="threaded", threads=1)

    oracle_t, ref = _time(lambda: zbuffer_serial_oracle(depths, raster, cells), args.repeats)
    runs = []
    configs = [("deterministic", 1)]
    if not _deterministic_forced():
        configs += [("threaded", t) for t in sorted({1, args.threads})]
    for mode, threads in configs:
        med, res = _time(lambda: zbuffer_parallel(depths, raster, cells, mode=mode,
                                                  threads=threads), args.repeats)
        agree = bool(np.array_equal(res.visible, ref.visible))
        if not agree:
            raise InternalError(f"{mode}/{threads}: visible set disagrees with the oracle")
        runs.append({"mode": mode, "threads": threads, "median_ms": med * 1e3,
                     "points_per_second": n / med, "iterations": res.iterations,
                     "visible": int(len(res.visible)), "agrees_with_oracle": agree})
    single = runs[0]["median_ms"]
    warnings = []
    if single > BENCH_SOFT_TARGET_MS:
        warnings.append(f"single-threaded z-buffer took {single:.1f} ms "
                        f"(soft target {BENCH_SOFT_TARGET_MS:.0f} ms)")
        log.warning(warnings[-1])
    report = {
        "command": "bench",
        "input": {"scene_kind": "kitti", "scene_seed": seed},
        "frame_points": n,
        "repeats": args.repeats,
        "oracle": {"median_ms": oracle_t * 1e3, "points_per_second": n / oracle_t},
        "runs": runs,
        "visible_sets_identical": all(r["agrees_with_oracle"] for r in runs),
        "warnings": warnings,
    }
    return report, 0


COMMANDS = {"losses": cmd_losses, "gradcheck": cmd_gradcheck,
            "zbuf-stats": cmd_zbuf_stats, "bench": cmd_bench}


# --- output ------------------------------------------------------------------

def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _text_lines(obj, prefix=""):
    if isinstance(obj, dict):
        for k, v in obj.items():
            yield from _text_lines(v, f"{prefix}{k}." if prefix or k else "")
    elif isinstance(obj, list) and obj and isinstance(obj[0], dict):
        for i, v in enumerate(obj):
            yield from _text_lines(v, f"{prefix}{i}.")
    else:
        yield f"{prefix.rstrip('.')}: {obj}"


def render_report(report, fmt):
    doc = {"schema_version": SCHEMA_VERSION, **_jsonable(report)}
    if fmt == "json":
        return json.dumps(doc, indent=2)
    return "\n".join(_text_lines(doc))


# --- argument parsing --------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    src = common.add_mutually_exclusive_group()
    src.add_argument("--scene-seed", type=int, help="generate a synthetic scene from this seed")
    src.add_argument("--frames", type=Path, help="directory holding a frame pair")
    common.add_argument("--scene-kind", choices=sorted(sc.RECIPES),
                        help="synthetic scene recipe (default depends on the command)")
    common.add_argument("--occlusion", choices=[m.value for m in L.OcclusionMode],
                        default="zbuffer")
    defaults = L.LossWeights()
    for i, name in enumerate(L.TERMS, start=1):
        common.add_argument(f"--lambda{i}", type=float, default=getattr(defaults, name),
                            help=f"weight of the {name} term")
    common.add_argument("--heuristic-tol", type=float, default=0.0,
                        help="depth tolerance of the heuristic filter (m)")
    common.add_argument("--noise", type=float, default=None,
                        help="uniform depth noise amplitude for generated scenes (m)")
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--out", type=Path, help="directory for report files")
    common.add_argument("--format", choices=("json", "text"), default="json")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="zbufdepth", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("losses", parents=[common], help="evaluate the loss stack")
    g = sub.add_parser("gradcheck", parents=[common],
                       help="check analytic depth gradients against finite differences")
    g.add_argument("--step", type=float, default=1e-4)
    g.add_argument("--skip-margin", type=float, default=1e-3)
    g.add_argument("--corrupt-gradient", type=float, default=0.0, help=argparse.SUPPRESS)
    sub.add_parser("zbuf-stats", parents=[common], help="z-buffer round statistics")
    b = sub.add_parser("bench", parents=[common], help="time the z-buffer on a full frame")
    b.add_argument("--repeats", type=int, default=5)
    return parser


def _validate(args):
    if args.threads < 1:
        raise InvalidInput("--threads must be >= 1")
    if args.frames is not None and not args.frames.is_dir():
        raise InvalidInput(f"--frames {args.frames} is not a directory")
    if args.command == "gradcheck" and args.step <= 0:
        raise InvalidInput("--step must be positive")
    if args.command == "bench" and args.repeats < 1:
        raise InvalidInput("--repeats must be >= 1")


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _validate(args)
        report, code = COMMANDS[args.command](args)
    except InvalidInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except InternalError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    text = render_report(report, args.format)
    print(text)
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        suffix = "json" if args.format == "json" else "txt"
        (args.out / f"{args.command}.{suffix}").write_text(text + "\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
