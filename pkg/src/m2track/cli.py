"""Command line interface.

Subcommands mirror the tracking pipeline: lift an image, build a cost,
solve a distance map, track a single structure, track a whole tree, evaluate
against a ground-truth mask, and render figure overlays.  Exit codes: 0 ok,
2 configuration problem, 3 unreachable target, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import phantoms
from .eikonal import fast_march
from .geodesic import BacktrackError
from .grid import (load_image, save_field_raw, save_image, save_overlay,
                   save_polyline_csv)
from .pipeline import (ConfigError, CostConfig, TrackingConfig, UnreachableTarget,
                       mask_coverage, mistake_ratio, prepare_problem, track_per_tree,
                       track_single, track_tree_two_runs)
from .stencil import StencilError

EXIT_CONFIG, EXIT_UNREACHABLE, EXIT_NUMERIC = 2, 3, 4


def _parse_point(text):
    parts = [float(v) for v in text.split(",")]
    if len(parts) == 2:
        return (parts[0], parts[1])
    if len(parts) == 3:
        return (parts[0], parts[1], parts[2])
    raise argparse.ArgumentTypeError(f"point {text!r} is not x,y or x,y,theta")


def _load_config(args) -> TrackingConfig:
    if args.config:
        with open(args.config) as f:
            cfg = TrackingConfig.from_json(f.read())
    else:
        cfg = TrackingConfig()
    if getattr(args, "ntheta", None):
        cfg.ntheta = args.ntheta
    if getattr(args, "lam", None) is not None:
        cfg.model.lam = args.lam
    return cfg


def _load_input(args):
    if args.phantom:
        gen = getattr(phantoms, args.phantom, None)
        if gen is None:
            raise ConfigError(f"unknown phantom {args.phantom!r}")
        return gen()
    if not args.image or not os.path.exists(args.image):
        raise ConfigError(f"image {args.image!r} not found")
    return {"image": load_image(args.image)}


def _add_common(sub):
    sub.add_argument("--image", help="grayscale PNG/PGM input")
    sub.add_argument("--phantom", help="synthetic input: straight_tube | s_curve | y_tree")
    sub.add_argument("--config", help="JSON tracking configuration")
    sub.add_argument("--ntheta", type=int, help="orientation count override")
    sub.add_argument("--lam", type=float, help="data-adaptation weight override")
    sub.add_argument("--out", default=".", help="output directory")


def cmd_lift(args):
    data = _load_input(args)
    cfg = _load_config(args)
    problem = prepare_problem(data["image"], cfg)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "score.m2f")
    save_field_raw(problem.score, path)
    print(f"orientation score {problem.grid.shape} -> {path}")
    return 0


def cmd_cost(args):
    data = _load_input(args)
    cfg = _load_config(args)
    problem = prepare_problem(data["image"], cfg)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "cost.m2f")
    save_field_raw(problem.cost, path)
    proj = problem.cost.values.min(axis=2)
    save_image(proj / proj.max(), os.path.join(args.out, "cost_min_theta.png"))
    print(f"cost in [{problem.cost.values.min():.2e}, {problem.cost.values.max():.2f}] -> {path}")
    return 0


def cmd_solve(args):
    data = _load_input(args)
    cfg = _load_config(args)
    problem = prepare_problem(data["image"], cfg)
    from .pipeline import lifted_voxels
    src = []
    for pt in ([_parse_point(args.seed)] if args.seed else [data.get("start", None)]):
        if pt is None:
            raise ConfigError("no seed given (use --seed x,y[,theta])")
        src.extend(lifted_voxels(problem, pt))
    dist = fast_march(src, problem.stencils)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "distance.m2f")
    save_field_raw(dist.field(), path)
    # acceptance order, for front-propagation animations
    from .grid import LiftedField
    order = LiftedField(problem.grid, dist.order.astype(np.float64))
    save_field_raw(order, os.path.join(args.out, "acceptance_order.m2f"))
    print(f"accepted {dist.n_accepted} voxels -> {path}")
    return 0


def cmd_track(args):
    data = _load_input(args)
    cfg = _load_config(args)
    start = _parse_point(args.start) if args.start else data.get("start")
    end = _parse_point(args.end) if args.end else data.get("end")
    if start is None or end is None:
        raise ConfigError("track needs --start and --end (or a phantom with endpoints)")
    geo = track_single(data["image"], cfg, start, end)
    os.makedirs(args.out, exist_ok=True)
    csv = os.path.join(args.out, "track.csv")
    save_polyline_csv(csv, geo.t, geo.points)
    save_overlay(data["image"], os.path.join(args.out, "track.png"),
                 polylines=[(geo.spatial(), (0, 255, 128))],
                 markers=[(tuple(np.asarray(start)[:2]), (255, 64, 64)),
                          (tuple(np.asarray(end)[:2]), (64, 255, 64))])
    print(f"tracked {geo.n} samples, length {geo.length:.3f} -> {csv}")
    return 0


def cmd_tree(args):
    data = _load_input(args)
    cfg = _load_config(args)
    if args.phantom == "y_tree":
        cfg.seeds = [list(data["seed"][:2])]
        cfg.tips = [list(t[:2]) for t in data["tips"]]
        cfg.bifurcations = [list(data["bifurcation"][:2])]
    if not cfg.seeds:
        raise ConfigError("tree tracking needs seeds in the config")
    result = (track_per_tree if args.per_tree else track_tree_two_runs)(data["image"], cfg)
    os.makedirs(args.out, exist_ok=True)
    lines = []
    for i, c in enumerate(result.curves):
        if c.geodesic is None:
            print(f"  {c.tag} {c.target}: FAILED ({c.error})")
            continue
        csv = os.path.join(args.out, f"tree_{i:02d}_{c.tag}.csv")
        save_polyline_csv(csv, c.geodesic.t, c.geodesic.points)
        color = (255, 255, 255) if c.tag == "run1" else (0, 255, 255)
        lines.append((c.geodesic.spatial(), color))
    markers = [((p[0], p[1]), (0, 200, 0)) for p in cfg.seeds]
    markers += [((p[0], p[1]), (200, 0, 200)) for p in cfg.bifurcations]
    markers += [((p[0], p[1]), (255, 0, 0)) for p in cfg.tips]
    save_overlay(data["image"], os.path.join(args.out, "tree.png"),
                 polylines=lines, markers=markers)
    print(f"{result.sweeps} sweeps, {len(result.curves)} curves, "
          f"{len(result.failures())} failures -> {args.out}")
    return 0 if not result.failures() else EXIT_NUMERIC


def cmd_eval(args):
    data = _load_input(args)
    if args.mask:
        mask = load_image(args.mask) > 0.5
    elif "mask" in data:
        mask = data["mask"]
    else:
        raise ConfigError("eval needs --mask or a phantom with ground truth")
    from .grid import load_polyline_csv
    curves = []
    for path in args.tracks:
        t, pts = load_polyline_csv(path)
        from .curves import Geodesic
        curves.append(Geodesic(t=t, points=pts))
    E = mistake_ratio(curves, mask, dilate=args.dilate)
    cov = mask_coverage(curves, mask)
    print(f"mistake ratio E = {E:.4f}   mask coverage = {cov:.4f}")
    return 0


def cmd_figure(args):
    data = _load_input(args)
    os.makedirs(args.out, exist_ok=True)
    img = data["image"]
    save_image(img, os.path.join(args.out, "input.png"))
    if "mask" in data:
        save_image(data["mask"].astype(float), os.path.join(args.out, "mask.png"))
    print(f"figure inputs -> {args.out}")
    return 0


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="m2track",
                                 description="Geodesic tracking of tubular structures "
                                             "in the orientation-lifted domain")
    sub = ap.add_subparsers(dest="cmd", required=True)
    for name, fn in (("lift", cmd_lift), ("cost", cmd_cost), ("solve", cmd_solve),
                     ("track", cmd_track), ("tree", cmd_tree), ("eval", cmd_eval),
                     ("figure", cmd_figure)):
        p = sub.add_parser(name)
        _add_common(p)
        p.set_defaults(fn=fn)
        if name == "solve":
            p.add_argument("--seed", help="source point x,y[,theta]")
        if name == "track":
            p.add_argument("--start", help="start point x,y[,theta]")
            p.add_argument("--end", help="end point x,y[,theta]")
        if name == "tree":
            p.add_argument("--per-tree", action="store_true",
                           help="one sweep per seed group instead of the two-run scheme")
        if name == "eval":
            p.add_argument("--mask", help="ground-truth mask image")
            p.add_argument("--dilate", type=int, default=1)
            p.add_argument("tracks", nargs="*", help="track CSV files")

    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except UnreachableTarget as e:
        print(f"unreachable: {e}", file=sys.stderr)
        return EXIT_UNREACHABLE
    except (BacktrackError, StencilError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
