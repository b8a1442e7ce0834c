"""Command-line driver: generate scenes, calibrate chains, evaluate poses,
and export structure.

Subcommands:
  synth      write a synthetic chain dataset (optionally with ground truth)
  calibrate  run the full pipeline on a dataset directory
  eval       compare a poses file against dataset ground truth
  export     triangulate matched features at given poses and write PLY

`calibrate` flags mirror the pipeline config keys (``--method``,
``--threshold-px``, ...); ``--config`` loads the same keys from a JSON file,
with explicit flags taking precedence.  Exit status is 0 only when the
requested operation completed for the full chain.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

import numpy as np

from . import ba
from .dataio import load_dataset, load_poses, save_dataset
from .chain import align_similarity
from .errors import ChainSfmError
from .pipeline import (
    PipelineConfig,
    _tracks_from_edges,
    export_structure,
    run_pipeline,
)
from .synth import SceneSpec, generate, mutate_overlap


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_spec_flags(p: argparse.ArgumentParser) -> None:
    for f in dataclasses.fields(SceneSpec):
        if f.name == "intrinsics":
            continue
        if f.type == "bool" or isinstance(f.default, bool):
            p.add_argument(_flag(f.name), dest=f.name, default=f.default,
                           action=argparse.BooleanOptionalAction)
        else:
            p.add_argument(_flag(f.name), dest=f.name, default=f.default,
                           type=type(f.default))


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with pipeline config keys")
    for f in dataclasses.fields(PipelineConfig):
        if isinstance(f.default, bool):
            p.add_argument(_flag(f.name), dest=f.name, default=None,
                           action=argparse.BooleanOptionalAction)
        elif f.name == "threads":
            p.add_argument("--threads", dest="threads", default=None,
                           type=int)
        else:
            p.add_argument(_flag(f.name), dest=f.name, default=None,
                           type=type(f.default))


def _build_config(args: argparse.Namespace) -> PipelineConfig:
    values = {}
    if args.config:
        with open(args.config) as f:
            values.update(json.load(f))
    for f in dataclasses.fields(PipelineConfig):
        v = getattr(args, f.name)
        if v is not None:
            values[f.name] = v
    return PipelineConfig.from_dict(values)


def _cmd_synth(args) -> int:
    kwargs = {f.name: getattr(args, f.name)
              for f in dataclasses.fields(SceneSpec)
              if f.name != "intrinsics"}
    spec = SceneSpec(**kwargs)
    if args.overlap:
        spec = mutate_overlap(spec, args.overlap)
    ds, _ = generate(spec)
    if not args.ground_truth:
        ds.gt_poses = None
    save_dataset(ds, args.out)
    print(f"wrote {ds.n_cameras}-camera dataset to {args.out}")
    return 0


def _cmd_calibrate(args) -> int:
    ds = load_dataset(args.dataset)
    config = _build_config(args)
    result = run_pipeline(ds, config, out_dir=args.out)
    rep = result.report
    print(f"selected ratios: {['%.6g' % v for v in rep.lambdas]}")
    if rep.closure_gap is not None:
        print(f"closure gap: {rep.closure_gap:.6g}")
    if rep.ba_initial_cost is not None:
        print(f"refinement cost: {rep.ba_initial_cost:.6g} -> "
              f"{rep.ba_final_cost:.6g}")
    if rep.post_ba_mean_center_error is not None:
        print(f"mean aligned center error: "
              f"pre {rep.pre_ba_mean_center_error:.6g}, "
              f"post {rep.post_ba_mean_center_error:.6g}")
    print(f"outputs in {args.out}")
    return 0


def _cmd_eval(args) -> int:
    ds = load_dataset(args.dataset)
    if ds.gt_poses is None:
        print("dataset has no ground-truth poses", file=sys.stderr)
        return 1
    poses = load_poses(args.poses)
    if len(poses) != len(ds.gt_poses):
        print(f"{len(poses)} poses vs {len(ds.gt_poses)} ground-truth poses",
              file=sys.stderr)
        return 1
    res = align_similarity(np.array([p.center for p in poses]),
                           np.array([p.center for p in ds.gt_poses]))
    print(json.dumps({"mean_center_error": res.mean_error,
                      "max_center_error": res.max_error}, indent=2))
    return 0


def _cmd_export(args) -> int:
    ds = load_dataset(args.dataset)
    poses = load_poses(args.poses)
    if len(poses) != ds.n_cameras:
        print(f"{len(poses)} poses for {ds.n_cameras} cameras",
              file=sys.stderr)
        return 1
    pt_edges = [(((i, a), (j, b)))
                for (i, j), ms in sorted(ds.point_matches.items())
                for a, b in ms]
    ln_edges = [(((i, a), (j, b)))
                for (i, j), ms in sorted(ds.segment_matches.items())
                for a, b in ms]
    pt_nodes, _ = _tracks_from_edges(pt_edges)
    ln_nodes, _ = _tracks_from_edges(ln_edges)
    point_tracks = {tid: [(img, np.asarray(ds.points[img][fid], float))
                          for img, fid in obs]
                    for tid, obs in pt_nodes.items()}
    line_tracks = {tid: [(img, np.asarray(ds.segments[img][fid][0], float),
                          np.asarray(ds.segments[img][fid][1], float))
                         for img, fid in obs]
                   for tid, obs in ln_nodes.items()}
    prob = ba.build_problem(poses, ds.cameras, point_tracks, line_tracks)
    export_structure(prob, line_tracks, ds, args.out)
    print(f"wrote {len(prob.points3d)} points and {len(prob.lines3d)} lines "
          f"to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chainsfm",
        description="Camera chains from bifocal calibrations and "
                    "line coplanarity")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic chain dataset")
    _add_spec_flags(p)
    p.add_argument("--overlap", choices=["remove-trifocal-points",
                                         "remove-trifocal-lines",
                                         "bifocal-only"],
                   help="drop trifocal feature families")
    p.add_argument("--ground-truth", default=True,
                   action=argparse.BooleanOptionalAction,
                   help="include ground-truth poses in the dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("calibrate", help="calibrate a chain dataset")
    p.add_argument("dataset", help="dataset directory")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_calibrate)

    p = sub.add_parser("eval", help="evaluate poses against ground truth")
    p.add_argument("dataset", help="dataset directory with ground truth")
    p.add_argument("--poses", required=True, help="poses text file")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("export", help="triangulate matches at given poses "
                                      "and write PLY")
    p.add_argument("dataset", help="dataset directory")
    p.add_argument("--poses", required=True, help="poses text file")
    p.add_argument("--out", required=True, help="output PLY path")
    p.set_defaults(func=_cmd_export)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ChainSfmError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
