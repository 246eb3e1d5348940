"""Command line entry point: ``pillarnet <command> ...``.

Thread count for sparse convolutions comes from ``PILLARNET_THREADS``; all
randomness comes from explicit seeds.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import List, Optional


from . import harness
from .head import nms_rotated, read_jsonl, write_jsonl
from .network import PillarNet
from .pillars import load_points, pillarize
from .sparse2d import load_weights

log = logging.getLogger("pillarnet")


def _load_model(cfg: harness.PipelineConfig, weights: Optional[str]) -> PillarNet:
    if weights:
        return PillarNet(cfg.model, load_weights(weights))
    return PillarNet.random(cfg.model, cfg.weight_seed)


def cmd_pillarize(args) -> int:
    cfg = harness.PipelineConfig.load(args.config)
    pc = load_points(args.cloud, cfg.points_channels)
    model = _load_model(cfg, args.weights)
    grid = pillarize(pc, cfg.spec, model.pillar_params(), stride=model.input_stride)
    with open(args.out, "w") as f:
        json.dump(grid.to_json(), f)
    log.info("%d points -> %d pillars", len(pc), len(grid))
    return 0


def cmd_forward(args) -> int:
    cfg = harness.PipelineConfig.load(args.config)
    model = _load_model(cfg, args.weights)
    if args.cloud:
        source = load_points(args.cloud, cfg.points_channels)
        scene_id = args.cloud
    else:
        source = harness.generate_scene(args.seed, cfg.spec, args.n_objects, args.clutter)
        scene_id = f"seed-{args.seed}"
    res = harness.run_pipeline(source, cfg, model)
    write_jsonl(args.out, res.detections, scene_id)
    log.info("%d detections; timings (ms) %s", len(res.detections),
             {k: round(v, 2) for k, v in res.timings.items()})
    return 0


def cmd_bench(args) -> int:
    with open(args.grid) as f:
        grid = json.load(f)
    entries = grid["configs"] if isinstance(grid, dict) else grid
    seed = grid.get("seed", args.seed) if isinstance(grid, dict) else args.seed
    rows = harness.bench(entries, seed=seed, runs=args.runs, warmup=args.warmup)
    harness.write_csv(args.out, rows)
    for r in rows:
        log.info("%s total %.1f ms", r["config"], r["total_ms"])
    return 0


def cmd_losscheck(args) -> int:
    report = harness.losscheck_report(args.seed, args.kind, args.lam)
    with open(args.out, "w") as f:
        json.dump(report, f, indent=2)
    log.info("losscheck %s", "PASS" if report["pass"] else "FAIL")
    return 0 if report["pass"] else 1


def cmd_nms(args) -> int:
    dets = read_jsonl(args.inp)
    with open(args.inp) as f:
        first = f.readline()
    scene_id = json.loads(first).get("scene_id") if first.strip() else None
    if args.mode == "class_specific":
        thr = [float(v) for v in args.iou_thresh.split(",")]
        thr = thr[0] if len(thr) == 1 else thr
    else:
        thr = float(args.iou_thresh)
    kept = nms_rotated(dets, args.mode, args.score_thresh, thr)
    write_jsonl(args.out, kept, scene_id)
    log.info("%d -> %d detections", len(dets), len(kept))
    return 0


def cmd_curves(args) -> int:
    if not args.fig5:
        log.error("only --fig5 curves are available")
        return 2
    rows = harness.interplay_curves()
    harness.write_csv(args.out, rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pillarnet")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pillarize", help="point file -> sparse pillar grid JSON")
    s.add_argument("cloud")
    s.add_argument("--config", required=True)
    s.add_argument("--weights")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pillarize)

    s = sub.add_parser("forward", help="run the full detector and write detections JSONL")
    s.add_argument("cloud", nargs="?")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n-objects", type=int, default=8)
    s.add_argument("--clutter", type=float, default=0.02)
    s.add_argument("--config", required=True)
    s.add_argument("--weights")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_forward)

    s = sub.add_parser("bench", help="timing / active-site report over a config grid")
    s.add_argument("--grid", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--runs", type=int, default=20)
    s.add_argument("--warmup", type=int, default=3)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("losscheck", help="loss terms + finite-difference gradient check")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--kind", default="DIoU", choices=("IoU", "GIoU", "DIoU"))
    s.add_argument("--lam", type=float, default=0.25)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_losscheck)

    s = sub.add_parser("nms", help="rotated NMS over a detections JSONL file")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--mode", default="class_agnostic", choices=("class_agnostic", "class_specific"))
    s.add_argument("--score-thresh", type=float, default=0.1)
    s.add_argument("--iou-thresh", default="0.2",
                   help="scalar, or comma-separated per-class list for class_specific")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_nms)

    s = sub.add_parser("curves", help="IoU / orientation interplay data as CSV")
    s.add_argument("--fig5", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_curves)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
