"""Command-line entry points: simulate, track, train, eval, plot.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric failure.
Log verbosity comes from the BPTRACK_LOG environment variable.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from .errors import (
    ConfigInvalid,
    DegenerateProblem,
    EmptyWeights,
    FormatVersionMismatch,
    MissingWeights,
    NonFiniteLoss,
    NotPositiveDefinite,
    SchemaMismatch,
    ShapeMismatch,
    TooLarge,
)
from .evaluation import amota_variant, clear_mot, false_track_count
from .fileio import RunConfig, load_scene, load_tracks, save_scene, save_tracks
from .neural import NetMeta, build_network, load_weights, save_weights
from .numerics import Rng
from .simulator import simulate_scene
from .tracker import MODES, TrackerConfig, run_scene
from .training import joint_train, pretrain_motion
from .fileio import network_meta_from_dict

log = logging.getLogger("bptrack")

CONFIG_ERRORS = (ConfigInvalid,)
DATA_ERRORS = (SchemaMismatch, FormatVersionMismatch, MissingWeights, ShapeMismatch,
               OSError)
NUMERIC_ERRORS = (NotPositiveDefinite, NonFiniteLoss, EmptyWeights, DegenerateProblem,
                  TooLarge)


def _setup_logging():
    level = os.environ.get("BPTRACK_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _load_run_config(path) -> RunConfig:
    if path is None:
        return RunConfig.defaults()
    return RunConfig.from_file(path)


def _net_meta(cfg: RunConfig) -> NetMeta:
    meta = network_meta_from_dict(dict(cfg.network))
    # scale the network inputs to the scenario's coordinate ranges
    if "pos_scale" not in cfg.network:
        xmin, xmax, _, _ = cfg.scenario.region
        meta.pos_scale = 0.5 * (xmax - xmin)
    if "vel_scale" not in cfg.network:
        meta.vel_scale = cfg.scenario.vel_limit
    if "map_channels" not in cfg.network:
        meta.map_channels = cfg.scenario.map_channels
    return meta


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    cfg = _load_run_config(args.config)
    scenario = cfg.scenario
    if args.frames is not None:
        kwargs = {**scenario.__dict__, "frames": args.frames}
        scenario = type(scenario)(**kwargs)
    scene = simulate_scene(scenario, args.seed)
    save_scene(scene, args.out)
    print(f"wrote {args.out} ({len(scene.frames)} frames)")
    return 0


def _tracker_config(cfg: RunConfig, scene, args) -> TrackerConfig:
    overrides = dict(cfg.tracker)
    overrides["mode"] = args.mode
    if args.strategy:
        overrides["strategy"] = args.strategy
    if args.particles:
        overrides["particle_count"] = args.particles
    if args.neutral_factors:
        overrides["force_neutral_factors"] = True
    if args.no_affinity:
        overrides["use_affinity"] = False
    if args.no_fpr:
        overrides["use_fpr"] = False
    return TrackerConfig.from_scenario(scene.config, **overrides)


def cmd_track(args) -> int:
    cfg = _load_run_config(args.config)
    scene = load_scene(args.scene)
    tracker_cfg = _tracker_config(cfg, scene, args)
    net = None
    if tracker_cfg.mode != "mb":
        if args.weights is None:
            raise MissingWeights(f"mode {tracker_cfg.mode!r} requires --weights")
        net = load_weights(args.weights)
    estimates, _diags = run_scene(scene, tracker_cfg, net, args.seed)
    meta = {"mode": tracker_cfg.mode, "seed": args.seed, "scene": Path(args.scene).name,
            "strategy": tracker_cfg.strategy}
    save_tracks(estimates, args.out, meta)
    total = sum(len(f) for f in estimates)
    print(f"wrote {args.out} ({total} track records)")
    return 0


def _scene_paths(directory) -> list:
    paths = sorted(Path(directory).glob("*.json"))
    if not paths:
        raise SchemaMismatch(f"no scene files (*.json) in {directory}")
    return paths


def cmd_train(args) -> int:
    cfg = _load_run_config(args.config)
    scenes = [load_scene(p) for p in _scene_paths(args.scenes)]
    meta = _net_meta(cfg)
    started = time.time()
    if args.stage == "pretrain":
        motion, history = pretrain_motion(scenes, meta, cfg.training, args.seed)
        net = build_network(meta, Rng(args.seed).substream("network"))
        net.motion = motion
    else:
        if args.init is None:
            raise ConfigInvalid("--stage joint requires --init weights")
        net = load_weights(args.init)
        tracker_cfg = TrackerConfig.from_scenario(
            scenes[0].config, mode="ne", **cfg.tracker)
        net, history = joint_train(scenes, net, cfg.training, tracker_cfg, args.seed)
    save_weights(net, args.out)
    log_path = args.log or (str(args.out) + ".trainlog.txt")
    wall = time.time() - started
    with open(log_path, "w", encoding="utf-8") as fh:
        fh.write(f"stage={args.stage} seed={args.seed} scenes={len(scenes)}\n")
        for row in history:
            cols = " ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}"
                            for k, v in row.items())
            fh.write(cols + "\n")
        fh.write(f"wall_time_s={wall:.1f}\n")
    print(f"wrote {args.out} (log: {log_path}, {wall:.1f}s)")
    return 0


def _track_frames_for_eval(track_frames):
    return [[(r.id, r.state[:2]) for r in frame] for frame in track_frames]


def _gt_frames_for_eval(scene):
    return [[(o.track_id, o.state[:2]) for o in frame.gt] for frame in scene.frames]


def _scored_frames(track_frames):
    # confidence for the recall sweep: existence times blended detector score
    # (the paper-side fusion rule is unspecified; this surrogate is flagged in
    # the report)
    return [[(r.id, r.state[:2], r.existence * r.score) for r in frame]
            for frame in track_frames]


def cmd_eval(args) -> int:
    track_frames, meta = load_tracks(args.tracks)
    scene = load_scene(args.scene)
    if len(track_frames) != len(scene.frames):
        raise SchemaMismatch("tracks and scene frame counts differ")
    est = _track_frames_for_eval(track_frames)
    gt = _gt_frames_for_eval(scene)
    score = clear_mot(est, gt, args.gate)
    amota, table = amota_variant(_scored_frames(track_frames), gt, args.gate)
    fp_tracks = false_track_count(est, score)
    lines = [
        f"tracks: {args.tracks}",
        f"scene: {args.scene}",
        f"mode: {meta.get('mode', '?')}",
        f"gate_m: {args.gate}",
        f"MOTA: {score.mota:.4f}" if not math.isnan(score.mota) else "MOTA: undefined (empty ground truth)",
        f"AMOTA_variant: {amota:.4f}" if not math.isnan(amota) else "AMOTA_variant: undefined",
        f"TP: {score.tp}  FP: {score.fp}  FN: {score.fn}",
        f"IDS: {score.id_switches}  Frag: {score.fragmentations}",
        f"false_tracks: {fp_tracks}",
        f"mean_position_error_m: {score.mean_position_error:.4f}"
        if score.position_errors else "mean_position_error_m: n/a",
        "note: sweep confidence = existence * blended detector score (declared surrogate)",
    ]
    report = "\n".join(lines) + "\n"
    with open(args.report, "w", encoding="utf-8") as fh:
        fh.write(report)
    if args.json:
        doc = {
            "format": "bptrack-report",
            "version": 1,
            "mota": None if math.isnan(score.mota) else score.mota,
            "amota_variant": None if math.isnan(amota) else amota,
            "tp": score.tp, "fp": score.fp, "fn": score.fn,
            "ids": score.id_switches, "frag": score.fragmentations,
            "false_tracks": fp_tracks,
            "recall_sweep": [
                {"target": t, "recall": r,
                 "threshold": None if (isinstance(th, float) and math.isnan(th)) else th,
                 "accuracy": a}
                for t, r, th, a in table
            ],
            "confidence_rule": "existence*score (surrogate)",
        }
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, sort_keys=True, indent=1)
            fh.write("\n")
    print(report, end="")
    return 0


CSV_HEADER = "frame,n_gt,n_est,tp,fp,fn,mean_position_error"


def cmd_plot(args) -> int:
    track_frames, _meta = load_tracks(args.tracks)
    scene = load_scene(args.scene)
    est = _track_frames_for_eval(track_frames)
    gt = _gt_frames_for_eval(scene)
    if args.out_csv:
        score = clear_mot(est, gt, args.gate)
        rows = [CSV_HEADER]
        err_idx = 0
        for k, (e_frame, g_frame, matches) in enumerate(
                zip(est, gt, score.frame_matches)):
            n_match = len(matches)
            errs = score.position_errors[err_idx : err_idx + n_match]
            err_idx += n_match
            mean_err = f"{np.mean(errs):.4f}" if errs else ""
            rows.append(
                f"{k},{len(g_frame)},{len(e_frame)},{n_match},"
                f"{len(e_frame) - n_match},{len(g_frame) - n_match},{mean_err}"
            )
        with open(args.out_csv, "w", encoding="utf-8") as fh:
            fh.write("\n".join(rows) + "\n")
    if args.out_svg:
        with open(args.out_svg, "w", encoding="utf-8") as fh:
            fh.write(_tracks_svg(scene, track_frames))
    print(f"wrote {args.out_svg or ''} {args.out_csv or ''}".strip())
    return 0


def _tracks_svg(scene, track_frames, size: int = 640) -> str:
    xmin, xmax, ymin, ymax = scene.config.region

    def sx(x):
        return (x - xmin) / (xmax - xmin) * size

    def sy(y):
        return size - (y - ymin) / (ymax - ymin) * size

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect x="0" y="0" width="{size}" height="{size}" fill="white" '
        'stroke="black"/>',
    ]
    gt_tracks: dict = {}
    for frame in scene.frames:
        for obj in frame.gt:
            gt_tracks.setdefault(obj.track_id, []).append(obj.state[:2])
    for tid, points in sorted(gt_tracks.items()):
        path = " ".join(f"{sx(p[0]):.2f},{sy(p[1]):.2f}" for p in points)
        parts.append(f'<polyline points="{path}" fill="none" stroke="black" '
                     'stroke-width="1.5"/>')
    est_tracks: dict = {}
    for frame in track_frames:
        for rec in frame:
            est_tracks.setdefault(rec.id, []).append(rec.state[:2])
    for tid, points in sorted(est_tracks.items()):
        path = " ".join(f"{sx(p[0]):.2f},{sy(p[1]):.2f}" for p in points)
        parts.append(f'<polyline points="{path}" fill="none" stroke="darkorange" '
                     'stroke-width="1.2" stroke-dasharray="5,3"/>')
        end = points[-1]
        parts.append(f'<rect x="{sx(end[0]) - 3:.2f}" y="{sy(end[1]) - 3:.2f}" '
                     'width="6" height="6" fill="none" stroke="darkorange" '
                     'stroke-dasharray="2,2"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bptrack",
                                     description="belief-propagation multiobject tracker")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic scene file")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("track", help="run the tracker over a scene file")
    p.add_argument("--scene", required=True)
    p.add_argument("--weights", default=None)
    p.add_argument("--mode", choices=MODES, default="mb")
    p.add_argument("--strategy", choices=("mean-only", "object-sp", "joint-sp"),
                   default=None)
    p.add_argument("--particles", type=int, default=None)
    p.add_argument("--neutral-factors", action="store_true")
    p.add_argument("--no-affinity", action="store_true")
    p.add_argument("--no-fpr", action="store_true")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("train", help="pretrain the motion model or jointly train")
    p.add_argument("--scenes", required=True, help="directory of scene files")
    p.add_argument("--stage", choices=("pretrain", "joint"), required=True)
    p.add_argument("--init", default=None, help="initial weights (joint stage)")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--log", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a tracks file against its scene")
    p.add_argument("--tracks", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--json", default=None)
    p.add_argument("--gate", type=float, default=2.0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="track overlay SVG and per-frame CSV curves")
    p.add_argument("--tracks", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out-svg", default=None)
    p.add_argument("--out-csv", default=None)
    p.add_argument("--gate", type=float, default=2.0)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CONFIG_ERRORS as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NUMERIC_ERRORS as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
