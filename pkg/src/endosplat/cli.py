"""Command line entry points: ``track``, ``eval`` and ``synth``.

Set ENDOSPLAT_LOG_LEVEL (DEBUG, INFO, WARNING, ...) to control logging.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import io
from .config import Config, ConfigError
from .errors import ContractViolation, FrameUnusableError, NonFiniteGradientError, SequenceFormatError
from .evaluation import SCRIPTS, evaluate, generate
from .evaluation.metrics import survival_threshold
from .pipeline import OnlineTracker, TrackSet

logger = logging.getLogger("endosplat")

LOG_ENV = "ENDOSPLAT_LOG_LEVEL"

# settings used for synthetic evaluation: one Gaussian per pixel so that a
# query binds to a Gaussian seeded at (or next to) its own pixel
EVAL_OVERRIDES = {"stride": 1}


class CliError(Exception):
    pass


def _load_config(path, overrides=None):
    config = Config.load(path) if path else Config()
    if overrides:
        config = config.replace(**overrides)
    return config


def run_track(frames, config, births, points, out_dir, export_every=0):
    """Fit ``frames`` online, writing trajectories and scene snapshots to ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tracks = TrackSet(births, points)
    tracker = OnlineTracker(config, tracks)
    last = None
    for frame in frames:
        t0 = time.perf_counter()
        state = tracker.process(frame)
        logger.info(
            "frame %d: %d Gaussians (+%d), energy %.3e, %.2fs",
            frame.index,
            len(state.scene),
            state.added[-1],
            state.history[-1].total,
            time.perf_counter() - t0,
        )
        if export_every and frame.index % export_every == 0:
            io.write_ply(out_dir / f"scene_{frame.index:06d}.ply", state.scene)
        last = frame.index
    if last is None:
        raise CliError("sequence has no frames")
    io.write_tracks(out_dir / "trajectories.csv", tracks)
    io.write_ply(out_dir / "scene.ply", tracker.state.scene)
    return tracks, tracker.state


def _config_overrides(args):
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "no_flow", False):
        changes["use_flow"] = False
    return changes


def cmd_track(args):
    config = _load_config(args.config, _config_overrides(args))
    births, points = io.read_queries(args.queries)
    seq = io.load_sequence(args.sequence)
    if births.max() >= len(seq):
        raise CliError(f"{args.queries}: query born at frame {births.max()} but sequence has {len(seq)} frames")
    export_every = args.export_every if args.export_every is not None else config.export_every
    run_track(seq, config, births, points, args.out, export_every)
    print(f"wrote {Path(args.out) / 'trajectories.csv'}")
    return 0


def cmd_eval(args):
    overrides = {**EVAL_OVERRIDES, **_config_overrides(args)}
    config = _load_config(args.config, overrides)
    out = Path(args.out)
    t0 = time.perf_counter()
    if args.script:
        seq = generate(args.script, seed=config.seed, frames=args.frames)
        frames, width = seq.frames, seq.frames[0].camera.width
        births, points = seq.births, list(seq.queries)
        gt, visible = seq.gt_tracks_2d, seq.gt_visible
        name = args.script
    else:
        root = Path(args.sequence)
        seq = io.load_sequence(root)
        frames, width = seq, int(seq.meta["W"])
        births, points = io.read_queries(root / "queries.csv")
        gt_path = root / "gt_tracks.csv"
        if not gt_path.exists():
            raise CliError(f"{gt_path}: ground-truth tracks are required for evaluation")
        gt, visible = io.tracks_to_arrays(io.read_tracks(gt_path), n_frames=len(seq))
        name = str(root)
    tracks, _ = run_track(frames, config, births, points, out, args.export_every or 0)
    pred = tracks.trajectories_2d()
    pred = np.concatenate([pred, np.full((len(pred), gt.shape[1] - pred.shape[1], 2), np.nan)], axis=1)
    report = evaluate(
        pred,
        gt,
        visible,
        thresholds=config.delta_thresholds,
        survival_px=survival_threshold(width, config.survival_threshold),
    )
    summary = io.write_metrics(out, report, {"sequence": name, "seconds": time.perf_counter() - t0})
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_synth(args):
    seq = generate(args.script, seed=args.seed, frames=args.frames)
    out = Path(args.out)
    io.write_sequence(out, seq.frames)
    io.write_queries(out / "queries.csv", seq.births, list(seq.queries))
    io.write_gt_tracks(out / "gt_tracks.csv", seq.gt_tracks_2d, seq.gt_tracks_3d, seq.gt_visible)
    print(f"wrote {len(seq)} frames to {out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="endosplat", description="Online Gaussian splatting reconstruction and point tracking.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("track", help="fit a sequence and track query points")
    p.add_argument("sequence", help="sequence directory")
    p.add_argument("--config", help="TOML or JSON config file")
    p.add_argument("--queries", required=True, help="CSV of frame,u,v or frame,x,y,z")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--export-every", type=int, default=None, help="write a scene PLY every N frames")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--no-flow", action="store_true", help="skip flow-based offset initialization")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="track and score against ground truth")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--script", choices=sorted(SCRIPTS), help="synthetic script to generate")
    src.add_argument("sequence", nargs="?", help="sequence directory with queries.csv and gt_tracks.csv")
    p.add_argument("--config", help="TOML or JSON config file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--frames", type=int, default=None, help="override the script's frame count")
    p.add_argument("--export-every", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--no-flow", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="write a synthetic sequence to disk")
    p.add_argument("--script", required=True, choices=sorted(SCRIPTS))
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=None)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None):
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (SequenceFormatError, ConfigError, CliError, ContractViolation) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FrameUnusableError, NonFiniteGradientError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc.filename or ''}: {exc.strerror or exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
