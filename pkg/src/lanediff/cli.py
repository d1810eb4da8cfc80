"""
Command line interface.

Exit codes: 0 on success, 2 on configuration errors (including missing
inputs or checkpoints), 3 on numerical failures.
"""

import argparse
import logging
import os
import sys
from dataclasses import replace

from . import __version__
from .config import RunConfig
from .errors import ConfigError
from .errors import NumericalError
from .lane_graph import Point2
from .lane_graph import SegmentGraph
from .lpdm import build_schedule
from .lpdm import save_schedule
from .pipeline import baseline
from .pipeline import compare
from .pipeline import evaluate
from .pipeline import make_scenes
from .pipeline import stage1
from .pipeline import stage2
from .pipeline import stage3
from .pipeline import stage_dir
from .pipeline import sweep
from .render import render
from .scene import OccupancyRaster
from .scene import load_raster
from .scene import save_raster

EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def _config(args):
    cfg = RunConfig.from_toml(args.config) if args.config else RunConfig.desk()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, paths=replace(cfg.paths, out=args.out))
    return cfg


def _gen(cfg, args):
    directory = os.path.join(cfg.paths.out, "scenes", args.split)
    os.makedirs(directory, exist_ok=True)
    scenes = make_scenes(cfg, args.split, args.count)
    for i, scene in enumerate(scenes):
        stem = os.path.join(directory, f"{i:04d}")
        scene.graph.save(f"{stem}.json")
        window = cfg.scene.window
        origin = Point2(window[0][0], window[1][0])
        save_raster(OccupancyRaster(scene.clean, cfg.scene.resolution, origin), f"{stem}.clean.bin")
        save_raster(OccupancyRaster(scene.degraded, cfg.scene.resolution, origin), f"{stem}.degraded.bin")
        if args.png:
            render(load_raster(f"{stem}.degraded.bin"), f"{stem}.degraded.png")
    logging.info(f"{len(scenes)} scenes written to {directory}.")


def _stage(run):
    def command(cfg, args):
        run(cfg, resume=args.resume, epochs=args.epochs)

    return command


def _eval(cfg, args):
    checkpoint = args.checkpoint or stage_dir(cfg, "III")
    out = args.report or os.path.join(cfg.paths.out, "eval", args.split)
    scenes = make_scenes(cfg, args.split, args.count) if args.count is not None else None
    report = evaluate(checkpoint, cfg, args.split, scenes, out)
    print(report.table())


def _load_artifact(path):
    if path.endswith(".json"):
        return SegmentGraph.load(path)
    return load_raster(path)


def _render(cfg, args):
    artifact = _load_artifact(args.input)
    if args.pred is not None:
        artifact = (artifact, SegmentGraph.load(args.pred))
    render(artifact, args.output, resolution=cfg.scene.resolution, window=cfg.scene.window)


def _sweep(cfg, args):
    table = sweep(cfg, args.kind)
    print(table.to_string(index=False))


def _compare(cfg, args):
    summary = compare(cfg, args.seeds, args.split)
    print(summary.to_string(float_format="{:.3f}".format))


def _schedule(cfg, args):
    d = cfg.diffusion
    path = os.path.join(cfg.paths.out, "schedule.csv")
    os.makedirs(cfg.paths.out, exist_ok=True)
    save_schedule(build_schedule(d.T, d.kappa, d.p, d.alpha2, d.weight_mode), path)


def build_parser():
    parser = argparse.ArgumentParser(prog="lanediff", description="Lane prior diffusion on synthetic BEV scenes.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--out", help="override the output directory")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen", parents=[common], help="generate, rasterize and degrade scenes")
    gen.add_argument("--split", default="train", choices=["train", "val", "test"])
    gen.add_argument("--count", type=int, help="number of scenes (default from the configuration)")
    gen.add_argument("--png", action="store_true", help="also render the degraded rasters")
    gen.set_defaults(run=_gen)

    for name, run in (("stage1", stage1), ("stage2", stage2), ("stage3", stage3), ("baseline", baseline)):
        sub = commands.add_parser(name, parents=[common], help=f"train {name}")
        sub.add_argument("--resume", action="store_true", help="continue from the existing checkpoint")
        sub.add_argument("--epochs", type=int, help="epochs to train (additional epochs with --resume)")
        sub.set_defaults(run=_stage(run))

    ev = commands.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", help="checkpoint directory (default: the stage III output)")
    ev.add_argument("--split", default="val", choices=["train", "val", "test"])
    ev.add_argument("--count", type=int, help="number of scenes (default from the configuration)")
    ev.add_argument("--report", help="report directory")
    ev.set_defaults(run=_eval)

    rd = commands.add_parser("render", parents=[common], help="render a raster or graph to PNG or PPM")
    rd.add_argument("input", help="raster (.bin) or graph (.json)")
    rd.add_argument("output", help="image path ending in .png or .ppm")
    rd.add_argument("--pred", help="predicted graph drawn in red over the input graph")
    rd.set_defaults(run=_render)

    sw = commands.add_parser("sweep", parents=[common], help="ablation sweep")
    sw.add_argument("--kind", default="T", choices=["T", "refine"])
    sw.set_defaults(run=_sweep)

    cp = commands.add_parser("compare", parents=[common], help="stage III against the baseline over several seeds")
    cp.add_argument("--seeds", type=int, default=3, help="number of training seeds")
    cp.add_argument("--split", default="test", choices=["val", "test"])
    cp.set_defaults(run=_compare)

    sc = commands.add_parser("schedule", parents=[common], help="write the shifting schedule as CSV")
    sc.set_defaults(run=_schedule)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(message)s")
    try:
        args.run(_config(args), args)
    except (ConfigError, FileNotFoundError) as e:
        logging.error(str(e))
        return EXIT_CONFIG
    except NumericalError as e:
        logging.error(str(e))
        return EXIT_NUMERICAL
    return 0


if __name__ == "__main__":
    sys.exit(main())
