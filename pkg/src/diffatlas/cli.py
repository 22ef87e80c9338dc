"""Command-line entry point: ``diffatlas <stage> [options]``."""
from __future__ import annotations

import argparse
import dataclasses
import os
import sys
import traceback

from .atlas import DivergenceError
from .config import ConfigError, PipelineConfig, fixture_config, load_config
from .pipeline import CONFIG, STAGES, MissingInputError, Run

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2  # argparse's own code for unknown flags
EXIT_BAD_CONFIG = 3
EXIT_MISSING_INPUT = 4
EXIT_DIVERGED = 5


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--runs-dir", default="runs", help="parent of all run directories (default: runs)")
    common.add_argument("--name", default="default", help="run name; outputs go to <runs-dir>/<name>/")
    src = common.add_mutually_exclusive_group()
    src.add_argument("--config", help="YAML pipeline config (default: the run's saved config, else defaults)")
    src.add_argument("--fixture", action="store_true", help="use the reduced-budget fixture config")
    common.add_argument("--seed", type=int, help="override the top-level seed")
    common.add_argument("-q", "--quiet", action="store_true")

    p = argparse.ArgumentParser(prog="diffatlas", description="Layered-atlas video editing pipeline.")
    sub = p.add_subparsers(dest="stage", required=True, metavar="stage")
    helps = {
        "synth": "render the synthetic source video and its ground truth",
        "decompose": "fit the layered atlas model and discretize both atlases",
        "edit-atlas": "edit the foreground atlas (denoiser training, fine-tune, crop edit, paste)",
        "edit-bg": "edit the background atlas",
        "optimize-uv": "train the edit mapping and opacity networks",
        "render": "render the edited video",
        "eval": "write metrics/metrics.csv and a summary",
    }
    for stage in STAGES:
        sub.add_parser(stage, parents=[common], help=helps[stage])
    a = sub.add_parser("all", parents=[common], help="run every stage in order")
    a.add_argument("--resume", action="store_true", help="skip stages the manifest lists as completed")
    return p


def resolve_config(args, run_dir):
    if args.fixture:
        cfg = fixture_config()
    elif args.config:
        if not os.path.exists(args.config):
            raise ConfigError(f"config file {args.config} not found")
        cfg = load_config(args.config)
    elif os.path.exists(os.path.join(run_dir, CONFIG)):
        cfg = load_config(os.path.join(run_dir, CONFIG))
    else:
        cfg = PipelineConfig()
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("seed must be non-negative")
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def main(argv=None):
    args = build_parser().parse_args(argv)
    log = (lambda msg: None) if args.quiet else (lambda msg: print(msg, flush=True))
    run_dir = os.path.join(args.runs_dir, args.name)
    try:
        run = Run(run_dir, resolve_config(args, run_dir))
        if args.stage == "all":
            run.run_all(resume=args.resume, log=log)
        else:
            rec = run.run_stage(args.stage)
            log(f"{args.stage}: done in {rec['wall_time']:.1f} s")
    except ConfigError as e:
        print(f"diffatlas: bad config: {e}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    except MissingInputError as e:
        print(f"diffatlas: missing input: {e}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    except (DivergenceError, FloatingPointError) as e:
        print(f"diffatlas: diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except Exception:
        traceback.print_exc()
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
