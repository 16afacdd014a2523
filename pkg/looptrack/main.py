"""
looptrack command line: synth | train | track | propagate | eval.

Load .env in development only (production sets env vars directly), configure
logging, parse flags and dispatch to commands. Flags for synth and train are
generated from their pydantic configs; precedence is flags > --config file >
defaults. Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Any

from dotenv import load_dotenv
from pydantic import BaseModel, ValidationError

# Load .env before looptrack.config reads the environment
if os.getenv("LOOPTRACK_ENV", "development").lower() == "development":
    load_dotenv(Path(__file__).resolve().parent.parent / ".env")

from looptrack import __version__, commands
from looptrack.config import LOG_LEVEL, merge_settings
from looptrack.data import SynthConfig
from looptrack.errors import ConfigFileError, UsageError
from looptrack.trainer import TrainConfig

logger = logging.getLogger("looptrack")

BOX_MODES = ("axis_aligned", "min_area")


class ArgumentParser(argparse.ArgumentParser):
    """Raise instead of exiting so the single handler in main() decides the exit code."""

    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


# --- Flags ---


def add_model_flags(parser: argparse.ArgumentParser, model: type[BaseModel]) -> None:
    """One --flag per field; values stay strings and are validated by the model."""
    group = parser.add_argument_group(f"{model.__name__} fields")
    for name, info in model.model_fields.items():
        flag = "--" + name.replace("_", "-")
        help_text = f"default: {info.default}"
        if info.annotation is bool:
            group.add_argument(flag, dest=name, action=argparse.BooleanOptionalAction, default=None, help=help_text)
        else:
            group.add_argument(flag, dest=name, default=None, metavar="VALUE", help=help_text)


def model_overrides(args: argparse.Namespace, model: type[BaseModel]) -> dict[str, Any]:
    return {name: getattr(args, name) for name in model.model_fields}


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="looptrack", description="Self-supervised cycle tracking.")
    parser.add_argument("--version", action="version", version=f"looptrack {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--out", required=True, help="output dataset directory")
    add_model_flags(p, SynthConfig)

    p = sub.add_parser("train", help="train on a dataset of sequences")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="run directory (checkpoint, metrics)")
    add_model_flags(p, TrainConfig)

    p = sub.add_parser("track", help="track every sequence, write box files")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="directory for <sequence>.txt prediction files")
    p.add_argument("--box-mode", choices=BOX_MODES, default="axis_aligned")
    p.add_argument("--render", help="directory for overlay PNGs")
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("propagate", help="propagate first-frame masks, write PNGs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("eval", help="VOT or DAVIS metrics and reports")
    p.add_argument("--task", choices=("vot", "davis"), required=True)
    p.add_argument("--data", required=True, help="dataset with ground truth")
    p.add_argument("--out", default=".", help="directory for report.txt and report.csv")
    p.add_argument("--pred", help="stored predictions (box files or mask folders)")
    p.add_argument("--checkpoint", help="run the tracker live instead of reading --pred")
    p.add_argument("--name", default="looptrack", help="row label in the report")
    p.add_argument("--box-mode", choices=BOX_MODES, default="axis_aligned")
    p.add_argument("--tolerance", type=float, help="boundary tolerance in pixels")
    p.add_argument("--jobs", type=int, default=1)
    return parser


def dispatch(args: argparse.Namespace) -> None:
    if getattr(args, "jobs", 1) < 1:
        raise UsageError("--jobs must be at least 1")
    if args.command == "synth":
        config = merge_settings(SynthConfig, args.config, model_overrides(args, SynthConfig))
        commands.synth_command(config, args.out)
    elif args.command == "train":
        config = merge_settings(TrainConfig, args.config, model_overrides(args, TrainConfig))
        commands.train_command(config, args.data, args.out)
    elif args.command == "track":
        commands.track_command(args.checkpoint, args.data, args.out, args.box_mode, args.jobs, args.render)
    elif args.command == "propagate":
        commands.propagate_command(args.checkpoint, args.data, args.out, args.jobs)
    elif args.command == "eval":
        commands.eval_command(
            args.task, args.data, args.out, args.pred, args.checkpoint,
            args.name, args.box_mode, args.tolerance, args.jobs,
        )


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=LOG_LEVEL, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        dispatch(args)
    except SystemExit as e:
        # --help and --version
        return e.code if isinstance(e.code, int) else 0
    except (UsageError, ConfigFileError) as e:
        print(f"error: {e.msg}", file=sys.stderr)
        return 1
    except ValidationError as e:
        print(f"error: invalid settings\n{e}", file=sys.stderr)
        return 1
    except Exception as e:
        logging.exception("Unhandled exception: %s", e)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
