"""Command-line entry point for the featvis circuit lab.

Usage:
    python -m app.main train    --config data/run_config_sample.json
    python -m app.main featvis  --config cfg.json --model attacked
    python -m app.main discover --config cfg.json --head conv4:0 --sparsity 1 --sparsity 0.3
    python -m app.main attack   --config cfg.json --attack circuitbreaker
    python -m app.main evaluate --config cfg.json --initial a.cbk --final b.cbk
    python -m app.main export   --config cfg.json --head conv4:3
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

from pydantic import ValidationError

from app.commands import cmd_attack, cmd_discover, cmd_evaluate, cmd_export, cmd_featvis, cmd_train
from app.config import RunConfig, describe_validation_error, load_run_config, setup_logging, use_settings
from app.errors import ArtifactIOError, ConfigError, LabError

logger = logging.getLogger(__name__)

VERBS = ("train", "featvis", "discover", "attack", "evaluate", "export")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="featvis-lab", description="Feature visualization and circuit attack lab")
    sub = parser.add_subparsers(dest="verb", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="JSON run configuration")
    common.add_argument("--seed", type=int, default=None, help="Global seed (also seeds the attack)")
    common.add_argument("--out", type=Path, default=None, help="Output directory")
    common.add_argument("--sparsity", type=float, action="append", default=None, help="Circuit sparsity (repeatable)")
    common.add_argument("--head", action="append", default=None, help="Circuit head layer:channel (repeatable)")
    common.add_argument("--attack", choices=("proxpulse", "circuitbreaker"), default=None)

    for verb in VERBS:
        p = sub.add_parser(verb, parents=[common])
        if verb in ("featvis", "discover", "export"):
            p.add_argument("--model", choices=("baseline", "attacked"), default="baseline")
        if verb == "evaluate":
            p.add_argument("--initial", type=Path, default=None, help="Initial checkpoint (default: baseline)")
            p.add_argument("--final", type=Path, default=None, help="Final checkpoint (default: attacked)")
    return parser


def flag_overrides(args: argparse.Namespace) -> dict[str, Any]:
    """Nested config overrides for the flags that were given."""
    overrides: dict[str, Any] = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
        overrides.setdefault("attack", {})["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = str(args.out)
    if args.sparsity:
        overrides.setdefault("circuits", {})["sparsities"] = args.sparsity
    if args.head:
        overrides.setdefault("circuits", {})["heads"] = args.head
        overrides.setdefault("attack", {})["heads"] = args.head
    if args.attack is not None:
        overrides.setdefault("attack", {})["kind"] = args.attack
    return overrides


def dispatch(args: argparse.Namespace, cfg: RunConfig) -> list[Path]:
    if args.verb == "train":
        return cmd_train(cfg)
    if args.verb == "featvis":
        return cmd_featvis(cfg, args.model)
    if args.verb == "discover":
        return cmd_discover(cfg, args.model)
    if args.verb == "attack":
        return cmd_attack(cfg)
    if args.verb == "evaluate":
        return cmd_evaluate(cfg, args.initial, args.final)
    return cmd_export(cfg, args.model)


def format_error(exc: LabError) -> str:
    """``error code=<Code> message="<text>"`` on a single line."""
    text = " ".join(str(exc).split()).replace("\\", "\\\\").replace('"', '\\"')
    return f'error code={exc.code} message="{text}"'


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args.config, flag_overrides(args))
        use_settings(cfg)
        setup_logging(cfg)
        written = dispatch(args, cfg)
    except LabError as exc:
        print(format_error(exc), file=sys.stderr)
        return 1
    except OSError as exc:
        print(format_error(ArtifactIOError(f"{exc.filename or 'file'}: {exc.strerror or exc}")), file=sys.stderr)
        return 1
    except ValidationError as exc:
        print(format_error(ConfigError(describe_validation_error(exc))), file=sys.stderr)
        return 1
    except ValueError as exc:
        print(format_error(ConfigError(str(exc))), file=sys.stderr)
        return 1
    logger.info("%s wrote %d file(s) under %s", args.verb, len(written), cfg.out_dir)
    return 0


if __name__ == "__main__":
    sys.exit(main())
