"""Command line entry point: ``webface <stage> --config run.json --out runs/demo``.

Every subcommand runs one pipeline stage against the artifacts already in
``--out``; ``pipeline`` runs them all. Each config leaf is also a flag, e.g.
``--baseline.train.epochs 5`` or ``--data.synth.nuisance.occlusion_prob 0.3``.
Flag values are parsed as JSON when possible (numbers, lists, null) and taken
as strings otherwise.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .nn_core import ConfigError
from .pipeline import STAGE_NAMES, PipelineConfig, StageError, config_schema, run_pipeline

SUBCOMMANDS = [s for s in STAGE_NAMES if s != "report"] + ["pipeline"]


def _leaves(d: dict, prefix: str = ""):
    for k, v in d.items():
        if isinstance(v, dict):
            yield from _leaves(v, f"{prefix}{k}.")
        else:
            yield f"{prefix}{k}"


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _set(d: dict, dotted: str, value) -> None:
    *head, last = dotted.split(".")
    for k in head:
        d = d.setdefault(k, {})
    d[last] = value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="webface", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("show-config", help="print the default configuration as JSON")
    keys = list(_leaves(PipelineConfig().to_dict()))
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help="run every stage" if name == "pipeline" else f"run the {name} stage")
        p.add_argument("--config", help="JSON config file (defaults to the demo config)")
        p.add_argument("--out", required=True, help="artifact directory")
        p.add_argument("--force", action="store_true", help="rerun even when up to date")
        p.add_argument("-q", "--quiet", action="store_true")
        group = p.add_argument_group("config overrides")
        for key in keys:
            group.add_argument(f"--{key}", dest=f"set:{key}", metavar="VALUE", default=argparse.SUPPRESS)
    return parser


def resolve_config(args) -> PipelineConfig:
    raw = {}
    if args.config:
        try:
            with open(args.config) as f:
                raw = json.load(f)
        except FileNotFoundError as e:
            raise ConfigError(f"config file {args.config} not found") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {args.config} is not valid JSON: {e}") from e
    for dest, value in vars(args).items():
        if dest.startswith("set:"):
            _set(raw, dest[4:], _parse_value(value))
    return PipelineConfig.from_dict(raw)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "show-config":
        sys.stdout.write(config_schema())
        return 0
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(message)s"
    )
    try:
        cfg = resolve_config(args)
        stages = None if args.command == "pipeline" else [args.command]
        status = run_pipeline(cfg, args.out, stages, force=args.force)
    except ConfigError as e:
        print(f"webface: config error: {e}", file=sys.stderr)
        return 2
    except StageError as e:
        print(f"webface: {e}", file=sys.stderr)
        return 1
    for stage, state in status.items():
        print(f"{stage}: {state}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
