"""Command-line entry point: ``mmjoints <command> [--config PATH] [--preset desk|paper] ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ENV_PREFIX, PRESETS, ConfigError, MissingDependencyError, resolve_config

EXIT_OK, EXIT_VALIDATION, EXIT_MISSING = 0, 2, 3
COMMAND_NAMES = ("simulate", "train", "describe", "refine", "recognize", "analyze", "report")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="mmjoints", description="Per-joint sensing and reliability descriptors for radar pose estimates.",
                epilog=f"Any config key can be overridden with {ENV_PREFIX}<SECTION>__<KEY>=<value>.")
    p.add_argument("command", choices=COMMAND_NAMES)
    p.add_argument("--config", metavar="PATH", help="YAML or JSON config file")
    p.add_argument("--preset", choices=PRESETS)
    p.add_argument("--seed", type=int, metavar="N")
    p.add_argument("--stage", metavar="NAME", help="train only this stage")
    p.add_argument("--out", metavar="DIR", default="mmjoints-run")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run(argv=None, environ=None):
    """Parse ``argv``, execute the command and return ``(exit code, result)``."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        cfg = resolve_config(args.config, args.preset, args.seed, environ)
        try:
            from threadpoolctl import threadpool_limits
        except ImportError as exc:
            raise MissingDependencyError("the 'threadpoolctl' package is required") from exc
        from .commands import COMMANDS, Context

        if args.stage is not None and args.command != "train":
            raise ConfigError("--stage only applies to the train command")
        with threadpool_limits(limits=1):
            result = COMMANDS[args.command](Context(cfg, args.out), stage=args.stage)
    except ConfigError as exc:
        print(f"mmjoints: validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION, None
    except MissingDependencyError as exc:
        print(f"mmjoints: missing dependency: {exc}", file=sys.stderr)
        return EXIT_MISSING, None
    except FileNotFoundError as exc:
        print(f"mmjoints: missing dependency: {exc}", file=sys.stderr)
        return EXIT_MISSING, None
    return EXIT_OK, result


def main(argv=None):
    code, result = run(argv)
    if result is not None:
        print(json.dumps(result, sort_keys=True))
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
