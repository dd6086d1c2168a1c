"""Command line entry point: ``rankexperts <command> [flags]``.

Exit codes: 0 success, 2 configuration error, 3 missing prerequisite stage.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import pipeline
from .config import ConfigError, default_config, load_config, validate

COMMANDS = ("train-dense", "compress", "train-router", "build-cache", "eval", "bench", "observe", "all")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rankexperts",
                                description="Input-dependent rank selection for SVD-compressed toy LMs.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", type=Path, help="JSON run config (defaults apply when omitted)")
    p.add_argument("--out", type=Path, help="output directory (overrides the config)")
    p.add_argument("--seed", type=int, help="global seed (overrides the config)")
    p.add_argument("--ratio", type=float, help="compression ratio (overrides compress.ratio)")
    p.add_argument("--figure", choices=pipeline.FIGURES, help="measurement to emit with 'observe'")
    p.add_argument("--gqa", action="store_true", help="grouped-query attention (n_kv_heads = n_heads / 2)")
    p.add_argument("--psi", type=float, help="shared-expert frequency threshold (overrides cache.psi)")
    p.add_argument("--store-multiplier", type=float, help="stored experts per budgeted expert")
    return p


def resolve_config(args):
    cfg = load_config(args.config) if args.config else default_config()
    if args.out is not None:
        cfg.out = args.out.resolve()
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2 ** 64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        cfg.seed = args.seed
    if args.ratio is not None:
        cfg.compress.ratio = args.ratio
    if args.gqa:
        cfg.lm.n_kv_heads = cfg.lm.n_heads // 2
    if args.psi is not None:
        cfg.cache.psi = args.psi
    if args.store_multiplier is not None:
        cfg.compress.store_multiplier = args.store_multiplier
    validate(cfg)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.command == "observe" and args.figure is None:
            raise ConfigError("'observe' needs --figure")
        if args.command == "all":
            pipeline.run_all(cfg)
        elif args.command == "observe":
            files = pipeline.cmd_observe(cfg, args.figure)
            for f in files:
                print(f)
        else:
            getattr(pipeline, "cmd_" + args.command.replace("-", "_"))(cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except pipeline.MissingPrerequisite as e:
        print(str(e), file=sys.stderr)
        return 3
    print(f"{args.command}: done ({cfg.out})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
