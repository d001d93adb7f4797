"""``bps-lab`` command line: run one experiment from a JSON config."""
from __future__ import annotations

import argparse
import sys

from .experiments import COMMANDS, EXIT_CONFIG, ConfigError, ExperimentConfig


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bps-lab", description="Behavior policy search experiments.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="JSON experiment config")
    p.add_argument("--out", help="output directory (overrides config)")
    p.add_argument("--seed", type=int, help="root seed, unsigned 64-bit (overrides config)")
    p.add_argument("--trials", type=int, help="number of independent trials (overrides config)")
    p.add_argument("--workers", type=int, help="worker processes; output does not depend on it")
    p.add_argument("--holdout", type=int, help="extra trajectories from each final behavior policy")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = ExperimentConfig.from_json(args.config).to_dict()
        for key in ("out", "seed", "trials", "workers", "holdout"):
            if getattr(args, key) is not None:
                cfg[key] = getattr(args, key)
        config = ExperimentConfig.from_dict(cfg)
        return COMMANDS[args.command](config)
    except ConfigError as exc:
        print(f"bps-lab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
