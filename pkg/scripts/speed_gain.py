#!/usr/bin/env python3
"""Per-speed-bin AP gain of motion-aware fusion over naive concatenation.

Runs the seeded mixed-speed and all-static suites and prints both gain tables.
"""

import argparse
import dataclasses

from crtbev.config import load_config
from crtbev.experiments import acceptance_config, gain_experiment


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default=None, help="YAML run config (default: acceptance settings)")
    p.add_argument("--seed", type=int, default=None, help="root seed override")
    p.add_argument("--sequences", type=int, default=None, help="sequences per suite")
    args = p.parse_args()
    cfg = load_config(args.config) if args.config else acceptance_config()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.sequences is not None:
        cfg = dataclasses.replace(cfg, n_sequences=args.sequences)
    res = gain_experiment(cfg)
    print("mixed-speed suite")
    print(res.mixed.table())
    print("\nall-static suite")
    print(res.static.table())
    print(f"\n{res.seconds:.1f} s")


if __name__ == "__main__":
    main()
