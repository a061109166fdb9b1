#!/usr/bin/env python3
"""Velocity-head MSE on radar-camera fused features versus camera-only features."""

import argparse
import dataclasses

from crtbev.experiments import acceptance_config, velocity_experiment


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sequences", type=int, default=10)
    p.add_argument("--frames", type=int, default=7)
    args = p.parse_args()
    cfg = dataclasses.replace(acceptance_config(n_sequences=args.sequences, n_frames=args.frames), seed=args.seed)
    res = velocity_experiment(cfg)
    print(f"fused       {res.fused_mse:.4f} (m/s)^2")
    print(f"camera-only {res.camera_mse:.4f} (m/s)^2")


if __name__ == "__main__":
    main()
