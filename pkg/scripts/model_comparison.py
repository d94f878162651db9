"""Compare stationary, day/night and radiation variants on radiation-modulated data."""

import argparse

from evospec.experiments import model_comparison, radiation_config


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    args = p.parse_args()
    for seed in args.seeds:
        res = model_comparison(radiation_config(seed=seed))
        ll = "  ".join(f"{k} {v:.1f}" for k, v in res.logliks.items())
        gaps = "  ".join(f"{k} {v:.1f}" for k, v in res.gaps().items())
        print(f"seed {seed}: {ll}  | gaps {gaps}  ({res.seconds:.0f}s)")


if __name__ == "__main__":
    main()
