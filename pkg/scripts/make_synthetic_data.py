#!/usr/bin/env python3
"""Write the synthetic 8-component benchmark corpus as a composition/Tg CSV.

The ground-truth coefficients are frozen in glasscreen.synthetic, so the same
seed always reproduces the same corpus. Use --sum-jitter to emulate the dirty
mass-fraction sums of real database exports (exercises `glasscreen clean`).
"""

import argparse

from glasscreen.data_pipeline import write_dataset
from glasscreen.synthetic import (
    DEFAULT_DATA_SEED,
    DEFAULT_NOISE_STD,
    SCHEMA,
    generate_raw_samples,
    quantile_band,
)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--samples", type=int, default=4000)
    parser.add_argument("--seed", type=int, default=DEFAULT_DATA_SEED)
    parser.add_argument("--noise-std", type=float, default=DEFAULT_NOISE_STD)
    parser.add_argument("--sum-jitter", type=float, default=0.0,
                        help="rescale each row by U(1-j, 1+j)")
    parser.add_argument("--out", required=True)
    args = parser.parse_args()

    raw = generate_raw_samples(n_samples=args.samples, seed=args.seed,
                               noise_std=args.noise_std, sum_jitter=args.sum_jitter)
    write_dataset(args.out, SCHEMA, raw)
    band = quantile_band(raw)
    print(f"wrote {args.samples} samples to {args.out}")
    print(f"suggested ~20% band: {band.low:.1f}:{band.high:.1f}")


if __name__ == "__main__":
    main()
