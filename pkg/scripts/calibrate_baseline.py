"""Fit the allocation baseline on the planted suite and print it next to the shipped default."""
import argparse

from shapeprobe import dims


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--temperature", type=float, default=dims.DEFAULT_TEMPERATURE)
    p.add_argument("--seeds", type=lambda s: [int(v) for v in s.split(",")], default=[0, 1, 2])
    p.add_argument("--D", type=int, default=64)
    p.add_argument("--k", type=int, default=16)
    args = p.parse_args()

    b = dims.calibrate_baseline(args.temperature, args.seeds, D=args.D, k=args.k)
    print(f"calibrated baseline {b:.4f} (default {dims.DEFAULT_BASELINE})")
    for s in args.seeds:
        stats = dims.neuron_stats(*dims.planted_suite(D=args.D, k=args.k, seed=s))
        a = dims.allocate_dimensions(dims.factor_scores(stats), args.D, baseline=b, temperature=args.temperature)
        print(f"seed {s}: counts {a.counts}")


if __name__ == "__main__":
    main()
