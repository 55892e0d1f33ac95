"""Mean training-loss curves of fixed cells with a growing share of skip ops."""
import argparse
import dataclasses

from prdarts.theory import TheoryConfig, skip_fraction_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--fractions", type=float, nargs="+", default=[0.0, 0.375, 0.625])
    ap.add_argument("--trials", type=int, default=5)
    ap.add_argument("--lr", type=float, default=TheoryConfig.lr)
    ap.add_argument("--steps", type=int, default=TheoryConfig.steps)
    ap.add_argument("--cells", type=int, default=1)
    args = ap.parse_args()
    cfg = dataclasses.replace(TheoryConfig(), lr=args.lr, steps=args.steps)
    curves = skip_fraction_experiment(args.fractions, args.trials, cfg, h=5, cells=args.cells)
    means = {f: c.mean(axis=0) for f, c in curves.items()}
    print("step," + ",".join(f"fraction_{f:g}" for f in args.fractions))
    for k in range(args.steps + 1):
        print(f"{k}," + ",".join(f"{means[f][k]:.6g}" for f in args.fractions))


if __name__ == "__main__":
    main()
