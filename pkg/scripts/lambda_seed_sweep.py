"""Spearman correlation between the closed-form factor and measured contraction, across seeds and step sizes."""
import argparse
import dataclasses

from prdarts.theory import TheoryConfig, lambda_contraction_study


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--lrs", type=float, nargs="+", default=[1e-5, 3e-5, 1e-4])
    ap.add_argument("--kind", choices=["uniform", "softmax"], default="uniform")
    args = ap.parse_args()
    print("seed,lr,spearman,diverged")
    for seed in range(args.seeds):
        for lr in args.lrs:
            cfg = dataclasses.replace(TheoryConfig(), seed=seed, lr=lr, weighting_kind=args.kind)
            study = lambda_contraction_study(cfg)
            diverged = sum(r["diverged"] for r in study["rows"])
            print(f"{seed},{lr!r},{study['spearman']:.4f},{diverged}", flush=True)


if __name__ == "__main__":
    main()
