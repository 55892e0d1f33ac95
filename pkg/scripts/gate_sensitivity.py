"""Mean derivative of the training loss with respect to each gate kind, per seed."""
import argparse
import dataclasses

import numpy as np

from prdarts.cell import build_multi_cell
from prdarts.theory import TheoryConfig, gate_sensitivity, random_weighting, theory_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--h", type=int, default=3)
    ap.add_argument("--m", type=int, default=64)
    args = ap.parse_args()
    cfg = dataclasses.replace(TheoryConfig(), h=args.h, m=args.m)
    print("seed,op,mean,fraction_negative")
    for seed in range(args.seeds):
        ds = theory_dataset(cfg, seed)
        net = build_multi_cell(cfg.network(), np.random.default_rng(seed))
        gates = random_weighting(net.graph, np.random.default_rng(seed + 1), "uniform")
        res = gate_sensitivity(net, ds.inputs, ds.targets, gates)
        for op, stats in res.by_kind.items():
            print(f"{seed},{op},{stats['mean']:.6g},{stats['fraction_negative']:.3f}")


if __name__ == "__main__":
    main()
