"""Run the toy search in both modes over several seeds and summarise skip behaviour."""
import argparse
import json

import numpy as np

from prdarts.dataio import generate_synthetic
from prdarts.export import prune, skip_fraction
from prdarts.search import SearchConfig, run_search


def run(raw, mode, seed):
    raw = dict(raw)
    data = raw.pop("data", {})
    cfg = SearchConfig.from_dict({**raw, "mode": mode, "seed": seed})
    ds = generate_synthetic(data.get("n", 128), cfg.network.in_channels, cfg.network.length, seed=seed)
    return run_search(cfg, ds)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="configs/search_toy.json")
    ap.add_argument("--seeds", type=int, default=10)
    args = ap.parse_args()
    with open(args.config) as fh:
        raw = json.load(fh)
    print("seed,mode,mid_skip,final_skip,final_non_skip,pruned_skip_fraction")
    for seed in range(args.seeds):
        for mode in ("darts", "prdarts"):
            res = run(raw, mode, seed)
            skips = [r.mean_skip for r in res.trace]
            frac = skip_fraction(prune(res.net, tau_g=res.final_temperature))
            print(f"{seed},{mode},{skips[len(skips) // 2]:.4f},{skips[-1]:.4f},"
                  f"{res.trace[-1].mean_non_skip:.4f},{frac:.3f}", flush=True)


if __name__ == "__main__":
    main()
