"""Spread of the toy beta = 1 metrics over master seeds.

    python3 scripts/seed_sweep.py --seeds 1 2 3 4 5 20240901
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import dataclass, field

from tabf.config import preset
from tabf.estimators import flatness, histogram, node_surface, relative_l2_error
from tabf.oracle import toy_free_energy
from tabf.orchestrator import run_tabf


@dataclass
class Sweep:
    seeds: list = field(default_factory=lambda: [1, 2, 3, 4, 5])
    preset: str = "toy_beta1"


def main(sweep: Sweep):
    wr = csv.writer(sys.stdout)
    wr.writerow(["seed", "relative_l2_error", "visited_fraction", "max_min_ratio"])
    for seed in sweep.seeds:
        cfg = preset(sweep.preset, seed=seed)
        res = run_tabf(cfg)
        g1, g2 = res.grids
        ref = toy_free_energy(cfg.integrator.beta, g1.nodes, g2.nodes)
        fl = flatness(histogram(res.samples, [0, 1], 30, res.grids))
        wr.writerow([seed, f"{relative_l2_error(node_surface(res.bias), ref):.4f}",
                     f"{fl['visited_fraction']:.4f}", f"{fl['max_min_ratio']:.2f}"])
        sys.stdout.flush()


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3, 4, 5])
    p.add_argument("--preset", default="toy_beta1")
    main(Sweep(**vars(p.parse_args())))
