"""Scaled error of the counterfactual map at one point versus its linear (influence) representation."""
from __future__ import annotations

import argparse
from dataclasses import dataclass

import numpy as np

from itebands.simulate import DgpConfig, run_influence_experiment


@dataclass(frozen=True)
class InfluenceConfig:
    n: int = 2000
    reps: int = 200
    y: float = 2.0
    d: int = 1
    seed: int = 0
    jobs: int = 1


def main(cfg: InfluenceConfig) -> None:
    r = run_influence_experiment(DgpConfig(n=cfg.n, seed=cfg.seed), cfg.reps, y=cfg.y, d=cfg.d, jobs=cfg.jobs)
    err, lin = r["error"], r["linear"]
    print(f"corr {r['corr']:.4f}")
    print(f"sd error {err.std(ddof=1):.3f}  sd linear {lin.std(ddof=1):.3f}")
    print(f"mean remainder {np.mean(err - lin):+.3f}")


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__)
    for name, val in vars(InfluenceConfig()).items():
        p.add_argument(f"--{name}", type=type(val), default=val)
    main(InfluenceConfig(**vars(p.parse_args())))
