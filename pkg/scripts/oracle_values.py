"""Closed-form density and variance limits, plus the fixed-bandwidth first-stage term."""
from __future__ import annotations

import argparse
from dataclasses import dataclass

from itebands.simulate import (DgpConfig, population_v_ddagger_smoothed, population_variance_components,
                               true_density)


@dataclass(frozen=True)
class OracleConfig:
    gamma0: float = -0.5
    gamma1: float = 0.5
    rho: float = 0.3
    points: tuple = (0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5)
    bandwidths: tuple = (0.8, 0.4, 0.2, 0.1, 0.05)


def main(cfg: OracleConfig) -> None:
    dgp = DgpConfig(cfg.gamma0, cfg.gamma1, cfg.rho)
    print(f"{'v':>5} {'f(v)':>9} {'V+(v)':>9} {'V++(v)':>9}")
    for v in cfg.points:
        vd, vdd = population_variance_components(v, dgp)
        print(f"{v:5.2f} {float(true_density(v)):9.5f} {vd:9.5f} {vdd:9.4f}")
    print("\nV++(2) at fixed h")
    for h in cfg.bandwidths:
        print(f"  h={h:<5g} {population_v_ddagger_smoothed(2.0, h, dgp):.4f}")


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--gamma0", type=float, default=-0.5)
    p.add_argument("--gamma1", type=float, default=0.5)
    p.add_argument("--rho", type=float, default=0.3)
    a = p.parse_args()
    main(OracleConfig(a.gamma0, a.gamma1, a.rho))
