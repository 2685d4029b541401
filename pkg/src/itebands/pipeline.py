"""End-to-end estimation and band construction for one target population."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels as kn
from .bands import (BandResult, Target, build_multiplier_precompute, jmb_band, jmb_supnorms,
                    np_bootstrap_band, np_bootstrap_replicates, np_bootstrap_supnorms, ptw_band)
from .counterfactual import PseudoIteTable, pseudo_ites
from .data import Dataset
from .density import DensityCurve, EvalGrid, default_grid, kde_bias_corrected
from .variance import Ingredients, VarianceCurve, build_ingredients, variance_curve


@dataclass(frozen=True)
class FitOptions:
    grid_lo: float | None = None
    grid_hi: float | None = None
    grid_points: int = 101
    h: float | None = None
    h_b: float | None = None
    h_g: float | None = None
    trim_zeta: bool = False
    zeta_floor: float = 0.01
    form: str = "v_statistic"
    strategy: str = "exact"


@dataclass(eq=False)
class Fit:
    ds: Dataset
    target: Target
    mask: np.ndarray
    pseudo: PseudoIteTable
    bw: kn.BandwidthSet
    grid: EvalGrid
    density: DensityCurve
    ingredients: Ingredients
    variance: VarianceCurve
    options: FitOptions
    extras: dict = field(default_factory=dict)


def choose_bandwidths(ds: Dataset, deltas: np.ndarray, mask: np.ndarray, opts: FitOptions) -> kn.BandwidthSet:
    """Rule of thumb on the target rows for ``h``/``h_b`` and on all outcomes for ``h_g``;
    explicit values in ``opts`` win."""
    sel = deltas[mask]
    rot = kn.silverman_bandwidths(int(sel.size), float(np.std(sel, ddof=1)), float(np.std(ds.y, ddof=1)))
    if ds.n != sel.size:
        rot = kn.BandwidthSet(rot.h, rot.h_b, kn.silverman_bandwidths(ds.n, 1.0, float(np.std(ds.y, ddof=1))).h_g)
    return kn.BandwidthSet(opts.h or rot.h, opts.h_b or rot.h_b, opts.h_g or rot.h_g)


def fit(ds: Dataset, target: Target = Target(), opts: FitOptions = FitOptions()) -> Fit:
    mask = target.mask(ds)
    if not mask.any():
        raise ValueError(f"target {target} selects no observations")
    pseudo = pseudo_ites(ds, strategy=opts.strategy)
    bw = choose_bandwidths(ds, pseudo.delta_hat, mask, opts)
    interval = None
    if opts.grid_lo is not None and opts.grid_hi is not None:
        interval = (opts.grid_lo, opts.grid_hi)
    grid = default_grid(pseudo.delta_hat, mask, interval, opts.grid_points)
    dens = kde_bias_corrected(pseudo.delta_hat, mask, grid, bw, cell=target.label)
    ing = build_ingredients(ds, bw.h_g, trim=opts.trim_zeta, floor_fraction=opts.zeta_floor)
    var = variance_curve(ing, pseudo.delta_hat, grid, bw, mask, opts.form, target.label)
    return Fit(ds, target, mask, pseudo, bw, grid, dens, ing, var, opts)


def make_bands(f: Fit, kinds, alphas, n_boot: int, seed: int, leave_one_out: bool = True,
               jobs: int = 1, multipliers=None) -> dict:
    """``{(kind, alpha): BandResult}`` for every requested kind and level.

    All levels of a family share the same bootstrap draws.
    """
    kinds = list(kinds)
    out: dict = {}
    n = f.ds.n
    if any(k.startswith("jmb") for k in kinds):
        pre = build_multiplier_precompute(f.ingredients, f.pseudo.delta_hat, f.grid, f.bw, f.mask)
        sups = jmb_supnorms(pre, n_boot, seed, f.variance, multipliers)
        for a in alphas:
            for k in kinds:
                if k.startswith("jmb"):
                    out[(k, a)] = jmb_band(pre, f.variance, f.density, a, n_boot, seed,
                                           k == "jmb_studentized", sups=sups)
    if any(k.startswith("npb") or k == "ptw" for k in kinds):
        reps = np_bootstrap_replicates(f.ds, f.grid, f.bw, n_boot, seed, f.target, leave_one_out, jobs)
        sups = np_bootstrap_supnorms(reps, f.density, n, f.bw.h, f.variance)
        for a in alphas:
            for k in kinds:
                if k.startswith("npb"):
                    out[(k, a)] = np_bootstrap_band(reps, f.density, n, f.bw.h, a, k == "npb_studentized",
                                                    f.variance, sups)
                elif k == "ptw":
                    out[(k, a)] = ptw_band(reps, f.density, a)
        f.extras["np_redraws"] = reps.redraws
    return out
