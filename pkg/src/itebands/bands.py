"""Uniform confidence bands: multiplier bootstrap, nonparametric bootstrap and
the interpolated pointwise percentile band."""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from multiprocessing import get_context

import numpy as np

from . import kernels as kn
from .counterfactual import CounterfactualError, pseudo_ites
from .data import Dataset
from .density import DensityCurve, EvalGrid, kernel_sum
from .rng import MULTIPLIER, RESAMPLE, stream
from .variance import Ingredients, VarianceCurve, coefficient_matrix, first_stage_sums, q_hat_pair

KINDS = ("jmb_const", "jmb_studentized", "npb_const", "npb_studentized", "ptw")
DEFAULT_MEMORY_BUDGET = 2 * 1024**3


class BootstrapError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# targets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Target:
    """Which rows the density refers to: one cell, a covariate subvector, or all rows."""

    kind: str = "all"
    key: tuple = ()
    positions: tuple = ()
    values: tuple = ()

    def mask(self, ds: Dataset) -> np.ndarray:
        if self.kind == "all":
            return np.ones(ds.n, dtype=bool)
        if self.kind == "cell":
            if tuple(self.key) not in ds.cells:
                return np.zeros(ds.n, dtype=bool)
            return ds.cell_mask(self.key)
        if self.kind == "subvector":
            return ds.subvector_mask(self.positions, self.values)
        raise ValueError(f"unknown target kind {self.kind!r}")

    @property
    def label(self) -> tuple:
        return tuple(self.key) if self.kind == "cell" else tuple(self.values)

    @classmethod
    def cell(cls, key) -> "Target":
        return cls("cell", tuple(key))

    @classmethod
    def subvector(cls, positions, values) -> "Target":
        return cls("subvector", (), tuple(positions), tuple(values))


# ---------------------------------------------------------------------------
# results
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class BandResult:
    grid: EvalGrid
    center: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    critical_value: float
    kind: str
    alpha: float
    n_boot: int
    seed: int
    cell: tuple = ()
    diagnostics: dict = field(default_factory=dict)

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def covers(self, truth) -> bool:
        truth = np.asarray(truth, dtype=float)
        return bool(np.all((self.lower <= truth) & (truth <= self.upper)))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(f"# {self.kind} band at level {1 - self.alpha:g}; center: bias-corrected density estimate\n")
            w = csv.writer(fh)
            w.writerow(["v", "center", "lower", "upper"])
            for row in zip(self.grid.points, self.center, self.lower, self.upper):
                w.writerow([repr(float(x)) for x in row])

    def meta(self) -> dict:
        return {"kind": self.kind, "alpha": self.alpha, "critical_value": self.critical_value,
                "n_boot": self.n_boot, "seed": self.seed, "cell": list(self.cell),
                "diagnostics": self.diagnostics}

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.meta(), fh, indent=2, sort_keys=True)


def critical_value(sups, alpha: float) -> float:
    """Smallest ``t`` with empirical CDF of ``sups`` at ``t`` at least ``1 - alpha``."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    s = np.sort(np.asarray(sups, dtype=float))
    k = math.ceil(s.size * (1.0 - alpha) - 1e-9)
    return float(s[max(k, 1) - 1])


def _order_stat(a: np.ndarray, prob: float, axis=0):
    s = np.sort(a, axis=axis)
    k = math.ceil(s.shape[axis] * prob - 1e-9)
    return np.take(s, max(k, 1) - 1, axis=axis)


def _symmetric_band(center, half, crit, kind, alpha, n_boot, seed, cell, diag) -> BandResult:
    return BandResult(center.grid, center.values.copy(), center.values - half, center.values + half,
                      float(crit), kind, alpha, n_boot, seed, tuple(cell), diag)


def _scale(variance: VarianceCurve | None, n: int, h: float, studentized: bool, G: int):
    if not studentized:
        return np.full(G, 1.0 / math.sqrt(n * h))
    if variance is None:
        raise ValueError("studentized bands need a variance curve")
    return variance.se()


# ---------------------------------------------------------------------------
# multiplier bootstrap
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class MultiplierPrecompute:
    u1_table: np.ndarray   # (n, G)
    mu_table: np.ndarray   # (G,)
    p_hat_x: float
    h: float

    @property
    def n(self) -> int:
        return self.u1_table.shape[0]

    def centred(self) -> np.ndarray:
        return (self.u1_table - self.mu_table[None, :]) / self.p_hat_x


def u_hat_kernel(j: int, i: int, v: float, ing: Ingredients, deltas, bw: kn.BandwidthSet, target) -> float:
    """Estimated two-sample kernel with ``j`` driving the first-stage part and ``i``
    the kernel part."""
    h = bw.h
    target = np.asarray(target, dtype=bool)
    first = h**-0.5 * float(kn.m((deltas[i] - v) / h, bw)) * target[i]
    if not target[j]:
        return first
    second = h**-1.5 * float(kn.m_prime((deltas[j] - v) / h, bw)) * q_hat_pair(j, i, ing) * ing.zf[i]
    return first + second


def build_multiplier_precompute(ing: Ingredients, deltas, grid: EvalGrid, bw: kn.BandwidthSet, target=None,
                                memory_budget: int = DEFAULT_MEMORY_BUDGET) -> MultiplierPrecompute:
    n, G = ing.n, len(grid)
    if 4 * n * G * 8 > memory_budget:
        raise MemoryError(f"multiplier tables need about {4 * n * G * 8 / 1e9:.2f} GB; "
                          "use a coarser grid or raise the memory budget")
    target = np.ones(n, dtype=bool) if target is None else np.asarray(target, dtype=bool)
    deltas = np.asarray(deltas, dtype=float)
    h = bw.h
    mk = kn.m((deltas[:, None] - grid.points[None, :]) / h, bw) * target[:, None] / math.sqrt(h)
    C = coefficient_matrix(ing, deltas, grid, bw, target)
    T, diag = first_stage_sums(ing, C)
    u1 = mk + (T - diag) * ing.zf[:, None] / ((n - 1) * h**1.5)
    mu = mk.mean(axis=0)
    return MultiplierPrecompute(u1, mu, float(target.mean()), h)


def multiplier_draws(n: int, n_boot: int, seed: int, start: int = 0) -> np.ndarray:
    """Gaussian multipliers; row ``b`` depends only on ``(seed, b)``."""
    return np.stack([stream(seed, b, 0, MULTIPLIER).standard_normal(n) for b in range(start, start + n_boot)])


def jmb_supnorms(pre: MultiplierPrecompute, n_boot: int, seed: int, variance: VarianceCurve | None = None,
                 multipliers: np.ndarray | None = None, block: int = 128) -> dict:
    """Sup-norms of the multiplier process, raw and studentized."""
    if n_boot < 100 and multipliers is None:
        warnings.warn(f"n_boot={n_boot} is small; critical values will be noisy", stacklevel=2)
    A = pre.centred()
    n = pre.n
    inv_sd = None
    if variance is not None:
        inv_sd = 1.0 / np.sqrt(variance.total_floored)
    raw, stud = [], []
    B = n_boot if multipliers is None else multipliers.shape[0]
    for s in range(0, B, block):
        nu = multipliers[s:s + block] if multipliers is not None else multiplier_draws(n, min(block, B - s), seed, s)
        S = nu @ A / math.sqrt(n)
        raw.append(np.abs(S).max(axis=1))
        if inv_sd is not None:
            stud.append(np.abs(S * inv_sd[None, :]).max(axis=1))
    out = {"raw": np.concatenate(raw)}
    if inv_sd is not None:
        out["studentized"] = np.concatenate(stud)
    return out


def jmb_band(pre: MultiplierPrecompute, variance: VarianceCurve | None, density: DensityCurve, alpha: float,
             n_boot: int, seed: int, studentized: bool, multipliers: np.ndarray | None = None,
             sups: dict | None = None, n: int | None = None) -> BandResult:
    if sups is None:
        sups = jmb_supnorms(pre, n_boot, seed, variance if studentized else None, multipliers)
    s = sups["studentized" if studentized else "raw"]
    crit = critical_value(s, alpha)
    n = pre.n if n is None else n
    scale = _scale(variance, n, pre.h, studentized, len(density.grid))
    diag = {}
    if variance is not None and studentized:
        diag["variance_floor_hits"] = variance.n_floored
    kind = "jmb_studentized" if studentized else "jmb_const"
    return _symmetric_band(density, crit * scale, crit, kind, alpha, s.size, seed, density.cell, diag)


# ---------------------------------------------------------------------------
# nonparametric bootstrap
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class BootstrapReplicates:
    values: np.ndarray   # (B, G) bootstrap bias-corrected estimates
    redraws: int
    seed: int
    leave_one_out: bool


def _one_replicate(ds: Dataset, grid: EvalGrid, bw: kn.BandwidthSet, target: Target, seed: int, b: int,
                   bounds: dict, loo: bool, max_attempts: int):
    for attempt in range(max_attempts + 1):
        idx = stream(seed, b, attempt, RESAMPLE).integers(0, ds.n, ds.n)
        bs = ds.take(np.sort(idx))
        mask = target.mask(bs)
        if not mask.any():
            continue
        # targets are unions of cells and cells do not interact, so only those rows matter
        sub = bs if mask.all() else bs.take(np.flatnonzero(mask))
        if any(sub.cells[k].flags for k in sub.keys):
            continue
        try:
            t = pseudo_ites(sub, {k: bounds[k] for k in sub.keys if k in bounds}, leave_one_out=loo)
        except CounterfactualError:
            continue
        vals = kernel_sum(t.delta_hat, grid.points, bw.h, lambda u: kn.m(u, bw)) / (bw.h * sub.n)
        return vals, attempt
    return None, max_attempts + 1


def _replicate_chunk(args):
    ds, grid, bw, target, seed, idxs, bounds, loo, max_attempts = args
    out = []
    for b in idxs:
        out.append(_one_replicate(ds, grid, bw, target, seed, b, bounds, loo, max_attempts))
    return out


def np_bootstrap_replicates(ds: Dataset, grid: EvalGrid, bw: kn.BandwidthSet, n_boot: int, seed: int,
                            target: Target = Target(), leave_one_out: bool = True, jobs: int = 1,
                            bounds: dict | None = None) -> BootstrapReplicates:
    """Resample rows, recompute pseudo effects and the bias-corrected estimate.

    Bandwidths and support bounds stay at their original-sample values.
    Resamples that leave some cell without an instrument or treatment arm are
    redrawn; more than ``max(1, n_boot // 100)`` redraws is an error.
    """
    if not leave_one_out:
        warnings.warn("bootstrap pseudo effects computed without leave-one-out", stacklevel=2)
    if bounds is None:
        bounds = {k: ds.cells[k].y_bounds for k in ds.keys}
    cap = max(1, n_boot // 100)
    idxs = list(range(n_boot))
    if jobs > 1 and n_boot > 1:
        chunks = [idxs[i::jobs] for i in range(jobs)]
        with get_context("spawn").Pool(jobs) as pool:
            parts = pool.map(_replicate_chunk, [(ds, grid, bw, target, seed, c, bounds, leave_one_out, cap)
                                                for c in chunks])
        res = [None] * n_boot
        for c, part in zip(chunks, parts):
            for b, r in zip(c, part):
                res[b] = r
    else:
        res = _replicate_chunk((ds, grid, bw, target, seed, idxs, bounds, leave_one_out, cap))
    redraws = sum(r[1] for r in res)
    if redraws > cap or any(r[0] is None for r in res):
        raise BootstrapError(f"{redraws} degenerate resamples exceed the cap of {cap}")
    return BootstrapReplicates(np.stack([r[0] for r in res]), redraws, seed, leave_one_out)


def np_bootstrap_supnorms(reps: BootstrapReplicates, density: DensityCurve, n: int, h: float,
                          variance: VarianceCurve | None = None) -> dict:
    S = math.sqrt(n * h) * (reps.values - density.values[None, :])
    out = {"raw": np.abs(S).max(axis=1)}
    if variance is not None:
        out["studentized"] = np.abs(S / np.sqrt(variance.total_floored)[None, :]).max(axis=1)
    return out


def np_bootstrap_band(reps: BootstrapReplicates, density: DensityCurve, n: int, h: float, alpha: float,
                      studentized: bool, variance: VarianceCurve | None = None,
                      sups: dict | None = None) -> BandResult:
    if sups is None:
        sups = np_bootstrap_supnorms(reps, density, n, h, variance if studentized else None)
    s = sups["studentized" if studentized else "raw"]
    crit = critical_value(s, alpha)
    scale = _scale(variance, n, h, studentized, len(density.grid))
    kind = "npb_studentized" if studentized else "npb_const"
    diag = {"redraws": reps.redraws, "leave_one_out": reps.leave_one_out}
    return _symmetric_band(density, crit * scale, crit, kind, alpha, s.size, reps.seed, density.cell, diag)


def ptw_band(reps: BootstrapReplicates, density: DensityCurve, alpha: float) -> BandResult:
    """Percentile intervals computed separately at each grid point and joined.

    The percentile interval need not contain the centre estimate.
    """
    lo = _order_stat(reps.values, alpha / 2.0)
    hi = _order_stat(reps.values, 1.0 - alpha / 2.0)
    return BandResult(density.grid, density.values.copy(), lo, hi, float("nan"), "ptw", alpha,
                      reps.values.shape[0], reps.seed, density.cell, {"redraws": reps.redraws})
