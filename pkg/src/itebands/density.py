"""Kernel density estimates of the individual-effect distribution."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels as kn
from .kernels import BandwidthSet, KernelSpec, TRIWEIGHT

TAGS = ("raw", "infeasible", "bias_corrected", "second_derivative")
_CHUNK = 1 << 20  # rows x grid cells evaluated per block


@dataclass(frozen=True, eq=False)
class EvalGrid:
    points: np.ndarray
    interval: tuple

    def __post_init__(self):
        p = np.asarray(self.points, dtype=float)
        if p.ndim != 1 or p.size < 1:
            raise ValueError("grid must be a nonempty 1-d array")
        if p.size > 1 and not np.all(np.diff(p) > 0):
            raise ValueError("grid points must be strictly increasing")
        lo, hi = self.interval
        if p[0] < lo - 1e-12 or p[-1] > hi + 1e-12:
            raise ValueError("grid points must lie within the interval")
        p.setflags(write=False)
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "interval", (float(lo), float(hi)))

    def __len__(self):
        return self.points.size


def default_grid(deltas=None, mask=None, interval=None, n_points: int = 101) -> EvalGrid:
    """Equally spaced grid with both endpoints.

    Without an explicit interval the 5% and 95% quantiles of the masked
    deltas are used.
    """
    if n_points < 2:
        raise ValueError("a grid needs at least 2 points")
    if interval is None:
        if deltas is None:
            raise ValueError("need either an interval or deltas")
        dl = np.asarray(deltas, dtype=float)
        if mask is not None:
            dl = dl[np.asarray(mask, dtype=bool)]
        if dl.size == 0:
            raise ValueError("no deltas to derive the interval from")
        interval = tuple(np.quantile(dl, [0.05, 0.95]))
    lo, hi = float(interval[0]), float(interval[1])
    if not lo < hi:
        raise ValueError(f"empty interval ({lo}, {hi})")
    return EvalGrid(np.linspace(lo, hi, int(n_points)), (lo, hi))


@dataclass(eq=False)
class DensityCurve:
    grid: EvalGrid
    values: np.ndarray
    bandwidths: BandwidthSet | None
    cell: tuple = ()
    estimator_tag: str = "raw"
    count: int = 0

    def __post_init__(self):
        if self.estimator_tag not in TAGS:
            raise ValueError(f"unknown estimator tag {self.estimator_tag!r}")
        if len(self.values) != len(self.grid):
            raise ValueError("values and grid differ in length")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(f"# value: {self.estimator_tag} kernel density estimate of the effect distribution\n")
            w = csv.writer(fh)
            w.writerow(["v", "value"])
            for v, f in zip(self.grid.points, self.values):
                w.writerow([repr(float(v)), repr(float(f))])

    def as_dict(self) -> dict:
        return {
            "estimator": self.estimator_tag,
            "cell": list(self.cell),
            "count": self.count,
            "bandwidths": self.bandwidths.as_dict() if self.bandwidths else None,
            "v": self.grid.points.tolist(),
            "value": np.asarray(self.values).tolist(),
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.as_dict(), fh, indent=2)


def _masked(deltas, mask):
    dl = np.asarray(deltas, dtype=float)
    if mask is not None:
        dl = dl[np.asarray(mask, dtype=bool)]
    if dl.size == 0:
        raise ValueError("no observations in the requested cell")
    return dl


def kernel_sum(deltas: np.ndarray, points: np.ndarray, h: float, fn) -> np.ndarray:
    """``sum_i fn((deltas_i - v)/h)`` at each point ``v``."""
    points = np.asarray(points, dtype=float)
    out = np.zeros(points.size)
    step = max(1, _CHUNK // max(1, points.size))
    for s in range(0, deltas.size, step):
        u = (deltas[s:s + step, None] - points[None, :]) / h
        out += fn(u).sum(axis=0)
    return out


def _as_grid(grid) -> EvalGrid:
    if isinstance(grid, EvalGrid):
        return grid
    p = np.asarray(grid, dtype=float)
    return EvalGrid(p, (float(p[0]), float(p[-1])))


def kde(deltas, mask, grid, h: float, kernel: KernelSpec = TRIWEIGHT, infeasible: bool = False,
        cell: tuple = ()) -> DensityCurve:
    if not h > 0:
        raise ValueError("h must be positive")
    grid = _as_grid(grid)
    dl = _masked(deltas, mask)
    vals = kernel_sum(dl, grid.points, h, kn.k) / (h * dl.size)
    return DensityCurve(grid, vals, None, cell, "infeasible" if infeasible else "raw", dl.size)


def kde_second_derivative(deltas, mask, grid, h_b: float, kernel: KernelSpec = TRIWEIGHT,
                          cell: tuple = ()) -> DensityCurve:
    if not h_b > 0:
        raise ValueError("h_b must be positive")
    grid = _as_grid(grid)
    dl = _masked(deltas, mask)
    vals = kernel_sum(dl, grid.points, h_b, kn.k_second) / (h_b**3 * dl.size)
    return DensityCurve(grid, vals, None, cell, "second_derivative", dl.size)


def kde_bias_corrected(deltas, mask, grid, bw: BandwidthSet, kernel: KernelSpec = TRIWEIGHT,
                       cell: tuple = ()) -> DensityCurve:
    """Bias-corrected estimate, computed in one pass with the kernel ``M``."""
    grid = _as_grid(grid)
    dl = _masked(deltas, mask)
    vals = kernel_sum(dl, grid.points, bw.h, lambda u: kn.m(u, bw, kernel)) / (bw.h * dl.size)
    return DensityCurve(grid, vals, bw, cell, "bias_corrected", dl.size)
