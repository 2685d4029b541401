"""Variance of the bias-corrected density estimate and its ingredients.

The first-stage term needs, for every grid point ``v`` and every row ``i``,

    T_i(v) = sum_j c_j(v) {1(Y_i <= a_j, D_i = 1 - D_j) + 1(Y_i <= Y_j, D_i = D_j) - R_j},

summed over rows ``j`` in the cell of ``i``, with ``a_j`` the full-sample
counterfactual of row ``j``, ``R_j`` the plug-in rank at ``Y_j`` and
``c_j(v) = M'((delta_j - v)/h) w_j`` where ``w_j`` is ``1/zeta_1(a_j)`` for
untreated and ``-1/zeta_0(a_j)`` for treated rows. Both indicator sums are
suffix sums over sorted keys, so ``T`` costs ``O(n log n + n G)`` rather than
``O(n^2 G)``.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from . import kernels as kn
from .counterfactual import PhiEstimate, full_counterfactuals, phi_estimates
from .data import CellKey, Dataset
from .density import DensityCurve, EvalGrid, kernel_sum

U_STAT_MAX_N = 500
VARIANCE_FLOOR = 1e-12
ZETA_GRID = 512


# ---------------------------------------------------------------------------
# zeta
# ---------------------------------------------------------------------------

def _cell_z_probs(ds: Dataset, key):
    cs = ds.cells[tuple(key)]
    p1 = cs.p_z_given_x[1]
    p0 = 1.0 - p1
    if not (0.0 < p1 < 1.0):
        raise ValueError(f"cell {tuple(key)}: instrument is constant, zeta undefined")
    return p0, p1


def _zeta_weights(Y, D, Z, d, p0, p1):
    if d == 1:
        return D * (Z - p1) / (p1 * p0)
    return (1 - D) * (p0 - (1 - Z)) / (p1 * p0)


def zeta_hat(y, d: int, x: CellKey, ds: Dataset, h_g: float, trim: bool = False, bounds=None):
    """Reweighted kernel estimate of the scaled complier outcome density.

    With ``trim`` the value is multiplied by the boundary indicator
    ``1(lo + h_g <= y <= hi - h_g)``.
    """
    if not h_g > 0:
        raise ValueError("h_g must be positive")
    m = ds.cell_mask(x)
    p0, p1 = _cell_z_probs(ds, x)
    Y, D, Z = ds.y[m], ds.d[m].astype(float), ds.z[m].astype(float)
    wts = _zeta_weights(Y, D, Z, d, p0, p1)
    scalar = np.ndim(y) == 0
    y = np.atleast_1d(np.asarray(y, dtype=float))
    out = np.zeros(y.size)
    step = max(1, (1 << 20) // max(1, y.size))
    for s in range(0, Y.size, step):
        u = (Y[s:s + step, None] - y[None, :]) / h_g
        out += (kn.k(u) * wts[s:s + step, None]).sum(axis=0)
    out /= h_g * Y.size
    if trim:
        lo, hi = bounds if bounds is not None else ds.cells[tuple(x)].y_bounds[d]
        out = out * ((y >= lo + h_g) & (y <= hi - h_g))
    return float(out[0]) if scalar else out


@dataclass(eq=False)
class ZetaTable:
    """``zeta_hat`` tabulated on an equally spaced grid and linearly interpolated."""

    d: int
    x: CellKey
    h_g: float
    grid: np.ndarray
    values: np.ndarray
    bounds: tuple
    trimming: bool = False

    def __call__(self, y):
        y = np.asarray(y, dtype=float)
        out = np.interp(y, self.grid, self.values)
        if self.trimming:
            lo, hi = self.bounds
            out = out * ((y >= lo + self.h_g) & (y <= hi - self.h_g))
        return out

    @classmethod
    def build(cls, ds: Dataset, d: int, x: CellKey, h_g: float, bounds=None, n_points: int = ZETA_GRID,
              trim: bool = False) -> "ZetaTable":
        lo, hi = bounds if bounds is not None else ds.cells[tuple(x)].y_bounds[d]
        g = np.linspace(lo, hi, n_points) if hi > lo else np.array([lo, lo + 1e-12])
        vals = zeta_hat(g, d, x, ds, h_g)
        return cls(d, tuple(x), h_g, g, np.atleast_1d(vals), (lo, hi), trim)


def r_hat(y, d: int, x: CellKey, ds: Dataset, phi_full: PhiEstimate):
    """Plug-in rank: share of the cell below ``phi(y)`` in arm ``d`` or below ``y`` in the other arm."""
    m = ds.cell_mask(x)
    if not m.any():
        raise ValueError(f"cell {tuple(x)} is empty")
    Y, D = ds.y[m], ds.d[m]
    scalar = np.ndim(y) == 0
    y = np.atleast_1d(np.asarray(y, dtype=float))
    ph = np.atleast_1d(phi_full(y))
    a = np.sort(Y[D == d])
    b = np.sort(Y[D == 1 - d])
    out = (np.searchsorted(a, ph, side="right") + np.searchsorted(b, y, side="right")) / Y.size
    return float(out[0]) if scalar else out


# ---------------------------------------------------------------------------
# per-row ingredients
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class Ingredients:
    """Frozen per-row quantities shared by the variance and multiplier code."""

    ds: Dataset
    h_g: float
    a: np.ndarray            # full-sample counterfactual in the other arm
    r: np.ndarray            # plug-in rank at own outcome
    zeta_raw: np.ndarray     # zeta_hat at a (interpolated)
    zeta: np.ndarray         # after flooring
    w: np.ndarray            # signed inverse zeta weight (0 when trimmed)
    zf: np.ndarray           # 1(Z=0)/p_0X - 1(Z=1)/p_1X
    p_x: np.ndarray          # per-row cell share
    cell_weight: np.ndarray  # (1/p_0X + 1/p_1X) / p_X
    phis: dict = field(repr=False, default_factory=dict)
    zetas: dict = field(repr=False, default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.ds.n


def build_ingredients(ds: Dataset, h_g: float, bounds: dict | None = None, trim: bool = False,
                      floor_fraction: float = 0.01, zeta_points: int = ZETA_GRID,
                      phis: dict | None = None) -> Ingredients:
    """Counterfactuals, ranks, floored zeta weights and cell factors for every row.

    The floor uses the sign the population quantity must have (positive for
    the treated arm, negative for the untreated arm) and substitutes
    ``floor_fraction`` times the largest correctly signed value wherever the
    estimate falls below it.
    """
    n = ds.n
    phis = phis if phis is not None else phi_estimates(ds, bounds)
    a = full_counterfactuals(ds, phis)
    r = np.empty(n)
    zraw = np.empty(n)
    zeta = np.empty(n)
    w = np.zeros(n)
    zf = np.empty(n)
    p_x = np.empty(n)
    cw = np.empty(n)
    zetas = {}
    floored = {}
    trimmed = 0
    for c, key in enumerate(ds.keys):
        rows = np.flatnonzero(ds.cell_index == c)
        cs = ds.cells[key]
        p0x, p1x = cs.p_zx
        Y, D, Z = ds.y[rows], ds.d[rows], ds.z[rows]
        zf[rows] = (Z == 0) / p0x - (Z == 1) / p1x
        p_x[rows] = cs.p_x
        cw[rows] = (1.0 / p0x + 1.0 / p1x) / cs.p_x
        sorted_by_d = [np.sort(Y[D == dd]) for dd in (0, 1)]
        for d in (0, 1):
            sel = D == 1 - d
            if not sel.any():
                continue
            idx = rows[sel]
            ph = phis[(key, d)]
            zt = ZetaTable.build(ds, d, key, h_g, ph.bounds, zeta_points, trim)
            zetas[(key, d)] = zt
            r[idx] = (np.searchsorted(sorted_by_d[d], a[idx], side="right")
                      + np.searchsorted(sorted_by_d[1 - d], Y[sel], side="right")) / rows.size
            raw = np.interp(a[idx], zt.grid, zt.values)
            zraw[idx] = raw
            s = 1.0 if d == 1 else -1.0
            signed = s * raw
            top = signed.max() if signed.size else 0.0
            eps = floor_fraction * top if top > 0 else np.inf
            low = signed < eps
            floored[f"{list(key)}:d={d}"] = int(low.sum())
            zeta[idx] = s * np.where(low, eps, signed)
            keep = np.ones(idx.size, dtype=bool)
            if trim:
                lo, hi = ph.bounds
                keep = (a[idx] >= lo + h_g) & (a[idx] <= hi - h_g)
                trimmed += int((~keep).sum())
            w[idx] = np.where(keep & np.isfinite(zeta[idx]), s / zeta[idx], 0.0)
    diag = {"zeta_floor_substitutions": floored,
            "zeta_floor_total": int(sum(floored.values())),
            "zeta_trimmed": trimmed,
            "zeta_floor_fraction": floor_fraction}
    return Ingredients(ds, h_g, a, r, zraw, zeta, w, zf, p_x, cw, phis, zetas, diag)


def q_hat_pair(i: int, j: int, ing: Ingredients) -> float:
    """Estimated first-stage kernel with row ``i`` leading and row ``j`` trailing.

    Only the arm opposite to ``D_i`` contributes; zero across cells.
    """
    ds = ing.ds
    if ds.cell_index[i] != ds.cell_index[j]:
        return 0.0
    di, dj = int(ds.d[i]), int(ds.d[j])
    ind = float(ds.y[j] <= ing.a[i] and dj == 1 - di) + float(ds.y[j] <= ds.y[i] and dj == di)
    return float(ing.w[i] * (ind - ing.r[i]))


def q_hat_matrix(ing: Ingredients) -> np.ndarray:
    """Dense ``Q[j, i] = q_hat_pair(j, i)``; for small samples and tests."""
    ds = ing.ds
    Y, D, C = ds.y, ds.d, ds.cell_index
    same = C[:, None] == C[None, :]
    ind = ((Y[None, :] <= ing.a[:, None]) & (D[None, :] != D[:, None])).astype(float)
    ind += (Y[None, :] <= Y[:, None]) & (D[None, :] == D[:, None])
    return np.where(same, ing.w[:, None] * (ind - ing.r[:, None]), 0.0)


# ---------------------------------------------------------------------------
# first-stage sums
# ---------------------------------------------------------------------------

def _suffix(rows_c: np.ndarray) -> np.ndarray:
    out = np.zeros((rows_c.shape[0] + 1, rows_c.shape[1]))
    out[:-1] = np.cumsum(rows_c[::-1], axis=0)[::-1]
    return out


def coefficient_matrix(ing: Ingredients, deltas, grid, bw: kn.BandwidthSet, target,
                       weighted: bool = True) -> np.ndarray:
    """``c_j(v) = M'((delta_j - v)/h) w_j`` for target rows; zero elsewhere.

    With ``weighted=False`` the zeta weight ``w_j`` is left out.
    """
    pts = grid.points if isinstance(grid, EvalGrid) else np.asarray(grid, dtype=float)
    u = (np.asarray(deltas)[:, None] - pts[None, :]) / bw.h
    C = kn.m_prime(u, bw)
    if weighted:
        C = C * ing.w[:, None]
    C[~np.asarray(target, dtype=bool)] = 0.0
    return C


def first_stage_sums(ing: Ingredients, C: np.ndarray) -> tuple:
    """``(T, B_diag)`` where ``T[i] = sum_j C_j q_j(i)`` over the cell of ``i`` and
    ``B_diag[i] = C_i (1 - R_i)`` is the ``j = i`` contribution."""
    ds = ing.ds
    n, G = C.shape
    T = np.zeros((n, G))
    active = np.any(C != 0.0, axis=1)
    for c in np.unique(ds.cell_index[active]):
        rows = np.flatnonzero(ds.cell_index == c)
        act = rows[active[rows]]
        Cc = C[act]
        Y, D = ds.y, ds.d
        T[rows] -= (Cc * ing.r[act, None]).sum(axis=0)[None, :]
        for dd in (0, 1):
            tgt = rows[D[rows] == dd]
            if tgt.size == 0:
                continue
            # j in the other arm whose counterfactual a_j is at least Y_i
            src = act[D[act] == 1 - dd]
            if src.size:
                o = np.argsort(ing.a[src], kind="stable")
                suf = _suffix(C[src[o]])
                k = np.searchsorted(ing.a[src[o]], Y[tgt], side="left")
                T[tgt] += suf[k]
            # j in the same arm with Y_j at least Y_i
            src = act[D[act] == dd]
            if src.size:
                o = np.argsort(Y[src], kind="stable")
                suf = _suffix(C[src[o]])
                k = np.searchsorted(Y[src[o]], Y[tgt], side="left")
                T[tgt] += suf[k]
    B_diag = C * (1.0 - ing.r)[:, None]
    return T, B_diag


# ---------------------------------------------------------------------------
# variance components
# ---------------------------------------------------------------------------

def v_dagger_hat(deltas, mask, grid, bw: kn.BandwidthSet) -> np.ndarray:
    """Sample variance form of the infeasible component."""
    pts = grid.points if isinstance(grid, EvalGrid) else np.asarray(grid, dtype=float)
    deltas = np.asarray(deltas, dtype=float)
    n = deltas.size
    sel = deltas if mask is None else deltas[np.asarray(mask, dtype=bool)]
    if sel.size == 0:
        raise ValueError("no observations in the requested cell")
    s1 = kernel_sum(sel, pts, bw.h, lambda u: kn.m(u, bw)) / (n * bw.h)
    s2 = kernel_sum(sel, pts, bw.h, lambda u: kn.m(u, bw) ** 2) / (n * bw.h)
    return s2 - bw.h * s1**2


def v_ddagger_hat(ing: Ingredients, deltas, grid, bw: kn.BandwidthSet, target=None,
                  form: str = "v_statistic") -> np.ndarray:
    """First-stage component. ``target`` selects the rows whose density is estimated
    (a cell, a covariate subvector, or everything)."""
    n = ing.n
    target = np.ones(n, dtype=bool) if target is None else np.asarray(target, dtype=bool)
    if form == "v_statistic":
        C = coefficient_matrix(ing, deltas, grid, bw, target)
        T, _ = first_stage_sums(ing, C)
        return (ing.cell_weight[:, None] * T**2).sum(axis=0) / (n**3 * bw.h**3)
    if form == "u_statistic":
        if n > U_STAT_MAX_N:
            raise ValueError(f"u_statistic form is O(n^3) and limited to n <= {U_STAT_MAX_N}; "
                             "use form='v_statistic'")
        C = coefficient_matrix(ing, deltas, grid, bw, target, weighted=False)
        Q = q_hat_matrix(ing)  # Q[j, i]
        G = C.shape[1]
        out = np.zeros(G)
        for g in range(G):
            B = C[:, g][:, None] * Q          # B[j, i]
            np.fill_diagonal(B, 0.0)
            s1 = B.sum(axis=0)
            s2 = (B * B).sum(axis=0)
            out[g] = (ing.cell_weight * (s1 * s1 - s2)).sum()
        return out / (n * (n - 1) * (n - 2) * bw.h**3)
    raise ValueError(f"unknown form {form!r}")


@dataclass(eq=False)
class VarianceCurve:
    grid: EvalGrid
    v_dagger: np.ndarray
    v_ddagger: np.ndarray
    p_target: float
    n: int
    h: float
    cell: tuple = ()
    form: str = "v_statistic"
    floor: float = VARIANCE_FLOOR
    diagnostics: dict = field(default_factory=dict)

    @property
    def total_conditional(self) -> np.ndarray:
        return (self.v_dagger + self.v_ddagger) / self.p_target**2

    @property
    def total_floored(self) -> np.ndarray:
        return np.maximum(self.total_conditional, self.floor)

    @property
    def n_floored(self) -> int:
        return int(np.count_nonzero(self.total_conditional < self.floor))

    def se(self) -> np.ndarray:
        return std_error_curve(self, self.n, self.h)

    def to_csv(self, path) -> None:
        se = self.se()
        with open(path, "w", newline="") as fh:
            fh.write("# v_dagger: kernel variance term; v_ddagger: first-stage term; "
                     "total: (v_dagger + v_ddagger) / p^2; se: sqrt(total / (n h))\n")
            wr = csv.writer(fh)
            wr.writerow(["v", "v_dagger", "v_ddagger", "total", "se"])
            for row in zip(self.grid.points, self.v_dagger, self.v_ddagger, self.total_conditional, se):
                wr.writerow([repr(float(x)) for x in row])

    def diagnostics_json(self) -> str:
        return json.dumps({**self.diagnostics, "variance_floor_hits": self.n_floored}, indent=2, sort_keys=True)


def std_error_curve(variance: VarianceCurve, n: int, h: float) -> np.ndarray:
    return np.sqrt(variance.total_floored / (n * h))


@dataclass(frozen=True, eq=False)
class PointwiseCI:
    lower: np.ndarray
    upper: np.ndarray
    z: float
    alpha: float


def pointwise_ci(density: DensityCurve, se, alpha: float) -> PointwiseCI:
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")
    z = float(norm.ppf(1.0 - alpha / 2.0))
    se = np.asarray(se, dtype=float)
    return PointwiseCI(density.values - z * se, density.values + z * se, z, alpha)


def variance_curve(ing: Ingredients, deltas, grid: EvalGrid, bw: kn.BandwidthSet, target=None,
                   form: str = "v_statistic", cell: tuple = ()) -> VarianceCurve:
    """Both components for an arbitrary target mask (cell, subvector or all rows)."""
    n = ing.n
    target = np.ones(n, dtype=bool) if target is None else np.asarray(target, dtype=bool)
    if not target.any():
        raise ValueError("target selects no observations")
    vd = v_dagger_hat(deltas, target, grid, bw)
    vdd = v_ddagger_hat(ing, deltas, grid, bw, target, form)
    return VarianceCurve(grid, vd, vdd, float(target.mean()), n, bw.h, tuple(cell), form,
                         diagnostics=dict(ing.diagnostics))


def variance_conditional(ing: Ingredients, deltas, grid, bw, key: CellKey, form="v_statistic"):
    return variance_curve(ing, deltas, grid, bw, ing.ds.cell_mask(key), form, tuple(key))


def variance_subvector(ing: Ingredients, deltas, grid, bw, positions, values, form="v_statistic"):
    mask = ing.ds.subvector_mask(positions, values)
    return variance_curve(ing, deltas, grid, bw, mask, form, tuple(values))


def variance_unconditional(ing: Ingredients, deltas, grid, bw, form="v_statistic"):
    return variance_curve(ing, deltas, grid, bw, None, form, ())
