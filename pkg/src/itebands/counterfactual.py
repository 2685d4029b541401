"""Counterfactual mappings, pseudo ITEs and the linearisation term.

For target arm ``d`` in cell ``x`` the sample criterion is

    Q(t; y) = G(t) - c(y) t,
    G(t)    = sum_{D=d,Z=d} |Y - t| / N_d  -  sum_{D=d,Z=d'} |Y - t| / N_{d'},
    c(y)    = sum_{D=d',Z=d} sgn(Y - y) / N_d  -  sum_{D=d',Z=d'} sgn(Y - y) / N_{d'},

with ``N_z`` the number of cell rows having ``Z = z`` and ``sgn(0) = -1``.
``G`` only depends on the ``D = d`` rows, so its values at the kinks are
computed once per (cell, arm). The minimiser of ``G(t) - c t`` over a finite
candidate set is always a vertex of the lower convex hull of
``{(t_k, G(t_k))}``; a query reduces to a binary search of ``c`` among the
hull slopes. Dropping a query row ``i`` (which has ``D_i = d'``) only lowers
``N_{Z_i}`` by one and removes its ``-1`` from the sign sum, so three hulls
(no drop, drop from ``Z = 0``, drop from ``Z = 1``) cover every
leave-one-out query in the cell.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .data import CellKey, Dataset, Observation, CellStats


class CounterfactualError(ValueError):
    pass


def sgn(u):
    """Left-continuous sign: ``+1`` if ``u > 0`` else ``-1``."""
    return np.where(np.asarray(u) > 0, 1.0, -1.0)


# ---------------------------------------------------------------------------
# literal criterion (reference implementation)
# ---------------------------------------------------------------------------

def q_hat(t, y: float, d: int, x: CellKey, ds: Dataset, leave_out: int | None = None):
    """Leave-one-out sample criterion evaluated directly from its definition.

    ``t`` may be a scalar or an array.
    """
    dp = 1 - d
    keep = ds.cell_mask(x).copy()
    if leave_out is not None:
        keep[leave_out] = False
    Y, D, Z = ds.y[keep], ds.d[keep], ds.z[keep]
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    for zz, sign in ((d, 1.0), (dp, -1.0)):
        denom = np.count_nonzero(Z == zz)
        if denom == 0:
            raise CounterfactualError(f"cell {tuple(x)}: no observations with Z={zz}")
        yd = Y[(D == d) & (Z == zz)]
        s = sgn(Y[(D == dp) & (Z == zz)] - y).sum()
        absdev = np.abs(yd[:, None] - t.reshape(1, -1)).sum(axis=0).reshape(t.shape)
        out = out + sign * (absdev - s * t) / denom
    return out if out.ndim else float(out)


def _resolve_bounds(ds: Dataset, d: int, x: CellKey, bounds) -> tuple:
    if bounds is not None:
        lo, hi = float(bounds[0]), float(bounds[1])
    else:
        lo, hi = ds.cells[tuple(x)].y_bounds[d]
    if not (np.isfinite(lo) and np.isfinite(hi)) or lo > hi:
        raise CounterfactualError(f"cell {tuple(x)}: invalid support bounds ({lo}, {hi}) for arm d={d}")
    return lo, hi


def argmin_phi(y: float, d: int, x: CellKey, ds: Dataset, leave_out: int | None = None,
               bounds=None, strategy: str = "exact", grid_points: int = 30001) -> float:
    """Global minimiser of the criterion over the support bounds.

    ``strategy="exact"`` evaluates every kink plus both bounds; ``"grid"``
    searches a uniform grid of ``grid_points`` points. Ties go to the
    smallest ``t``.
    """
    lo, hi = _resolve_bounds(ds, d, x, bounds)
    if strategy == "exact":
        keep = ds.cell_mask(x) & (ds.d == d)
        if leave_out is not None:
            keep[leave_out] = False
        kinks = ds.y[keep]
        if kinks.size == 0:
            raise CounterfactualError(f"cell {tuple(x)}: no kink candidates with D={d}")
        cand = np.unique(np.concatenate([[lo, hi], kinks[(kinks > lo) & (kinks < hi)]]))
    elif strategy == "grid":
        cand = np.linspace(lo, hi, int(grid_points))
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    vals = q_hat(cand, y, d, x, ds, leave_out)
    best = vals.min()
    tol = 1e-12 * max(1.0, abs(best))
    return float(cand[np.flatnonzero(vals <= best + tol)[0]])


# ---------------------------------------------------------------------------
# fast solver
# ---------------------------------------------------------------------------

@njit(cache=True)
def _lower_hull(t, g):
    n = t.shape[0]
    idx = np.empty(n, dtype=np.int64)
    m = 0
    for k in range(n):
        while m >= 2:
            i0 = idx[m - 2]
            i1 = idx[m - 1]
            cross = (t[i1] - t[i0]) * (g[k] - g[i0]) - (g[i1] - g[i0]) * (t[k] - t[i0])
            if cross <= 0.0:
                m -= 1
            else:
                break
        idx[m] = k
        m += 1
    return idx[:m]


def _abs_dev_sums(sorted_y: np.ndarray, t: np.ndarray) -> np.ndarray:
    """``sum_j |sorted_y[j] - t_k|`` for every ``t_k``."""
    if sorted_y.size == 0:
        return np.zeros_like(t)
    cs = np.concatenate([[0.0], np.cumsum(sorted_y)])
    k = np.searchsorted(sorted_y, t, side="right")
    m = sorted_y.size
    return t * k - cs[k] + (cs[m] - cs[k]) - t * (m - k)


class _Hull:
    __slots__ = ("t", "slopes")

    def __init__(self, cand, g):
        h = _lower_hull(cand, g)
        self.t = cand[h]
        gh = g[h]
        self.slopes = np.diff(gh) / np.diff(self.t) if h.size > 1 else np.empty(0)

    def argmin(self, c):
        # slopes within rounding of c are exact ties; those resolve to the smaller t
        c = np.asarray(c, dtype=float)
        return self.t[np.searchsorted(self.slopes, c - 1e-12 * np.maximum(1.0, np.abs(c)), side="left")]


class ArmSolver:
    """Fast argmin for one (cell, target arm) pair.

    ``Y, D, Z`` are the rows of one cell only.
    """

    def __init__(self, Y, D, Z, d: int, bounds: tuple, key: CellKey = ()):
        self.d = d
        self.key = tuple(key)
        dp = 1 - d
        lo, hi = bounds
        self.bounds = (float(lo), float(hi))
        self.N = np.array([np.count_nonzero(Z == 0), np.count_nonzero(Z == 1)], dtype=float)
        kinks = Y[D == d]
        if kinks.size == 0:
            raise CounterfactualError(f"cell {self.key}: no kink candidates with D={d}")
        cand = np.unique(np.concatenate([[lo, hi], kinks[(kinks > lo) & (kinks < hi)]]))
        self.cand = cand
        self._A = [_abs_dev_sums(np.sort(Y[(D == d) & (Z == z)]), cand) for z in (0, 1)]
        self._q_sorted = [np.sort(Y[(D == dp) & (Z == z)]) for z in (0, 1)]
        self._hulls = {}

    def _g(self, N):
        d, dp = self.d, 1 - self.d
        return self._A[d] / N[d] - self._A[dp] / N[dp]

    def _hull(self, drop_z):
        h = self._hulls.get(drop_z)
        if h is None:
            N = self.N.copy()
            if drop_z is not None:
                N[drop_z] -= 1
            if np.any(N <= 0):
                z = int(np.flatnonzero(N <= 0)[0])
                raise CounterfactualError(f"cell {self.key}: no observations with Z={z}"
                                          + (" after leaving one out" if drop_z is not None else ""))
            h = _Hull(self.cand, self._g(N))
            self._hulls[drop_z] = h
        return h

    def slope_c(self, y, drop_z=None):
        """``c(y)``; with ``drop_z`` the query row itself (Z = drop_z) is left out."""
        y = np.asarray(y, dtype=float)
        S, N = [], self.N.copy()
        for z in (0, 1):
            qs = self._q_sorted[z]
            S.append(qs.size - 2.0 * np.searchsorted(qs, y, side="right"))
        if drop_z is not None:
            S[drop_z] = S[drop_z] + 1.0
            N[drop_z] -= 1
        d, dp = self.d, 1 - self.d
        return S[d] / N[d] - S[dp] / N[dp]

    def solve(self, y, drop_z=None):
        y = np.asarray(y, dtype=float)
        return self._hull(drop_z).argmin(self.slope_c(y, drop_z))

    def solve_grid(self, y, grid_points: int = 30001, drop_z=None, chunk: int = 256):
        lo, hi = self.bounds
        tg = np.linspace(lo, hi, int(grid_points))
        N = self.N.copy()
        if drop_z is not None:
            N[drop_z] -= 1
        # G is linear between consecutive candidates, so interpolation is exact
        g = np.interp(tg, self.cand, self._g(N))
        c = np.atleast_1d(self.slope_c(y, drop_z))
        out = np.empty(c.shape)
        for s in range(0, c.size, chunk):
            q = g[None, :] - c[s:s + chunk, None] * tg[None, :]
            out[s:s + chunk] = tg[np.argmin(q, axis=1)]
        return out.reshape(np.shape(y))


@dataclass
class PhiEstimate:
    """Full-sample estimate of the counterfactual map into arm ``d`` for one cell."""

    d: int
    x: CellKey
    bounds: tuple
    solver: ArmSolver = field(repr=False)

    def __call__(self, y):
        out = self.solver.solve(y)
        return float(out) if np.ndim(out) == 0 else out

    def table(self, ys) -> np.ndarray:
        ys = np.asarray(ys, dtype=float)
        return np.column_stack([ys, self.solver.solve(ys)])


def _cell_bounds(ds: Dataset, key, d, bounds):
    if bounds is not None and tuple(key) in bounds:
        b = bounds[tuple(key)]
        b = b[d] if np.ndim(b) == 2 else b
        return _resolve_bounds(ds, d, key, b)
    return _resolve_bounds(ds, d, key, None)


def phi_estimates(ds: Dataset, bounds: dict | None = None) -> dict:
    """``{(key, d): PhiEstimate}`` for every cell and arm."""
    out = {}
    for c, key in enumerate(ds.keys):
        m = ds.cell_index == c
        Y, D, Z = ds.y[m], ds.d[m], ds.z[m]
        for d in (0, 1):
            b = _cell_bounds(ds, key, d, bounds)
            out[(key, d)] = PhiEstimate(d, key, b, ArmSolver(Y, D, Z, d, b, key))
    return out


@dataclass
class PseudoIteTable:
    delta_hat: np.ndarray
    counterfactual: np.ndarray
    leave_one_out: bool
    strategy: str = "exact"
    diagnostics: dict = field(default_factory=dict)

    def __len__(self):
        return self.delta_hat.shape[0]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("# delta_hat: pseudo individual effect; counterfactual: estimated outcome in the other arm\n")
            w = csv.writer(fh)
            w.writerow(["row_id", "delta_hat", "counterfactual"])
            for i, (a, b) in enumerate(zip(self.delta_hat, self.counterfactual)):
                w.writerow([i, repr(float(a)), repr(float(b))])


def pseudo_ites(ds: Dataset, bounds: dict | None = None, strategy: str = "exact",
                leave_one_out: bool = True, grid_points: int = 30001,
                phi_override=None) -> PseudoIteTable:
    """Pseudo individual effects for every row.

    ``phi_override(y, d, key)`` replaces the estimated maps (used to inject
    the true maps in simulation checks).
    """
    n = ds.n
    cf = np.empty(n)
    nonmono = 0
    for c, key in enumerate(ds.keys):
        rows = np.flatnonzero(ds.cell_index == c)
        Y, D, Z = ds.y[rows], ds.d[rows], ds.z[rows]
        for d in (0, 1):
            q = D == 1 - d  # rows whose counterfactual lies in arm d
            if not q.any():
                continue
            yq, zq = Y[q], Z[q]
            if phi_override is not None:
                cf[rows[q]] = phi_override(yq, d, key)
                continue
            b = _cell_bounds(ds, key, d, bounds)
            try:
                solver = ArmSolver(Y, D, Z, d, b, key)
            except CounterfactualError as e:
                raise CounterfactualError(f"{e} (needed for rows {rows[q][:5].tolist()}...)") from None
            vals = np.empty(yq.shape)
            for z in (0, 1):
                sel = zq == z
                if not sel.any():
                    continue
                drop = z if leave_one_out else None
                try:
                    if strategy == "exact":
                        vals[sel] = solver.solve(yq[sel], drop)
                    elif strategy == "grid":
                        vals[sel] = solver.solve_grid(yq[sel], grid_points, drop)
                    else:
                        raise ValueError(f"unknown strategy {strategy!r}")
                except CounterfactualError as e:
                    first = int(rows[q][sel][0])
                    raise CounterfactualError(f"row {first + 1}: {e}") from None
            cf[rows[q]] = vals
            order = np.argsort(yq, kind="stable")
            nonmono += int(np.count_nonzero(np.diff(solver.solve(yq[order])) < 0))
    delta = np.where(ds.d == 1, ds.y - cf, cf - ds.y)
    return PseudoIteTable(delta, cf, leave_one_out, strategy, {"monotonicity_violations": nonmono})


def full_counterfactuals(ds: Dataset, phis: dict | None = None) -> np.ndarray:
    """Full-sample (no leave-out) counterfactual for each row in the other arm."""
    phis = phis if phis is not None else phi_estimates(ds)
    out = np.empty(ds.n)
    for c, key in enumerate(ds.keys):
        rows = np.flatnonzero(ds.cell_index == c)
        for d in (0, 1):
            sel = rows[ds.d[rows] == 1 - d]
            if sel.size:
                out[sel] = phis[(key, d)].solver.solve(ds.y[sel])
    return out


# ---------------------------------------------------------------------------
# linearisation term
# ---------------------------------------------------------------------------

def influence_l(row: Observation, y: float, d: int, x: CellKey, zeta_at: float, phi_at: float,
                r_at: float, cell: CellStats) -> float:
    """Influence of one observation on the estimated map at ``y``."""
    if not zeta_at > 0:
        raise ValueError(f"zeta must be positive, got {zeta_at}")
    if tuple(row.x) != tuple(x):
        return 0.0
    p0, p1 = cell.p_zx
    dp = 1 - d
    core = float(row.y <= phi_at and row.d == d) + float(row.y <= y and row.d == dp) - r_at
    zf = (row.z == 0) / p0 - (row.z == 1) / p1
    return core * zf / zeta_at


def influence_l_array(ds: Dataset, y: float, d: int, x: CellKey, zeta_at: float, phi_at: float,
                      r_at: float, p0x: float | None = None, p1x: float | None = None) -> np.ndarray:
    """Vectorised :func:`influence_l` over all rows of ``ds``."""
    if not zeta_at > 0:
        raise ValueError(f"zeta must be positive, got {zeta_at}")
    cs = ds.cells[tuple(x)]
    p0 = cs.p_zx[0] if p0x is None else p0x
    p1 = cs.p_zx[1] if p1x is None else p1x
    inx = ds.cell_mask(x)
    core = ((ds.y <= phi_at) & (ds.d == d)).astype(float) + ((ds.y <= y) & (ds.d == 1 - d)) - r_at
    zf = (ds.z == 0) / p0 - (ds.z == 1) / p1
    return np.where(inx, core * zf / zeta_at, 0.0)
