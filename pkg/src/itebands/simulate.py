"""Monte Carlo design, closed-form oracles and coverage experiments.

Design: ``(U, V)`` standard bivariate normal with correlation ``rho``,
``eps = Phi(U)``, ``nu = Phi(V)``, ``Z = 1(N > 0)`` with ``N`` independent,
``D = 1(gamma0 + gamma1 Z + nu >= 0)`` and ``Y = (eps + 1)^(2 + D)``.
The individual effect is ``Delta = eps (eps + 1)^2``, supported on [0, 4].
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import integrate
from scipy.special import ndtr, ndtri

from . import kernels as kn
from .data import Dataset
from .rng import stream


@dataclass(frozen=True)
class DgpConfig:
    gamma0: float = -0.5
    gamma1: float = 0.5
    rho: float = 0.3
    n: int = 2000
    seed: int = 0

    def __post_init__(self):
        if not -1.0 < self.rho < 1.0:
            raise ValueError("rho must lie in (-1, 1)")
        if self.n < 2:
            raise ValueError("n must be at least 2")

    def as_dict(self) -> dict:
        return asdict(self)

    @property
    def p_z1(self) -> float:
        return 0.5


@dataclass(frozen=True, eq=False)
class SimSample:
    dataset: Dataset
    eps: np.ndarray
    delta: np.ndarray

    def true_counterfactual(self) -> np.ndarray:
        """Outcome each row would have had under the other treatment."""
        d = self.dataset.d
        return np.where(d == 1, (self.eps + 1.0) ** 2, (self.eps + 1.0) ** 3)


def draw_sample(config: DgpConfig, index: int = 0, attempt: int = 0) -> SimSample:
    g = stream(config.seed, index, attempt)
    n = config.n
    e = g.standard_normal((n, 3))
    u = e[:, 0]
    v = config.rho * e[:, 0] + np.sqrt(1.0 - config.rho**2) * e[:, 1]
    eps, nu = ndtr(u), ndtr(v)
    z = (e[:, 2] > 0).astype(np.int8)
    d = (config.gamma0 + config.gamma1 * z + nu >= 0).astype(np.int8)
    y = (eps + 1.0) ** (2.0 + d)
    ds = Dataset.from_arrays(y, d, z)
    return SimSample(ds, eps, eps * (eps + 1.0) ** 2)


# ---------------------------------------------------------------------------
# closed-form pieces
# ---------------------------------------------------------------------------

_SUPPORT = {1: (1.0, 4.0), 0: (1.0, 8.0)}  # support of the source outcome for each target arm


def true_phi(y, d: int):
    """Map an outcome observed in arm ``1 - d`` to its value in arm ``d``."""
    y = np.asarray(y, dtype=float)
    lo, hi = _SUPPORT[d]
    if np.any((y < lo - 1e-12) | (y > hi + 1e-12)):
        raise ValueError(f"y outside [{lo}, {hi}] for target arm {d}")
    out = y**1.5 if d == 1 else y ** (2.0 / 3.0)
    return float(out) if out.ndim == 0 else out


def delta_of_eps(e):
    e = np.asarray(e, dtype=float)
    return e * (e + 1.0) ** 2


def upsilon(v, iters: int = 50):
    """Root in [0, 1] of ``e (e + 1)^2 = v`` by bisection (vectorised)."""
    v = np.asarray(v, dtype=float)
    lo = np.zeros_like(v)
    hi = np.ones_like(v)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        below = mid * (mid + 1.0) ** 2 < v
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


def true_density(v):
    v = np.asarray(v, dtype=float)
    inside = (v > 0) & (v < 4)
    e = upsilon(np.clip(v, 0.0, 4.0))
    out = np.where(inside, 1.0 / ((e + 1.0) * (3.0 * e + 1.0)), 0.0)
    return float(out) if out.ndim == 0 else out


def _thresholds(cfg: DgpConfig):
    return tuple(-cfg.gamma0 - cfg.gamma1 * z for z in (0, 1))


def _pr_nu_ge(c: float, e, rho: float):
    """``Pr[nu >= c | eps = e]``."""
    e = np.asarray(e, dtype=float)
    if c <= 0:
        return np.ones_like(e)
    if c >= 1:
        return np.zeros_like(e)
    u = ndtri(np.clip(e, 1e-300, 1 - 1e-16))
    return ndtr((rho * u - ndtri(c)) / np.sqrt(1.0 - rho**2))


def p_treated_given_z(cfg: DgpConfig) -> tuple:
    return tuple(float(1.0 - np.clip(c, 0.0, 1.0)) for c in _thresholds(cfg))


def pr_treated_given_eps(e, cfg: DgpConfig):
    c0, c1 = _thresholds(cfg)
    return 0.5 * (_pr_nu_ge(c0, e, cfg.rho) + _pr_nu_ge(c1, e, cfg.rho))


def pr_complier_given_eps(e, cfg: DgpConfig):
    c0, c1 = _thresholds(cfg)
    return _pr_nu_ge(c1, e, cfg.rho) - _pr_nu_ge(c0, e, cfg.rho)


def population_zeta(y, d: int, cfg: DgpConfig):
    """Complier outcome density in arm ``d`` times the first-stage gap for that arm."""
    y = np.asarray(y, dtype=float)
    if d == 1:
        e = np.cbrt(y) - 1.0
        return pr_complier_given_eps(e, cfg) / (3.0 * (e + 1.0) ** 2)
    e = np.sqrt(y) - 1.0
    return -pr_complier_given_eps(e, cfg) / (2.0 * (e + 1.0))


def population_r(y, d: int):
    """Population ``R`` for target arm ``d`` evaluated at a source outcome ``y``: the rank of eps."""
    y = np.asarray(y, dtype=float)
    return np.cbrt(y) - 1.0 if d == 0 else np.sqrt(y) - 1.0


def _rho_weight(e, cfg: DgpConfig):
    p1 = pr_treated_given_eps(e, cfg)
    z1 = population_zeta((e + 1.0) ** 3, 1, cfg)
    z0 = population_zeta((e + 1.0) ** 2, 0, cfg)
    return (1.0 - p1) / z1 - p1 / z0


def population_variance_components(v: float, cfg: DgpConfig = DgpConfig(),
                                   spec: kn.KernelSpec = kn.TRIWEIGHT) -> tuple:
    """Limits of the two variance components at ``v`` (single pooled cell)."""
    if not 0.0 < v < 4.0:
        raise ValueError("v must be interior to (0, 4)")
    ik2 = kn.int_k_squared(spec)
    v_dag = true_density(v) * ik2
    e = float(upsilon(v))
    up = 1.0 / ((e + 1.0) * (3.0 * e + 1.0))
    r = float(_rho_weight(e, cfg))
    pz1 = cfg.p_z1
    v_ddag = r * r * up**3 * (1.0 / pz1 + 1.0 / (1.0 - pz1)) * ik2
    if not np.isfinite(v_ddag):
        raise ArithmeticError(f"first-stage component not finite at v={v} (e={e}, weight={r})")
    return float(v_dag), float(v_ddag)


def population_v_ddagger_smoothed(v: float, h: float, cfg: DgpConfig = DgpConfig(),
                                  n_nodes: int = 20001) -> float:
    """First-stage component at a fixed bandwidth ``h`` (before the ``h -> 0`` limit).

    ``(1/p0 + 1/p1) int_0^1 A(s)^2 ds`` with
    ``A(s) = h^{-3/2} int_0^1 K'((Delta(e) - v)/h) w(e) {1(s <= e) - e} de``.
    """
    e = np.linspace(0.0, 1.0, n_nodes)
    e_in = np.clip(e, 1e-12, 1 - 1e-12)
    kp = kn.k_prime((delta_of_eps(e) - v) / h)
    w = np.where(kp != 0.0, _rho_weight(e_in, cfg), 0.0)
    f = kp * w
    tail = integrate.cumulative_trapezoid(f[::-1], e[::-1], initial=0.0)[::-1] * -1.0
    centre = integrate.trapezoid(f * e, e)
    a = (tail - centre) / h**1.5
    pz1 = cfg.p_z1
    return float((1.0 / pz1 + 1.0 / (1.0 - pz1)) * integrate.trapezoid(a * a, e))


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------

import csv as _csv
import json as _json
import math as _math
import os as _os
import time as _time
from dataclasses import field as _field
from multiprocessing import get_context as _get_context

from .rng import derive_seed

LEVELS = (0.90, 0.95, 0.99)
ALL_KINDS = ("jmb_const", "jmb_studentized", "npb_const", "npb_studentized", "ptw")
TABLE_LABELS = {"jmb_const": "CB#", "jmb_studentized": "CB##", "npb_const": "CB*",
                "npb_studentized": "CB**", "ptw": "PTW"}


@dataclass(frozen=True)
class ExperimentConfig:
    dgp: DgpConfig = DgpConfig()
    kinds: tuple = ALL_KINDS
    grid_lo: float = 0.5
    grid_hi: float = 3.5
    grid_points: int = 101
    levels: tuple = LEVELS
    n_reps: int = 200
    n_boot: int = 500
    master_seed: int = 20240601
    jobs: int = 1
    pointwise_v: tuple = (2.0,)
    loo_in_bootstrap: bool = True
    failure_cap: float = 0.05

    @property
    def label(self) -> str:
        g = self.dgp
        return f"gamma=({g.gamma0:g},{g.gamma1:g}) n={g.n} v=[{self.grid_lo:g},{self.grid_hi:g}]"

    def as_dict(self) -> dict:
        d = asdict(self)
        d["kinds"] = list(self.kinds)
        d["levels"] = list(self.levels)
        d["pointwise_v"] = list(self.pointwise_v)
        return d


@dataclass
class ExperimentResult:
    label: str
    coverage: dict            # kind -> {level: rate}
    mean_width: dict          # kind -> {level: average width}
    relative_width: dict      # kind -> width relative to PTW at 0.95
    pointwise_coverage: dict  # v -> {level: rate}
    n_reps: int
    n_failed: int
    runtime: float
    per_rep: list = _field(default_factory=list, repr=False)

    def as_dict(self) -> dict:
        return {"label": self.label, "coverage": _str_keys(self.coverage),
                "mean_width": _str_keys(self.mean_width), "relative_width": self.relative_width,
                "pointwise_coverage": _str_keys(self.pointwise_coverage), "n_reps": self.n_reps,
                "n_failed": self.n_failed}

    def write_tables(self, out_dir, cfg: ExperimentConfig) -> None:
        _os.makedirs(out_dir, exist_ok=True)
        g = cfg.dgp
        with open(_os.path.join(out_dir, "table1.csv"), "w", newline="") as fh:
            fh.write("# simultaneous coverage of the bands over the evaluation grid\n")
            w = _csv.writer(fh)
            w.writerow(["gamma0", "gamma1", "n", "grid_lo", "grid_hi", "band", "nominal", "coverage", "n_reps"])
            for k in cfg.kinds:
                for lv in cfg.levels:
                    w.writerow([g.gamma0, g.gamma1, g.n, cfg.grid_lo, cfg.grid_hi, TABLE_LABELS[k], lv,
                                f"{self.coverage[k][lv]:.4f}", self.n_reps - self.n_failed])
        with open(_os.path.join(out_dir, "table2.csv"), "w", newline="") as fh:
            fh.write("# average band width at nominal 0.95 relative to the pointwise percentile band\n")
            w = _csv.writer(fh)
            w.writerow(["gamma0", "gamma1", "n", "grid_lo", "grid_hi", "band", "relative_width"])
            for k in cfg.kinds:
                rw = self.relative_width.get(k)
                w.writerow([g.gamma0, g.gamma1, g.n, cfg.grid_lo, cfg.grid_hi, TABLE_LABELS[k],
                            "" if rw is None else f"{rw:.4f}"])


def _str_keys(d):
    if isinstance(d, dict):
        return {str(k): _str_keys(v) for k, v in d.items()}
    return d


def _coverage_rep(args):
    cfg, r = args
    from .pipeline import FitOptions, fit, make_bands
    from scipy.stats import norm

    smp = draw_sample(cfg.dgp, index=r)
    opts = FitOptions(grid_lo=cfg.grid_lo, grid_hi=cfg.grid_hi, grid_points=cfg.grid_points)
    try:
        f = fit(smp.dataset, opts=opts)
        alphas = [round(1.0 - lv, 10) for lv in cfg.levels]
        bands = make_bands(f, cfg.kinds, alphas, cfg.n_boot, derive_seed(cfg.master_seed, r),
                           cfg.loo_in_bootstrap)
    except Exception as e:  # counted and capped by the caller
        return {"index": r, "error": f"{type(e).__name__}: {e}"}
    truth = true_density(f.grid.points)
    out = {"index": r, "cover": {}, "width": {}, "pointwise": {}}
    for (k, a), b in bands.items():
        lv = round(1.0 - a, 10)
        out["cover"][(k, lv)] = b.covers(truth)
        out["width"][(k, lv)] = float(np.mean(b.width))
    se = f.variance.se()
    for v in cfg.pointwise_v:
        g = int(np.argmin(np.abs(f.grid.points - v)))
        for lv in cfg.levels:
            z = norm.ppf(0.5 + lv / 2.0)
            out["pointwise"][(v, lv)] = bool(abs(f.density.values[g] - true_density(f.grid.points[g])) <= z * se[g])
    return out


def _pool_map(fn, items, jobs):
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    ctx = _get_context("fork") if "fork" in _multiprocessing_methods() else _get_context("spawn")
    with ctx.Pool(jobs) as pool:
        return pool.map(fn, items, chunksize=1)


def _multiprocessing_methods():
    import multiprocessing
    return multiprocessing.get_all_start_methods()


def run_coverage_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    """Simulate ``n_reps`` samples, build every requested band and tabulate coverage and widths."""
    t0 = _time.perf_counter()
    reps = _pool_map(_coverage_rep, [(cfg, r) for r in range(cfg.n_reps)], cfg.jobs)
    reps.sort(key=lambda r: r["index"])
    ok = [r for r in reps if "error" not in r]
    failed = len(reps) - len(ok)
    if failed > max(1, _math.floor(cfg.failure_cap * cfg.n_reps)):
        raise RuntimeError(f"{failed} of {cfg.n_reps} replications failed; first: "
                           f"{next(r['error'] for r in reps if 'error' in r)}")
    if not ok:
        raise RuntimeError("every replication failed")
    cov, wid = {}, {}
    for k in cfg.kinds:
        cov[k] = {lv: float(np.mean([r["cover"][(k, lv)] for r in ok])) for lv in cfg.levels}
        wid[k] = {lv: float(np.mean([r["width"][(k, lv)] for r in ok])) for lv in cfg.levels}
    rel = {}
    if "ptw" in cfg.kinds and 0.95 in cfg.levels:
        base = wid["ptw"][0.95]
        rel = {k: wid[k][0.95] / base for k in cfg.kinds}
    pw = {v: {lv: float(np.mean([r["pointwise"][(v, lv)] for r in ok])) for lv in cfg.levels}
          for v in cfg.pointwise_v}
    return ExperimentResult(cfg.label, cov, wid, rel, pw, cfg.n_reps, failed, _time.perf_counter() - t0, reps)


def run_width_experiment(cfg: ExperimentConfig, result: ExperimentResult | None = None) -> dict:
    """Average widths relative to the pointwise percentile band at nominal 0.95.

    Widths are averaged over the grid first, then over replications.
    """
    if "ptw" not in cfg.kinds or 0.95 not in cfg.levels:
        raise ValueError("relative widths need the ptw band at nominal 0.95")
    result = result if result is not None else run_coverage_experiment(cfg)
    return dict(result.relative_width)


# ---------------------------------------------------------------------------
# single-estimator diagnostics
# ---------------------------------------------------------------------------

def _inflation_rep(args):
    dgp, r, v = args
    from .density import kde_bias_corrected
    from .pipeline import FitOptions, choose_bandwidths
    from .counterfactual import pseudo_ites

    smp = draw_sample(dgp, index=r)
    t = pseudo_ites(smp.dataset)
    mask = np.ones(dgp.n, dtype=bool)
    bw = choose_bandwidths(smp.dataset, t.delta_hat, mask, FitOptions())
    pts = np.array([v, v + 1e-9])
    fh = kde_bias_corrected(t.delta_hat, None, pts, bw).values[0]
    ft = kde_bias_corrected(smp.delta, None, pts, bw).values[0]
    return r, fh, ft, bw.h


def run_inflation_experiment(dgp: DgpConfig, n_reps: int, v: float = 2.0, jobs: int = 1) -> dict:
    """Feasible versus infeasible (true-effect) bias-corrected estimates at ``v``."""
    res = sorted(_pool_map(_inflation_rep, [(dgp, r, v) for r in range(n_reps)], jobs))
    fh = np.array([r[1] for r in res])
    ft = np.array([r[2] for r in res])
    h = np.array([r[3] for r in res])
    return {"feasible": fh, "infeasible": ft, "h": h,
            "ratio": float(np.var(fh, ddof=1) / np.var(ft, ddof=1))}


def _influence_rep(args):
    dgp, r, y, d = args
    from .counterfactual import influence_l_array, phi_estimates

    smp = draw_sample(dgp, index=r)
    ds = smp.dataset
    phi = phi_estimates(ds)[((), d)](y)
    truth = float(true_phi(y, d))
    zeta = float(population_zeta(truth, d, dgp))
    r_at = float(population_r(y, d))
    p1 = dgp.p_z1
    L = influence_l_array(ds, y, d, (), zeta, truth, r_at, 1.0 - p1, p1)
    return r, np.sqrt(dgp.n) * (phi - truth), L.sum() / np.sqrt(dgp.n)


def run_influence_experiment(dgp: DgpConfig, n_reps: int, y: float = 2.0, d: int = 1, jobs: int = 1) -> dict:
    """Compare the scaled estimation error of the map with its linear representation."""
    res = sorted(_pool_map(_influence_rep, [(dgp, r, y, d) for r in range(n_reps)], jobs))
    err = np.array([r[1] for r in res])
    lin = np.array([r[2] for r in res])
    return {"error": err, "linear": lin, "corr": float(np.corrcoef(err, lin)[0, 1])}
