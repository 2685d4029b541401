"""Acceptance criteria, each at its stated tolerance.

Every test records a single PASS/FAIL line, printed in the terminal summary.
``ITEBANDS_ACCEPTANCE=smoke`` swaps the 200-replication coverage run for a
20-replication one that checks only the ordering of PTW and CB## coverage.
``ITEBANDS_JOBS`` sets the worker count for the replication loops.
"""
import os
import time

import numpy as np
import pytest
from scipy import integrate

from itebands import cli
from itebands import kernels as kn
from itebands.counterfactual import phi_estimates
from itebands.pipeline import FitOptions, fit
from itebands.simulate import (DgpConfig, ExperimentConfig, draw_sample, population_variance_components,
                               run_coverage_experiment, run_inflation_experiment, run_influence_experiment,
                               run_width_experiment, true_density, true_phi)
from itebands.variance import v_ddagger_hat

TIER = os.environ.get("ITEBANDS_ACCEPTANCE", "full")
JOBS = int(os.environ.get("ITEBANDS_JOBS", "1"))

F_DELTA_2 = 0.1907
V_DAGGER_2 = 0.1556
V_DDAGGER_2 = 2.3032


def test_c1_oracle_values(acceptance_report):
    t0 = time.perf_counter()
    f2 = float(true_density(2.0))
    vd, vdd = population_variance_components(2.0)
    took = time.perf_counter() - t0
    checks = [abs(f2 - F_DELTA_2) <= 5e-4, abs(vd - V_DAGGER_2) <= 5e-4, abs(vdd - V_DDAGGER_2) <= 1e-2, took < 1.0]
    ok = acceptance_report(
        "C1 oracle values", all(checks),
        f"f(2)={f2:.5f} [{F_DELTA_2}+-5e-4] V+(2)={vd:.5f} [{V_DAGGER_2}+-5e-4] "
        f"V++(2)={vdd:.4f} [{V_DDAGGER_2}+-0.01] time={took:.2f}s")
    assert ok


def test_c2_kernel_constants(acceptance_report):
    mu_q = integrate.quad(lambda u: u * u * float(kn.k(u)), -1, 1, epsabs=1e-13)[0] / 2
    k2_q = integrate.quad(lambda u: float(kn.k(u)) ** 2, -1, 1, epsabs=1e-13)[0]
    e1, e2 = abs(kn.mu_k2() - mu_q), abs(kn.int_k_squared() - k2_q)
    ok = acceptance_report("C2 kernel constants", e1 <= 1e-8 and e2 <= 1e-8
                           and kn.mu_k2() == 1 / 18 and kn.int_k_squared() == 350 / 429,
                           f"|mu_K2 - quad|={e1:.1e} |intK^2 - quad|={e2:.1e} [<=1e-8]")
    assert ok


def test_c3_consistency_at_50k(acceptance_report):
    smp = draw_sample(DgpConfig(n=50_000, seed=0))
    ys = np.linspace(1.2, 3.5, 231)
    phi = phi_estimates(smp.dataset)[((), 1)](ys)
    e_phi = float(np.max(np.abs(phi - true_phi(ys, 1))))
    f = fit(smp.dataset, opts=FitOptions(grid_lo=0.5, grid_hi=3.5))
    v = f.grid.points
    e_f = float(np.max(np.abs(f.density.values - true_density(v))))
    i = int(np.argmin(np.abs(v - 2.0)))
    p2 = f.variance.p_target ** 2
    vd, vdd = f.variance.v_dagger[i] / p2, f.variance.v_ddagger[i] / p2
    rd, rdd = abs(vd / V_DAGGER_2 - 1), abs(vdd / V_DDAGGER_2 - 1)
    parts = [e_phi <= 0.05, e_f <= 0.03, rd <= 0.10, rdd <= 0.15]
    ok = acceptance_report(
        "C3 consistency n=50000", all(parts),
        f"max|phi1-y^1.5|={e_phi:.4f} [<=0.05] max|f-f0|={e_f:.4f} [<=0.03] "
        f"V+(2)={vd:.4f} ({rd:.1%}) [<=10%] V++(2)={vdd:.4f} ({rdd:.1%}) [<=15%]")
    assert ok


def test_c4_u_versus_v_statistic(acceptance_report):
    n = 200
    gaps = []
    for seed in range(20):
        f = fit(draw_sample(DgpConfig(n=n, seed=seed)).dataset, opts=FitOptions(grid_lo=0.5, grid_hi=3.5))
        vs = f.variance.v_ddagger
        us = v_ddagger_hat(f.ingredients, f.pseudo.delta_hat, f.grid, f.bw, None, "u_statistic")
        gaps.append(np.abs(us - vs) / np.abs(vs))
    med = np.median(np.asarray(gaps), axis=0)
    ok = acceptance_report("C4 U/V equivalence n=200", float(med.max()) <= 5 / n,
                           f"max over grid of median relative gap={med.max():.4f} "
                           f"(grid median {np.median(med):.4f}) [<={5 / n:.4f}]")
    assert ok


@pytest.fixture(scope="module")
def table_runs():
    reps = 20 if TIER == "smoke" else 200
    cfg = ExperimentConfig(n_reps=reps, n_boot=500, jobs=JOBS)
    res = run_coverage_experiment(cfg)
    return cfg, res, run_width_experiment(cfg, res)


@pytest.mark.slow
def test_c5_band_coverage(acceptance_report, table_runs):
    cfg, res, _ = table_runs
    cbss = res.coverage["jmb_studentized"][0.90]
    cbst = res.coverage["npb_studentized"][0.95]
    ptw = res.coverage["ptw"][0.90]
    if TIER == "smoke":
        ok = acceptance_report(f"C5 coverage ordering (smoke, {cfg.n_reps} reps)", ptw < cbss,
                               f"PTW@0.90={ptw:.3f} < CB##@0.90={cbss:.3f}")
    else:
        ok = acceptance_report(
            f"C5 band coverage ({cfg.n_reps} reps, B={cfg.n_boot})",
            abs(cbss - 0.823) <= 0.06 and abs(cbst - 0.921) <= 0.05 and ptw <= 0.65,
            f"CB##@0.90={cbss:.3f} [0.823+-0.06] CB**@0.95={cbst:.3f} [0.921+-0.05] PTW@0.90={ptw:.3f} [<=0.65]")
    assert ok


@pytest.mark.slow
def test_c6_relative_widths(acceptance_report, table_runs):
    cfg, _, w = table_runs
    ptw, cbss, cbs = w["ptw"], w["jmb_studentized"], w["jmb_const"]
    cbst, cbst1 = w["npb_studentized"], w["npb_const"]
    ok = acceptance_report(
        f"C6 relative widths ({cfg.n_reps} reps)",
        ptw == 1.0 and 1.2 <= cbss <= 1.9 and 1.2 <= cbst <= 1.9 and cbss < cbs and cbst < cbst1,
        f"PTW={ptw:.3f} CB##={cbss:.3f} CB**={cbst:.3f} [1.2,1.9] CB#={cbs:.3f} CB*={cbst1:.3f}")
    assert ok


def _ratio_se(a: np.ndarray, b: np.ndarray) -> float:
    """Delta-method standard error of var(a)/var(b) for paired draws."""
    va, vb = np.var(a, ddof=1), np.var(b, ddof=1)
    psi = ((a - a.mean()) ** 2 - va) / vb - va * ((b - b.mean()) ** 2 - vb) / vb**2
    return float(np.std(psi, ddof=1) / np.sqrt(a.size))


def test_c7_variance_inflation(acceptance_report):
    r = run_inflation_experiment(DgpConfig(n=4000), 500, v=2.0, jobs=JOBS)
    se = _ratio_se(r["feasible"], r["infeasible"])
    ok = acceptance_report("C7 variance inflation (500 reps, n=4000)", r["ratio"] - 3 * se > 5,
                           f"ratio={r['ratio']:.2f} se={se:.2f} lower 3se bound={r['ratio'] - 3 * se:.2f} [>5]")
    assert ok


def test_c8_influence_representation(acceptance_report):
    r = run_influence_experiment(DgpConfig(n=2000), 200, y=2.0, d=1, jobs=JOBS)
    ok = acceptance_report("C8 influence correlation (200 reps, n=2000)", r["corr"] > 0.9,
                           f"corr={r['corr']:.4f} [>0.9]")
    assert ok


C9_RUNS = {
    "estimate": ["estimate", "--dgp", "--n", "500", "--grid-points", "31", "--seed", "4"],
    "simulate": ["simulate", "--n", "500", "--grid-points", "31", "--seed", "4"],
    "band": ["band", "--dgp", "--n", "500", "--grid-points", "31", "--nboot", "60", "--seed", "4",
             "--alpha", "0.1,0.05"],
    "coverage": ["coverage", "--n", "300", "--grid-points", "21", "--nreps", "3", "--nboot", "40",
                 "--seed", "4", "--kinds", "jmb_studentized,ptw"],
}


def test_c9_rerun_determinism(acceptance_report, tmp_path):
    diffs = []
    for name, argv in C9_RUNS.items():
        a, b = tmp_path / f"{name}_a", tmp_path / f"{name}_b"
        assert cli.main(argv + ["--out", str(a)]) == 0
        assert cli.main(["rerun", str(a / "manifest.json"), "--out", str(b)]) == 0
        files = sorted(p.name for p in a.iterdir() if p.name != "timing.json")
        same = files == sorted(p.name for p in b.iterdir() if p.name != "timing.json") and all(
            (a / f).read_bytes() == (b / f).read_bytes() for f in files)
        if not same:
            diffs.append(name)
    ok = acceptance_report("C9 rerun determinism", not diffs,
                           f"byte-identical: {', '.join(n for n in C9_RUNS if n not in diffs)}"
                           + (f"; differing: {', '.join(diffs)}" if diffs else ""))
    assert ok
