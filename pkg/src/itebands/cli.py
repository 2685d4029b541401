"""Command-line front end: ``itebands {estimate,band,simulate,coverage,rerun}``.

Settings resolve as built-in defaults, then ``--config`` JSON, then explicit
flags. Every run writes a ``manifest.json`` that is a pure function of the
resolved settings and inputs, so ``itebands rerun manifest.json --out DIR``
reproduces all outputs byte for byte. Wall-clock times and the worker count go
to ``timing.json`` instead.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .bands import KINDS, BootstrapError, Target
from .counterfactual import CounterfactualError
from .data import DataError, Dataset, load_csv, validate_relevance
from .pipeline import FitOptions, fit, make_bands
from .simulate import DgpConfig, ExperimentConfig, draw_sample, run_coverage_experiment, true_density

EXIT_OK, EXIT_FAILURE, EXIT_USAGE, EXIT_CAP, EXIT_INTERRUPTED = 0, 1, 2, 3, 130
COMMANDS = ("estimate", "band", "simulate", "coverage")


class CliError(Exception):
    def __init__(self, message: str, flag: str | None = None, kind: str = "validation", code: int = EXIT_USAGE,
                 extra: dict | None = None):
        super().__init__(message)
        self.flag, self.kind, self.code, self.extra = flag, kind, code, extra or {}

    def to_dict(self) -> dict:
        out = {"error": self.kind, "message": str(self)}
        if self.flag:
            out["flag"] = self.flag
        out.update(self.extra)
        return out


@dataclass
class RunConfig:
    input: str | None = None
    dgp: bool = False
    gamma0: float = -0.5
    gamma1: float = 0.5
    rho: float = 0.3
    n: int = 2000
    y: str = "y"
    d: str = "d"
    z: str = "z"
    covariates: list = field(default_factory=list)
    condition_on: list = field(default_factory=list)
    grid_lo: float | None = None
    grid_hi: float | None = None
    grid_points: int = 101
    h: float | None = None
    hb: float | None = None
    hg: float | None = None
    kinds: list = field(default_factory=lambda: list(KINDS))
    alpha: list = field(default_factory=lambda: [0.05])
    nboot: int = 500
    nreps: int = 200
    seed: int = 0
    jobs: int = 1
    out: str = "itebands_out"
    trim_zeta: bool = False
    zeta_floor: float = 0.01
    loo_in_bootstrap: bool = True
    form: str = "v_statistic"
    strategy: str = "exact"

    def validate(self, command: str) -> None:
        if command == "simulate" or command == "coverage":
            if self.input:
                raise CliError(f"{command} draws from the simulation design and takes no --input", "--input")
        elif bool(self.input) == bool(self.dgp):
            if not self.input:
                raise CliError("provide --input PATH or --dgp", "--input")
            raise CliError("--input and --dgp are mutually exclusive", "--dgp")
        if self.input and not os.path.isfile(self.input):
            raise CliError(f"input file not found: {self.input}", "--input")
        for a in self.alpha:
            if not 0.0 < a < 1.0:
                raise CliError(f"alpha must lie in (0, 1), got {a}", "--alpha")
        bad = [k for k in self.kinds if k not in KINDS]
        if bad or not self.kinds:
            raise CliError(f"unknown band kinds {bad}; choose from {list(KINDS)}", "--kinds")
        if not -1.0 < self.rho < 1.0:
            raise CliError("rho must lie in (-1, 1)", "--rho")
        if self.n < 10:
            raise CliError("n must be at least 10", "--n")
        if self.grid_points < 2:
            raise CliError("grid needs at least two points", "--grid-points")
        if (self.grid_lo is None) != (self.grid_hi is None):
            raise CliError("give both --grid-lo and --grid-hi or neither", "--grid-lo")
        if self.grid_lo is not None and not self.grid_lo < self.grid_hi:
            raise CliError("grid-lo must be below grid-hi", "--grid-lo")
        for name in ("h", "hb", "hg"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise CliError(f"{name} must be positive", f"--{name}")
        if self.nboot < 1:
            raise CliError("nboot must be positive", "--nboot")
        if self.nreps < 1:
            raise CliError("nreps must be positive", "--nreps")
        if self.jobs < 1:
            raise CliError("jobs must be positive", "--jobs")
        if not 0.0 < self.zeta_floor < 1.0:
            raise CliError("zeta floor fraction must lie in (0, 1)", "--zeta-floor")
        if self.form not in ("v_statistic", "u_statistic"):
            raise CliError("form must be v_statistic or u_statistic", "--form")
        if self.strategy not in ("exact", "grid"):
            raise CliError("strategy must be exact or grid", "--strategy")
        missing = [c for c in self.condition_on if c not in self.covariates]
        if missing:
            raise CliError(f"conditioning columns {missing} are not among --covariates", "--condition-on")

    def fit_options(self) -> FitOptions:
        return FitOptions(grid_lo=self.grid_lo, grid_hi=self.grid_hi, grid_points=self.grid_points,
                          h=self.h, h_b=self.hb, h_g=self.hg, trim_zeta=self.trim_zeta,
                          zeta_floor=self.zeta_floor, form=self.form, strategy=self.strategy)

    def dgp_config(self) -> DgpConfig:
        return DgpConfig(self.gamma0, self.gamma1, self.rho, self.n, self.seed)

    def reproducible(self) -> dict:
        """Settings that determine outputs (output directory and worker count excluded)."""
        d = dataclasses.asdict(self)
        d.pop("out")
        d.pop("jobs")
        return d


_FIELDS = {f.name for f in dataclasses.fields(RunConfig)}
_LISTS = {"covariates", "condition_on", "kinds", "alpha"}


def _csv_list(s: str) -> list:
    return [t.strip() for t in s.split(",") if t.strip()]


def _float_list(s: str) -> list:
    try:
        return [float(t) for t in _csv_list(s)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {s!r}") from None


def _add_common(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--config", help="JSON file of settings; explicit flags win")
    p.add_argument("--input", default=S, help="CSV with outcome, treatment, instrument and covariates")
    p.add_argument("--dgp", action="store_true", default=S, help="use the built-in simulation design")
    p.add_argument("--gamma0", type=float, default=S)
    p.add_argument("--gamma1", type=float, default=S)
    p.add_argument("--rho", type=float, default=S)
    p.add_argument("--n", type=int, default=S, help="sample size for simulated data")
    p.add_argument("--y", default=S, help="outcome column (default y)")
    p.add_argument("--d", default=S, help="treatment column (default d)")
    p.add_argument("--z", default=S, help="instrument column (default z)")
    p.add_argument("--covariates", type=_csv_list, default=S, help="comma-separated discrete covariates")
    p.add_argument("--condition-on", dest="condition_on", type=_csv_list, default=S,
                   help="covariate subset to condition on; one result per observed value")
    p.add_argument("--grid-lo", dest="grid_lo", type=float, default=S)
    p.add_argument("--grid-hi", dest="grid_hi", type=float, default=S)
    p.add_argument("--grid-points", dest="grid_points", type=int, default=S)
    p.add_argument("--h", type=float, default=S, help="density bandwidth")
    p.add_argument("--hb", type=float, default=S, help="bias-correction bandwidth")
    p.add_argument("--hg", type=float, default=S, help="bandwidth for the complier density weights")
    p.add_argument("--kinds", type=_csv_list, default=S, help=f"band kinds from {','.join(KINDS)}")
    p.add_argument("--alpha", type=_float_list, default=S, help="comma-separated significance levels")
    p.add_argument("--nboot", type=int, default=S)
    p.add_argument("--nreps", type=int, default=S)
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--jobs", type=int, default=S, help="worker processes (default $ITEBANDS_JOBS or 1)")
    p.add_argument("--out", default=S, help="output directory")
    p.add_argument("--trim-zeta", dest="trim_zeta", action=argparse.BooleanOptionalAction, default=S)
    p.add_argument("--zeta-floor", dest="zeta_floor", type=float, default=S)
    p.add_argument("--loo-in-bootstrap", dest="loo_in_bootstrap", action=argparse.BooleanOptionalAction,
                   default=S)
    p.add_argument("--form", default=S, help="variance form: v_statistic or u_statistic")
    p.add_argument("--strategy", default=S, help="counterfactual optimiser: exact or grid")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="itebands", description="Uniform confidence bands for the density of "
                                "individual treatment effects under an instrumental variable design.")
    p.add_argument("--version", action="version", version=f"itebands {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    help_ = {"estimate": "pseudo effects, density estimate and standard errors",
             "band": "uniform confidence bands",
             "simulate": "one simulated draw followed by estimation",
             "coverage": "Monte Carlo coverage and width tables"}
    for c in COMMANDS:
        _add_common(sub.add_parser(c, help=help_[c]))
    r = sub.add_parser("rerun", help="re-execute a run from its manifest")
    r.add_argument("manifest")
    r.add_argument("--out", required=True)
    r.add_argument("--jobs", type=int, default=argparse.SUPPRESS)
    return p


def _load_json(path: str, flag: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise CliError(f"file not found: {path}", flag) from None
    except json.JSONDecodeError as e:
        raise CliError(f"invalid JSON in {path}: {e}", flag) from None


def resolve_config(ns: argparse.Namespace) -> RunConfig:
    values: dict = {}
    env_jobs = os.environ.get("ITEBANDS_JOBS")
    if env_jobs:
        try:
            values["jobs"] = int(env_jobs)
        except ValueError:
            raise CliError(f"ITEBANDS_JOBS must be an integer, got {env_jobs!r}", "--jobs") from None
    if getattr(ns, "config", None):
        raw = _load_json(ns.config, "--config")
        if "config" in raw and isinstance(raw["config"], dict):  # a manifest
            raw = raw["config"]
        for k, v in raw.items():
            key = k.replace("-", "_")
            if key not in _FIELDS:
                raise CliError(f"unknown setting {k!r} in config file", "--config")
            if key in _LISTS and isinstance(v, str):
                v = _float_list(v) if key == "alpha" else _csv_list(v)
            values[key] = v
    for k, v in vars(ns).items():
        if k in _FIELDS:
            values[k] = v
    try:
        cfg = RunConfig(**values)
    except TypeError as e:
        raise CliError(str(e), "--config") from None
    return cfg


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------

def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _num(x) -> str:
    return repr(float(x))


def _json_clean(obj):
    if isinstance(obj, dict):
        return {str(k): _json_clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_clean(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, np.ndarray):
        return _json_clean(obj.tolist())
    return obj


def _write_json(path: str, obj) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(_json_clean(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _versions() -> dict:
    import numba
    import scipy

    return {"itebands": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "numba": numba.__version__}


_active_run = None


class Run:
    """Tracks outputs and writes the manifest (incomplete until ``finish``)."""

    def __init__(self, command: str, cfg: RunConfig):
        self.command, self.cfg = command, cfg
        self.out = cfg.out
        os.makedirs(self.out, exist_ok=True)
        self.files: list = []
        self.info: dict = {}
        self.t0 = time.perf_counter()
        self.timing: dict = {}
        self._write(complete=False, status="running")
        global _active_run
        _active_run = self

    def path(self, name: str) -> str:
        self.files.append(name)
        return os.path.join(self.out, name)

    def _write(self, complete: bool, status: str) -> None:
        m = {"command": self.command, "config": self.cfg.reproducible(), "versions": _versions(),
             "complete": complete, "status": status, "info": self.info}
        if self.cfg.input:
            m["input_sha256"] = _sha256(self.cfg.input)
        if complete:
            m["outputs"] = {f: _sha256(os.path.join(self.out, f)) for f in sorted(set(self.files))}
        _write_json(os.path.join(self.out, "manifest.json"), m)

    def mark(self, label: str) -> None:
        self.timing[label] = round(time.perf_counter() - self.t0, 3)

    def finish(self) -> None:
        self._write(complete=True, status="complete")
        self.mark("total")
        _write_json(os.path.join(self.out, "timing.json"), {"seconds": self.timing, "jobs": self.cfg.jobs})

    def abort(self, status: str, error: dict | None = None) -> None:
        if error:
            self.info["error"] = error
        self._write(complete=False, status=status)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _load_data(cfg: RunConfig) -> tuple:
    if cfg.input:
        ds, rep = load_csv(cfg.input, cfg.y, cfg.d, cfg.z, cfg.covariates, return_report=True)
        return ds, {"load": rep.as_dict()}, None
    smp = draw_sample(cfg.dgp_config())
    return smp.dataset, {"dgp": cfg.dgp_config().as_dict()}, smp


def _targets(ds: Dataset, cfg: RunConfig) -> list:
    if not cfg.condition_on:
        return [("all", Target())]
    pos = [cfg.covariates.index(c) for c in cfg.condition_on]
    if sorted(pos) == list(range(len(cfg.covariates))) and len(pos) == ds.x.shape[1]:
        pos = list(range(ds.x.shape[1]))
    vals = sorted({tuple(int(v) for v in row) for row in ds.x[:, pos]})
    out = []
    for v in vals:
        label = ";".join(f"{c}={_decode(ds, p, x)}" for c, p, x in zip(cfg.condition_on, pos, v))
        t = Target.cell(v) if len(pos) == ds.x.shape[1] and pos == list(range(len(pos))) \
            else Target.subvector(tuple(pos), v)
        out.append((label, t))
    return out


def _decode(ds: Dataset, pos: int, code: int):
    enc = ds.encoders.get(ds.covariate_names[pos])
    if enc:
        return {v: k for k, v in enc.items()}[code]
    return code


def _fit_all(ds: Dataset, cfg: RunConfig, run: Run) -> list:
    fits = []
    for label, t in _targets(ds, cfg):
        try:
            f = fit(ds, t, cfg.fit_options())
        except ValueError as e:
            run.info.setdefault("skipped_targets", []).append({"target": label, "reason": str(e)})
            continue
        fits.append((label, f))
        run.info.setdefault("targets", {})[label] = {
            "count": int(f.mask.sum()), "bandwidths": f.bw.as_dict(),
            "variance_floor_hits": f.variance.n_floored,
            "diagnostics": {**f.pseudo.diagnostics, **f.ingredients.diagnostics},
        }
    if not fits:
        raise CliError("no target population could be estimated", "--condition-on", kind="estimation",
                       code=EXIT_FAILURE)
    return fits


def _write_estimates(fits: list, run: Run, truth: bool = False) -> None:
    base = fits[0][1]
    with open(run.path("pseudo_ites.csv"), "w", newline="") as fh:
        fh.write("# delta_hat: pseudo individual effect from the leave-one-out counterfactual map; "
                 "counterfactual: estimated outcome under the other treatment\n")
        w = csv.writer(fh)
        w.writerow(["row_id", "d", "delta_hat", "counterfactual"])
        p = base.pseudo
        for i in range(base.ds.n):
            w.writerow([i + 1, int(base.ds.d[i]), _num(p.delta_hat[i]), _num(p.counterfactual[i])])
    with open(run.path("density.csv"), "w", newline="") as fh:
        fh.write("# density: bias-corrected kernel density estimate of the individual effects"
                 + ("; true_density: closed-form density of the simulation design" if truth else "") + "\n")
        w = csv.writer(fh)
        w.writerow(["target", "v", "density"] + (["true_density"] if truth else []))
        for label, f in fits:
            tv = true_density(f.grid.points) if truth else None
            for g, v in enumerate(f.grid.points):
                w.writerow([label, _num(v), _num(f.density.values[g])] + ([_num(tv[g])] if truth else []))
    with open(run.path("variance.csv"), "w", newline="") as fh:
        fh.write("# v_dagger: kernel variance term; v_ddagger: first-stage term; total: (v_dagger + v_ddagger)"
                 " / p^2 with p the target share; se: sqrt(total / (n h)) floored at 1e-12 under the root\n")
        w = csv.writer(fh)
        w.writerow(["target", "v", "v_dagger", "v_ddagger", "total", "se"])
        for label, f in fits:
            vc = f.variance
            se = vc.se()
            for g, v in enumerate(f.grid.points):
                w.writerow([label, _num(v), _num(vc.v_dagger[g]), _num(vc.v_ddagger[g]),
                            _num(vc.total_conditional[g]), _num(se[g])])


def cmd_estimate(cfg: RunConfig, command: str = "estimate") -> Run:
    run = Run(command, cfg)
    ds, info, smp = _load_data(cfg)
    run.info.update(info)
    run.info["relevance"] = [r.as_dict() for r in validate_relevance(ds)]
    run.info["cells"] = json.loads(ds.cell_report_json())
    fits = _fit_all(ds, cfg, run)
    run.mark("fit")
    if smp is not None and command == "simulate":
        with open(run.path("sample.csv"), "w", newline="") as fh:
            fh.write("# simulated draw: outcome, treatment, instrument, latent rank eps and true effect\n")
            w = csv.writer(fh)
            w.writerow(["row_id", "y", "d", "z", "eps", "delta"])
            for i in range(ds.n):
                w.writerow([i + 1, _num(ds.y[i]), int(ds.d[i]), int(ds.z[i]), _num(smp.eps[i]),
                            _num(smp.delta[i])])
    _write_estimates(fits, run, truth=smp is not None)
    run.finish()
    return run


def cmd_simulate(cfg: RunConfig) -> Run:
    cfg = dataclasses.replace(cfg, dgp=True, input=None)
    return cmd_estimate(cfg, "simulate")


def cmd_band(cfg: RunConfig) -> Run:
    run = Run("band", cfg)
    ds, info, _ = _load_data(cfg)
    run.info.update(info)
    fits = _fit_all(ds, cfg, run)
    run.mark("fit")
    results = []
    for label, f in fits:
        bands = make_bands(f, cfg.kinds, cfg.alpha, cfg.nboot, cfg.seed, cfg.loo_in_bootstrap, cfg.jobs)
        results.append((label, f, bands))
        run.info["targets"][label]["critical_values"] = {
            f"{k}@{a:g}": b.critical_value for (k, a), b in sorted(bands.items())}
        if "np_redraws" in f.extras:
            run.info["targets"][label]["np_redraws"] = f.extras["np_redraws"]
    run.mark("bands")
    for k in cfg.kinds:
        with open(run.path(f"band_{k}.csv"), "w", newline="") as fh:
            scope = "pointwise percentile" if k == "ptw" else "uniform"
            fh.write(f"# {k} {scope} band; center: bias-corrected density estimate; "
                     "lower/upper: band limits at level 1 - alpha\n")
            w = csv.writer(fh)
            w.writerow(["target", "alpha", "v", "center", "lower", "upper"])
            for label, f, bands in results:
                for a in cfg.alpha:
                    b = bands[(k, a)]
                    for g, v in enumerate(f.grid.points):
                        w.writerow([label, repr(float(a)), _num(v), _num(b.center[g]), _num(b.lower[g]),
                                    _num(b.upper[g])])
    run.finish()
    return run


def cmd_coverage(cfg: RunConfig) -> Run:
    run = Run("coverage", cfg)
    lo = 0.5 if cfg.grid_lo is None else cfg.grid_lo
    hi = 3.5 if cfg.grid_hi is None else cfg.grid_hi
    levels = tuple(sorted({round(1.0 - a, 10) for a in cfg.alpha} | {0.90, 0.95, 0.99}))
    ec = ExperimentConfig(dgp=cfg.dgp_config(), kinds=tuple(cfg.kinds), grid_lo=lo, grid_hi=hi,
                          grid_points=cfg.grid_points, levels=levels, n_reps=cfg.nreps, n_boot=cfg.nboot,
                          master_seed=cfg.seed, jobs=cfg.jobs, loo_in_bootstrap=cfg.loo_in_bootstrap)
    try:
        res = run_coverage_experiment(ec)
    except RuntimeError as e:
        raise CliError(str(e), None, kind="replication_cap", code=EXIT_CAP) from None
    run.mark("experiment")
    res.write_tables(cfg.out, ec)
    run.path("table1.csv")
    run.path("table2.csv")
    run.info["experiment"] = ec.as_dict()
    run.info["result"] = res.as_dict()
    run.info["failures"] = [r["error"] for r in res.per_rep if "error" in r]
    run.finish()
    return run


_DISPATCH = {"estimate": cmd_estimate, "band": cmd_band, "simulate": cmd_simulate, "coverage": cmd_coverage}


def _emit_error(err: dict, out: str | None) -> None:
    text = json.dumps(_json_clean(err), sort_keys=True)
    print(text, file=sys.stderr)
    if out:
        try:
            os.makedirs(out, exist_ok=True)
            with open(os.path.join(out, "error.json"), "w") as fh:
                fh.write(text + "\n")
        except OSError:
            pass


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    global _active_run
    _active_run = None
    cfg = None
    try:
        if ns.command == "rerun":
            m = _load_json(ns.manifest, "manifest")
            if m.get("command") not in COMMANDS or "config" not in m:
                raise CliError("not an itebands manifest", "manifest")
            vals = dict(m["config"])
            vals["out"] = ns.out
            vals["jobs"] = getattr(ns, "jobs", int(os.environ.get("ITEBANDS_JOBS", "1") or 1))
            cfg = RunConfig(**vals)
            command = m["command"]
        else:
            cfg = resolve_config(ns)
            command = ns.command
        cfg.validate(command)
        _DISPATCH[command](cfg)
        return EXIT_OK
    except CliError as e:
        err = e.to_dict()
        code = e.code
    except DataError as e:
        err = {**e.to_dict(), "error": "data", "message": str(e)}
        code = EXIT_USAGE
    except (CounterfactualError, BootstrapError) as e:
        err = {"error": "estimation", "message": str(e)}
        code = EXIT_FAILURE
    except KeyboardInterrupt:
        if _active_run is not None:
            _active_run.abort("interrupted")
        _emit_error({"error": "interrupted"}, None)
        return EXIT_INTERRUPTED
    if _active_run is not None:
        _active_run.abort("failed", err)
    _emit_error(err, cfg.out if cfg is not None else None)
    return code


if __name__ == "__main__":
    sys.exit(main())
