"""Micro-data ingestion and per-cell bookkeeping.

A :class:`Dataset` stores the columns as read-only numpy arrays plus a
per-row integer index into the sorted list of covariate cells.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

CellKey = tuple  # ordered tuple of integer covariate codes; () is the pooled cell

MISSING_TOKENS = frozenset({"", "na", "nan", "null", "none", "."})


class DataError(ValueError):
    """Raised for malformed input. Carries optional row (1-based, header
    excluded) and column context."""

    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        super().__init__(message)
        self.row = row
        self.column = column

    def to_dict(self) -> dict:
        return {"error": str(self), "row": self.row, "column": self.column}


@dataclass(frozen=True)
class Observation:
    y: float
    d: int
    z: int
    x: CellKey = ()

    def __post_init__(self):
        if self.d not in (0, 1) or self.z not in (0, 1):
            raise DataError(f"d and z must be 0/1, got d={self.d}, z={self.z}")
        if not math.isfinite(self.y):
            raise DataError(f"y must be finite, got {self.y}")


@dataclass(frozen=True)
class CellStats:
    key: CellKey
    n_x: int
    p_x: float
    n_zx: tuple          # counts with Z = 0, 1
    p_zx: tuple          # n_zx / n
    p_z_given_x: tuple
    n_dzx: tuple         # n_dzx[d][z]
    p_d_given_zx: tuple  # p_d_given_zx[d][z]; nan when the z arm is empty
    y_bounds: tuple      # y_bounds[d] = (min, max) over rows with D = d; nan if none
    flags: tuple = ()

    @property
    def estimable(self) -> bool:
        return not self.flags

    def as_dict(self) -> dict:
        def clean(v):
            if isinstance(v, tuple):
                return [clean(u) for u in v]
            if isinstance(v, float) and not math.isfinite(v):
                return None
            return v

        return {
            "cell": list(self.key),
            "n_x": self.n_x,
            "p_x": self.p_x,
            "n_zx": list(self.n_zx),
            "p_zx": list(self.p_zx),
            "p_z_given_x": list(self.p_z_given_x),
            "p_d_given_zx": clean(self.p_d_given_zx),
            "y_bounds": clean(self.y_bounds),
            "flags": list(self.flags),
        }


def _freeze(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable column store. ``x`` has shape (n, k) with integer codes."""

    y: np.ndarray
    d: np.ndarray
    z: np.ndarray
    x: np.ndarray
    covariate_names: tuple = ()
    encoders: dict = field(default_factory=dict)
    keys: tuple = field(init=False)
    cell_index: np.ndarray = field(init=False)
    cells: dict = field(init=False)

    def __post_init__(self):
        y = np.ascontiguousarray(self.y, dtype=float)
        d = np.ascontiguousarray(self.d, dtype=np.int8)
        z = np.ascontiguousarray(self.z, dtype=np.int8)
        n = y.shape[0]
        x = np.asarray(self.x, dtype=np.int64)
        if x.ndim == 1:
            x = x.reshape(-1, 1) if x.size else np.zeros((n, 0), dtype=np.int64)
        if n == 0:
            raise DataError("dataset is empty")
        if not (d.shape[0] == z.shape[0] == x.shape[0] == n):
            raise DataError("column lengths differ")
        if not np.all(np.isfinite(y)):
            bad = int(np.flatnonzero(~np.isfinite(y))[0])
            raise DataError(f"non-finite y at row {bad + 1}", row=bad + 1)
        for name, col in (("d", d), ("z", z)):
            bad = np.flatnonzero((col != 0) & (col != 1))
            if bad.size:
                raise DataError(f"non-binary {name} at row {bad[0] + 1}", row=int(bad[0]) + 1, column=name)
        if x.shape[1]:
            uniq, inv = np.unique(x, axis=0, return_inverse=True)
            keys = tuple(tuple(int(c) for c in row) for row in uniq)
            inv = inv.reshape(-1)
        else:
            keys = ((),)
            inv = np.zeros(n, dtype=np.int64)
        for name, val in (("y", y), ("d", d), ("z", z), ("x", x)):
            object.__setattr__(self, name, _freeze(val))
        object.__setattr__(self, "keys", keys)
        object.__setattr__(self, "cell_index", _freeze(np.ascontiguousarray(inv, dtype=np.int64)))
        object.__setattr__(self, "cells", build_cells(self))

    # ---- constructors -------------------------------------------------
    @classmethod
    def from_arrays(cls, y, d, z, x=None, covariate_names=(), encoders=None) -> "Dataset":
        y = np.asarray(y, dtype=float)
        if x is None:
            x = np.zeros((y.shape[0], 0), dtype=np.int64)
        return cls(y=y, d=np.asarray(d), z=np.asarray(z), x=np.asarray(x),
                   covariate_names=tuple(covariate_names), encoders=dict(encoders or {}))

    @classmethod
    def from_observations(cls, observations: Sequence[Observation]) -> "Dataset":
        obs = list(observations)
        if not obs:
            raise DataError("no observations")
        k = len(obs[0].x)
        if any(len(o.x) != k for o in obs):
            raise DataError("observations disagree on covariate arity")
        x = np.array([o.x for o in obs], dtype=np.int64).reshape(len(obs), k)
        return cls.from_arrays([o.y for o in obs], [o.d for o in obs], [o.z for o in obs], x)

    # ---- access -------------------------------------------------------
    @property
    def n(self) -> int:
        return int(self.y.shape[0])

    def observation(self, i: int) -> Observation:
        return Observation(float(self.y[i]), int(self.d[i]), int(self.z[i]), tuple(int(c) for c in self.x[i]))

    @property
    def observations(self) -> Iterator[Observation]:
        return (self.observation(i) for i in range(self.n))

    def cell_id(self, key: CellKey) -> int:
        try:
            return self.keys.index(tuple(key))
        except ValueError:
            raise DataError(f"cell {tuple(key)} not present in the data") from None

    def cell_mask(self, key: CellKey) -> np.ndarray:
        return self.cell_index == self.cell_id(key)

    def subvector_mask(self, positions: Sequence[int], values: Sequence[int]) -> np.ndarray:
        """Rows whose covariates at ``positions`` equal ``values``; all rows when empty."""
        mask = np.ones(self.n, dtype=bool)
        for p, v in zip(positions, values):
            mask &= self.x[:, p] == v
        return mask

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(y=self.y[idx], d=self.d[idx], z=self.z[idx], x=self.x[idx],
                       covariate_names=self.covariate_names, encoders=self.encoders)

    def cell_report(self) -> list:
        return [self.cells[k].as_dict() for k in self.keys]

    def cell_report_json(self, **kw) -> str:
        return json.dumps(self.cell_report(), **kw)


def build_cells(ds: Dataset) -> dict:
    """Per-cell counts, proportions, support bounds and flags.

    Cells missing a z arm (Q-hat denominators vanish) or a treatment arm are
    flagged rather than rejected.
    """
    n = ds.n
    n_cells = len(ds.keys)
    ci = ds.cell_index
    counts = np.zeros((n_cells, 2, 2), dtype=np.int64)  # [cell, d, z]
    np.add.at(counts, (ci, ds.d.astype(np.int64), ds.z.astype(np.int64)), 1)
    out = {}
    for c, key in enumerate(ds.keys):
        cnt = counts[c]
        n_x = int(cnt.sum())
        n_z = tuple(int(cnt[:, z].sum()) for z in (0, 1))
        p_dz = tuple(
            tuple(cnt[dd, z] / n_z[z] if n_z[z] else float("nan") for z in (0, 1)) for dd in (0, 1)
        )
        mask = ci == c
        bounds = []
        for dd in (0, 1):
            ys = ds.y[mask & (ds.d == dd)]
            bounds.append((float(ys.min()), float(ys.max())) if ys.size else (float("nan"), float("nan")))
        flags = []
        for z in (0, 1):
            if n_z[z] == 0:
                flags.append(f"empty_z{z}_arm")
        for dd in (0, 1):
            if cnt[dd].sum() == 0:
                flags.append(f"empty_d{dd}_arm")
        out[key] = CellStats(
            key=key,
            n_x=n_x,
            p_x=n_x / n,
            n_zx=n_z,
            p_zx=tuple(v / n for v in n_z),
            p_z_given_x=tuple(v / n_x for v in n_z),
            n_dzx=tuple(tuple(int(cnt[dd, z]) for z in (0, 1)) for dd in (0, 1)),
            p_d_given_zx=p_dz,
            y_bounds=tuple(bounds),
            flags=tuple(flags),
        )
    return out


@dataclass(frozen=True)
class RelevanceEntry:
    key: CellKey
    p11: float
    p10: float
    gap: float
    flagged: bool
    reason: str

    def as_dict(self) -> dict:
        g = self.gap if math.isfinite(self.gap) else None
        return {"cell": list(self.key), "p_1_given_1": _nn(self.p11), "p_1_given_0": _nn(self.p10),
                "gap": g, "flagged": self.flagged, "reason": self.reason}


def _nn(v):
    return v if isinstance(v, (int, float)) and math.isfinite(v) else None


def validate_relevance(ds: Dataset, min_gap: float = 0.0) -> list:
    """First-stage gap ``p(D=1|Z=1,x) - p(D=1|Z=0,x)`` per cell.

    Cells with gap <= ``min_gap`` are flagged; a negative gap is reported as
    a monotonicity violation.
    """
    report = []
    for key in ds.keys:
        cs = ds.cells[key]
        p11, p10 = cs.p_d_given_zx[1][1], cs.p_d_given_zx[1][0]
        if cs.flags:
            report.append(RelevanceEntry(key, p11, p10, float("nan"), True, ";".join(cs.flags)))
            continue
        gap = p11 - p10
        if gap < 0:
            reason = "monotonicity_violation"
        elif gap <= min_gap:
            reason = "weak_instrument"
        else:
            reason = "ok"
        report.append(RelevanceEntry(key, p11, p10, gap, reason != "ok", reason))
    return report


def trim_cells(ds: Dataset, min_fraction: float) -> Dataset:
    """Drop rows in cells holding strictly less than ``min_fraction`` of the sample."""
    if not (0.0 <= min_fraction < 1.0):
        raise ValueError("min_fraction must lie in [0, 1)")
    keep_cells = np.array([ds.cells[k].n_x / ds.n >= min_fraction for k in ds.keys])
    keep = keep_cells[ds.cell_index]
    if keep.all():
        return ds
    if not keep.any():
        raise DataError(f"trimming at {min_fraction} removes every observation")
    return ds.take(np.flatnonzero(keep))


@dataclass
class LoadReport:
    rows_read: int = 0
    rows_dropped_missing: int = 0
    dropped_rows: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"rows_read": self.rows_read, "rows_dropped_missing": self.rows_dropped_missing}


def _is_missing(tok: str) -> bool:
    return tok.strip().lower() in MISSING_TOKENS


def _parse_binary(tok: str, row: int, col: str) -> int:
    s = tok.strip()
    try:
        v = float(s)
    except ValueError:
        raise DataError(f"row {row}: column {col!r} value {tok!r} is not 0/1", row=row, column=col) from None
    if v not in (0.0, 1.0):
        raise DataError(f"row {row}: column {col!r} value {tok!r} is not 0/1", row=row, column=col)
    return int(v)


def load_csv(path, y: str = "y", d: str = "d", z: str = "z", covariates: Sequence[str] = (),
             return_report: bool = False):
    """Read a headered UTF-8 CSV into a :class:`Dataset`.

    Rows with a missing value in any configured column are dropped and
    counted. Non-integer covariates are dictionary-encoded in sorted order.
    """
    covariates = tuple(covariates)
    wanted = (y, d, z) + covariates
    report = LoadReport()
    ys, ds_, zs, raw_x = [], [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(row for row in fh if not row.startswith("#"))
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: file is empty") from None
        idx = {}
        for col in wanted:
            if col not in header:
                raise DataError(f"missing column {col!r} (header has {header})", column=col)
            idx[col] = header.index(col)
        for r, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            report.rows_read += 1
            if len(row) < len(header):
                raise DataError(f"row {r}: expected {len(header)} fields, got {len(row)}", row=r)
            vals = {c: row[idx[c]] for c in wanted}
            if any(_is_missing(v) for v in vals.values()):
                report.rows_dropped_missing += 1
                report.dropped_rows.append(r)
                continue
            try:
                yv = float(vals[y])
            except ValueError:
                raise DataError(f"row {r}: column {y!r} value {vals[y]!r} is not a number", row=r, column=y) from None
            if not math.isfinite(yv):
                raise DataError(f"row {r}: column {y!r} is not finite", row=r, column=y)
            ys.append(yv)
            ds_.append(_parse_binary(vals[d], r, d))
            zs.append(_parse_binary(vals[z], r, z))
            raw_x.append(tuple(vals[c].strip() for c in covariates))
    if not ys:
        raise DataError(f"{path}: no complete rows")
    x, encoders = _encode_covariates(raw_x, covariates)
    ds = Dataset.from_arrays(ys, ds_, zs, x, covariate_names=covariates, encoders=encoders)
    return (ds, report) if return_report else ds


def _encode_covariates(raw, names):
    n, k = len(raw), len(names)
    x = np.zeros((n, k), dtype=np.int64)
    encoders = {}
    for j, name in enumerate(names):
        col = [r[j] for r in raw]
        try:
            x[:, j] = [int(v) for v in col]
        except ValueError:
            levels = sorted(set(col))
            enc = {lvl: i for i, lvl in enumerate(levels)}
            x[:, j] = [enc[v] for v in col]
            encoders[name] = enc
    return x, encoders
