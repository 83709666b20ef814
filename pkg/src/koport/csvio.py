"""CSV and metadata-sidecar writers.

All CSVs are written with repr-exact floats so identical runs produce
byte-identical files.  Timestamps (and anything else run-specific) live only
in the ``.meta`` sidecars, which are JSON files sharing the CSV basename.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from pathlib import Path

import numpy as np

__all__ = [
    "write_csv",
    "write_meta",
    "write_surface",
    "write_boundary",
    "write_dual",
    "write_policy",
    "write_path",
    "write_ensemble",
    "write_compare",
    "write_validation",
]

_FMT = "%.17g"


def _fmt(val) -> str:
    if isinstance(val, (bool, np.bool_)):
        return "1" if val else "0"
    if isinstance(val, (int, np.integer)):
        return str(int(val))
    return _FMT % float(val)


def write_csv(path, header: list[str], columns: list[np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = len(columns[0])
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for i in range(n):
            fh.write(",".join(_fmt(c[i]) for c in columns) + "\n")
    return path


def write_meta(csv_path, payload: dict, timestamp: bool = True) -> Path:
    meta_path = Path(csv_path).with_suffix(".meta")
    out = dict(payload)
    if timestamp:
        out["written_at"] = time.strftime("%Y-%m-%dT%H:%M:%S")
    with open(meta_path, "w") as fh:
        json.dump(out, fh, indent=2, sort_keys=True, default=_jsonify)
    return meta_path


def _jsonify(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return dataclasses.asdict(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return str(obj)


def config_hash(resolved: dict) -> str:
    lines = []
    for section in sorted(resolved):
        for key in sorted(resolved[section]):
            lines.append(f"{section}.{key}={resolved[section][key]}")
    return hashlib.sha256("\n".join(lines).encode()).hexdigest()[:16]


def write_surface(path, surface, meta_extra: dict | None = None) -> Path:
    nb, nz = surface.v.shape
    z = surface.z.ravel()
    beta = np.repeat(surface.beta, nz)
    cols = [z, beta, surface.v.ravel(), surface.active.ravel().astype(int),
            surface.residual.ravel()]
    out = write_csv(path, ["z", "beta", "v", "active", "residual"], cols)
    meta = {
        "grid": surface.grid,
        "params": surface.params,
        "iterations": surface.iterations,
        "comp_error": surface.comp_error,
        "mode": surface.mode,
        "monotone_violations": surface.monotone_violations,
    }
    meta.update(meta_extra or {})
    write_meta(out, meta)
    return out


def write_boundary(path, boundary, meta_extra: dict | None = None) -> Path:
    out = write_csv(path, ["beta", "z_star"],
                    [boundary.beta_nodes, boundary.z_star])
    write_meta(out, meta_extra or {})
    return out


def write_dual(path, dual, meta_extra: dict | None = None) -> Path:
    s = dual.surface
    nb, nz = s.v.shape
    cols = [s.z.ravel(), np.repeat(s.beta, nz), s.v.ravel(),
            dual.v_tilde.ravel(), dual.v_z.ravel(), dual.v_beta.ravel()]
    out = write_csv(path, ["z", "beta", "v", "v_tilde", "v_z", "v_beta"], cols)
    write_meta(out, meta_extra or {})
    return out


def write_policy(path, table, meta_extra: dict | None = None) -> Path:
    nb, nx = table.c_star.shape
    x = np.tile(table.x_nodes, nb)
    beta = np.repeat(table.beta_values, nx)
    cols = [x, beta, table.z_hat.ravel(), table.c_star.ravel(),
            table.pi_star.ravel(), table.value.ravel()]
    out = write_csv(path, ["x", "beta", "z_hat", "c_star", "pi_star", "V"], cols)
    meta = {"errors": table.errors}
    meta.update(meta_extra or {})
    write_meta(out, meta)
    return out


def write_path(path, record, meta_extra: dict | None = None) -> Path:
    cols = [record.t, record.beta, record.z1, record.d_star, record.z_ctrl,
            record.x_star, record.c_star, record.pi_star,
            record.reflect.astype(int), record.z_star_t, record.h]
    out = write_csv(path, ["t", "beta", "z1", "d_star", "z_ctrl", "x_star",
                           "c_star", "pi_star", "reflect_flag", "z_star_t", "h"],
                    cols)
    meta = {"z_hat": record.z_hat, "seed": record.seed, "stream": record.stream}
    meta.update(meta_extra or {})
    write_meta(out, meta)
    return out


def write_ensemble(path, stats, column: str = "x_star",
                   meta_extra: dict | None = None) -> Path:
    s = stats.stats[column]
    cols = [stats.t, s["mean"], s["se"], s["q05"], s["q50"], s["q95"]]
    out = write_csv(path, ["t", "mean_x", "se_x", "q05", "q50", "q95"], cols)
    meta = {"n_paths": stats.n_paths, "seed": stats.seed, "dt": stats.dt,
            "n_errors": stats.n_errors, "min_x": stats.min_x,
            "reflect_events": stats.reflect_events,
            "budget": stats.budget, "primal": stats.primal}
    meta.update(meta_extra or {})
    write_meta(out, meta)
    return out


def write_compare(path, comparison, meta_extra: dict | None = None) -> Path:
    n = len(comparison.t)
    agent = np.array(["stochastic"] * n + ["constant"] * n)
    t = np.concatenate([comparison.t, comparison.t])
    mean_x = np.concatenate([comparison.mean_x_stochastic,
                             comparison.mean_x_constant])
    se_x = np.concatenate([comparison.se_x_stochastic, comparison.se_x_constant])
    qs = {"q05": [], "q50": [], "q95": []}
    for st in (comparison.stats_stochastic, comparison.stats_constant):
        col = st.stats["x_star"]
        for q in qs:
            qs[q].append(col[q])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write("t,agent,mean_x,se_x,q05,q50,q95\n")
        for i in range(2 * n):
            block, k = divmod(i, n)
            fh.write(",".join([
                _fmt(t[i]), agent[i], _fmt(mean_x[i]), _fmt(se_x[i]),
                _fmt(qs["q05"][block][k]), _fmt(qs["q50"][block][k]),
                _fmt(qs["q95"][block][k])]) + "\n")
    meta = {
        "diff_terminal_mean": comparison.diff_terminal_mean,
        "diff_terminal_se": comparison.diff_terminal_se,
        "rel_gap_start": comparison.rel_gap_start,
        "rel_gap_end": comparison.rel_gap_end,
        "n_paths": comparison.n_paths,
        "seed": comparison.seed,
    }
    meta.update(meta_extra or {})
    write_meta(path, meta)
    return path


def write_validation(path, records: list[dict], meta_extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write("check,value,target,se,passed\n")
        for r in records:
            fh.write(",".join([
                str(r["check"]), _fmt(r["value"]), _fmt(r["target"]),
                _fmt(r.get("se", 0.0)), "1" if r["passed"] else "0"]) + "\n")
    write_meta(path, meta_extra or {})
    return path
