"""Command-line pipeline: solve -> boundary -> policy -> simulate -> compare
-> validate, plus a `figures` command that emits every CSV the plotting
package consumes.

Exit codes: 0 success, 1 validation failure or module error, 2 usage error.
"""

from __future__ import annotations

import argparse
import sys
import traceback
from pathlib import Path

import numpy as np

from koport.config import RunConfig, load_config
from koport.csvio import (
    config_hash,
    write_boundary,
    write_compare,
    write_csv,
    write_dual,
    write_ensemble,
    write_meta,
    write_path,
    write_policy,
    write_surface,
    write_validation,
)
from koport.dual import build_dual_surface
from koport.dynamics import make_noise, simulate_p, simulate_q
from koport.model import validate_params
from koport.oracles import (
    ConstantFactorDual,
    check_moment_bound,
    estimate_h_mc,
    solve_constant_beta,
)
from koport.policy import build_policy_table
from koport.simulate import compare_agents, run_ensemble, simulate_optimal_path
from koport.vi import left_boundary_values, solve_vi_auto, solve_vi_cascade

BETA_SECTIONS = (0.02, 0.05, 0.12)
LABOR_SCAN = (0.2, 0.6, 1.0)
GAMMA_SCAN = (1.2, 1.5, 2.0)
POLICY_X_GRID = np.linspace(0.1, 10.0, 50)


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="koport",
                                 description=__doc__.splitlines()[0])
    ap.add_argument("command",
                    choices=["solve", "boundary", "policy", "simulate",
                             "compare", "validate", "figures"])
    ap.add_argument("--config", required=True, help="run configuration file")
    ap.add_argument("--out-dir", default=None, help="override output directory")
    ap.add_argument("--seed", type=int, default=None, help="override master seed")
    ap.add_argument("--threads", type=int, default=1,
                    help="worker processes for path ensembles")
    ap.add_argument("--mode", choices=["strict", "permissive"], default="strict",
                    help="parameter validation mode")
    return ap


def _solve_dual(cfg: RunConfig):
    surface = solve_vi_cascade(cfg.grid, cfg.params, cfg.solver,
                               levels=cfg.cascade_levels)
    return build_dual_surface(surface)


def _meta(cfg: RunConfig) -> dict:
    return {"scenario": cfg.scenario, "config_hash": config_hash(cfg.resolved),
            "resolved_config": cfg.resolved}


def _cmd_solve(cfg: RunConfig, out: Path, threads: int) -> int:
    dual = _solve_dual(cfg)
    write_surface(out / "surface.csv", dual.surface, _meta(cfg))
    return 0


def _cmd_boundary(cfg: RunConfig, out: Path, threads: int) -> int:
    dual = _solve_dual(cfg)
    write_boundary(out / "boundary.csv", dual.boundary, _meta(cfg))
    return 0


def _cmd_policy(cfg: RunConfig, out: Path, threads: int) -> int:
    dual = _solve_dual(cfg)
    write_dual(out / "dual.csv", dual, _meta(cfg))
    table = build_policy_table(POLICY_X_GRID, BETA_SECTIONS, dual)
    write_policy(out / "policy.csv", table, _meta(cfg))
    return 0


def _cmd_simulate(cfg: RunConfig, out: Path, threads: int) -> int:
    dual = _solve_dual(cfg)
    record = simulate_optimal_path(cfg.x0, cfg.beta0, dual, cfg.horizon,
                                   dt=cfg.dt, seed=cfg.seed, stream=0)
    write_path(out / "path.csv", record, _meta(cfg))
    stats = run_ensemble(dual, cfg.x0, cfg.beta0, cfg.horizon, dt=cfg.dt,
                         n_paths=cfg.n_paths, seed=cfg.seed,
                         antithetic=cfg.antithetic, workers=threads)
    write_ensemble(out / "ensemble.csv", stats, meta_extra=_meta(cfg))
    _write_raw_paths(cfg, out)
    return 0


def _write_raw_paths(cfg: RunConfig, out: Path, n_show: int = 3) -> None:
    """Raw state paths under both measures, long format with path_id."""
    n_steps = int(round(min(cfg.horizon, 5.0) / cfg.dt))
    rows_p, rows_q = [], []
    for pid in range(n_show):
        noise = make_noise(cfg.seed, pid, cfg.dt, n_steps)
        t, beta, log_h, log_z1 = simulate_p(cfg.params, 1.0, cfg.beta0, noise)
        rows_p.append((np.full_like(t, pid), t, beta, log_h, log_z1))
        tq, z_hat, beta_hat = simulate_q(cfg.params, 1.0, cfg.beta0, noise)
        rows_q.append((np.full_like(tq, pid), tq, z_hat, beta_hat))
    cols_p = [np.concatenate(x) for x in zip(*rows_p)]
    cols_q = [np.concatenate(x) for x in zip(*rows_q)]
    pp = write_csv(out / "p_paths.csv",
                   ["path_id", "t", "beta", "log_h", "log_z1"], cols_p)
    write_meta(pp, _meta(cfg))
    qq = write_csv(out / "q_paths.csv",
                   ["path_id", "t", "z_hat", "beta_hat"], cols_q)
    write_meta(qq, _meta(cfg))


def _cmd_compare(cfg: RunConfig, out: Path, threads: int) -> int:
    dual = _solve_dual(cfg)
    const = ConstantFactorDual(
        solve_constant_beta(cfg.params.replace(kappa=0.0, sigma_beta=0.0),
                            cfg.params.beta_bar))
    comparison = compare_agents(cfg.params, dual, const, x0=cfg.compare_x0,
                                beta0=cfg.beta0, horizon=cfg.horizon,
                                dt=cfg.dt, n_paths=cfg.n_paths, seed=cfg.seed,
                                antithetic=cfg.compare_antithetic)
    write_compare(out / "compare.csv", comparison, _meta(cfg))
    return 0


def _cmd_validate(cfg: RunConfig, out: Path, threads: int) -> int:
    """Oracle checks at configuration scale; exit 1 when any check fails."""
    records = []
    rep = validate_params(cfg.params, mode=cfg.validation_mode)
    records.append({"check": "params", "value": float(len(rep.errors)),
                    "target": 0.0, "passed": rep.ok})

    dual = _solve_dual(cfg)
    s = dual.surface
    records.append({"check": "value_nonpositive",
                    "value": float(s.v.max()), "target": 0.0,
                    "passed": bool(s.v.max() <= 1e-12)})
    floor = cfg.params.ell ** (-cfg.params.gamma)
    zb = dual.boundary.z_star[np.isfinite(dual.boundary.z_star)]
    records.append({"check": "boundary_floor",
                    "value": float(zb.min()), "target": floor,
                    "passed": bool(zb.min() >= floor - 1e-12)})

    # moment bound at a reduced scale
    n_mb = min(cfg.n_paths, 20_000)
    for rec in check_moment_bound(1.0, cfg.beta0, cfg.params, t_list=(1.0, 5.0),
                                  n=n_mb, dt=cfg.dt, seed=cfg.seed):
        records.append({"check": f"moment_bound_t{rec['t']:g}",
                        "value": rec["mean"], "target": rec["bound"],
                        "se": rec["se"], "passed": rec["passed"]})

    # left boundary: ODE vs Monte Carlo
    h_ode = left_boundary_values(cfg.grid, cfg.params)
    j = int(np.argmin(np.abs(cfg.grid.beta - cfg.beta0)))
    h_mc = estimate_h_mc(float(cfg.grid.beta[j]), cfg.params,
                         n=min(cfg.n_paths, 4000), dt=4 * cfg.dt,
                         horizon=150.0, seed=cfg.seed)
    gap = abs(h_mc.value - h_ode[j])
    tol = max(0.01 * h_ode[j], 3 * h_mc.se + h_mc.tail_bound)
    records.append({"check": "left_boundary_ode_vs_mc", "value": h_mc.value,
                    "target": float(h_ode[j]), "se": h_mc.se,
                    "passed": bool(gap <= tol)})

    # duality and budget identities on simulated optimal paths
    stats = run_ensemble(dual, cfg.x0, cfg.beta0,
                         horizon=cfg.budget_horizon, dt=cfg.dt,
                         n_paths=min(cfg.n_paths, 2000), seed=cfg.seed,
                         columns=("x_star",), integrals=True,
                         workers=threads)
    b = stats.budget
    tol_b = max(0.02 * b["target"], 3 * b["se"] + b["tail_bound"])
    records.append({"check": "budget_identity", "value": b["value"],
                    "target": b["target"], "se": b["se"],
                    "passed": bool(abs(b["value"] - b["target"]) <= tol_b)})
    u = stats.primal
    tol_u = max(0.02 * abs(u["target"]), 3 * u["se"] + u["tail_bound"])
    records.append({"check": "strong_duality", "value": u["value"],
                    "target": u["target"], "se": u["se"],
                    "passed": bool(abs(u["value"] - u["target"]) <= tol_u)})

    write_validation(out / "validation.csv", records, _meta(cfg))
    n_fail = sum(not r["passed"] for r in records)
    for r in records:
        flag = "PASS" if r["passed"] else "FAIL"
        se = f" (se={r['se']:.3g})" if "se" in r else ""
        print(f"[{flag}] {r['check']}: value={r['value']:.6g} "
              f"target={r['target']:.6g}{se}")
    return 0 if n_fail == 0 else 1


def _cmd_figures(cfg: RunConfig, out: Path, threads: int) -> int:
    """Emit fig1_paths, fig2_compare, fig3_labor, fig4_gamma, fig5_beta CSVs."""
    dual = _solve_dual(cfg)

    record = simulate_optimal_path(cfg.x0, cfg.beta0, dual, cfg.horizon,
                                   dt=cfg.dt, seed=cfg.seed, stream=0)
    write_path(out / "fig1_paths.csv", record, _meta(cfg))

    const = ConstantFactorDual(
        solve_constant_beta(cfg.params.replace(kappa=0.0, sigma_beta=0.0),
                            cfg.params.beta_bar))
    comparison = compare_agents(cfg.params, dual, const, x0=cfg.compare_x0,
                                beta0=cfg.beta0, horizon=cfg.horizon,
                                dt=cfg.dt, n_paths=cfg.n_paths, seed=cfg.seed,
                                antithetic=cfg.compare_antithetic)
    write_compare(out / "fig2_compare.csv", comparison, _meta(cfg))

    def scan_csv(fname, param_name, values, make_params):
        rows = {"x": [], param_name: [], "c_star": [], "pi_star": []}
        for val in values:
            pv = make_params(val)
            if pv == cfg.params:
                dual_v = dual
            else:
                dual_v = build_dual_surface(
                    solve_vi_auto(pv, n_z=cfg.grid.n_z, n_beta=cfg.grid.n_beta,
                                  opts=cfg.solver, levels=cfg.cascade_levels))
            table = build_policy_table(POLICY_X_GRID, [pv.beta_bar], dual_v)
            rows["x"].append(table.x_nodes)
            rows[param_name].append(np.full_like(table.x_nodes, val))
            rows["c_star"].append(table.c_star[0])
            rows["pi_star"].append(table.pi_star[0])
        cols = [np.concatenate(rows[k]) for k in ("x", param_name,
                                                  "c_star", "pi_star")]
        path = write_csv(out / fname, ["x", param_name, "c_star", "pi_star"],
                         cols)
        write_meta(path, _meta(cfg))

    scan_csv("fig3_labor.csv", "ell", LABOR_SCAN,
             lambda v: cfg.params.replace(ell=v))
    scan_csv("fig4_gamma.csv", "gamma", GAMMA_SCAN,
             lambda v: cfg.params.replace(gamma=v))

    table = build_policy_table(POLICY_X_GRID, BETA_SECTIONS, dual)
    rows = {"x": [], "beta": [], "c_star": [], "pi_star": []}
    for j, b in enumerate(table.beta_values):
        rows["x"].append(table.x_nodes)
        rows["beta"].append(np.full_like(table.x_nodes, b))
        rows["c_star"].append(table.c_star[j])
        rows["pi_star"].append(table.pi_star[j])
    cols = [np.concatenate(rows[k]) for k in ("x", "beta", "c_star", "pi_star")]
    path = write_csv(out / "fig5_beta.csv", ["x", "beta", "c_star", "pi_star"],
                     cols)
    write_meta(path, _meta(cfg))
    return 0


_COMMANDS = {
    "solve": _cmd_solve,
    "boundary": _cmd_boundary,
    "policy": _cmd_policy,
    "simulate": _cmd_simulate,
    "compare": _cmd_compare,
    "validate": _cmd_validate,
    "figures": _cmd_figures,
}


def run(argv=None) -> int:
    ap = _parser()
    try:
        ns = ap.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        cfg = load_config(ns.config, mode=ns.mode)
    except FileNotFoundError as exc:
        print(f"config not found: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"bad configuration: {exc}", file=sys.stderr)
        return 2
    if ns.out_dir is not None:
        cfg.out_dir = Path(ns.out_dir)
        cfg.resolved["output"]["out_dir"] = str(ns.out_dir)
    if ns.seed is not None:
        cfg.seed = ns.seed
        cfg.resolved["sim"]["seed"] = ns.seed
    out = cfg.out_dir / cfg.scenario
    out.mkdir(parents=True, exist_ok=True)
    try:
        return _COMMANDS[ns.command](cfg, out, max(ns.threads, 1))
    except Exception as exc:
        traceback.print_exc()
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
