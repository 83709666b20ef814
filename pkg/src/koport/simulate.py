"""Simulation of the optimally controlled system under the physical measure.

The dual initializer zhat is computed once at t = 0; afterwards the dual
state evolves autonomously:

    Z1_t = zhat * exp(delta t) * H_t,
    D*_t = min over s <= t of (z*(beta_s) / Z1_s, 1)      (nonincreasing),
    Z*_t = Z1_t D*_t                                      (reflected state),

and wealth, consumption, and investment are *derived* from the dual state:

    X*_t = -v(Z*_t, beta_t),   c*_t = (Z*_t)^(-1/gamma),
    pi*_t = (beta_t/sigma^2) Z*_t v_z + (sigma_beta/sigma) v_beta.

Paths parallelize with one noise stream per path; aggregation is an
order-independent reduction, so ensembles are bit-reproducible for any
chunking or worker count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from koport.dynamics import StreamBlocks, step_p_arrays
from koport.model import ModelParams

__all__ = [
    "PathRecord",
    "EnsembleStats",
    "ComparisonResult",
    "singular_control_update",
    "simulate_optimal_path",
    "run_ensemble",
    "compare_agents",
    "primal_consistency_check",
]

REFLECT_REL_DROP = 1e-12


def singular_control_update(d_prev, z_star_now, z1_now):
    """Running-minimum update d = min(d_prev, z*/Z1, 1)."""
    out = np.minimum(np.minimum(np.asarray(d_prev, dtype=float),
                                np.asarray(z_star_now, dtype=float)
                                / np.asarray(z1_now, dtype=float)), 1.0)
    return float(out) if out.ndim == 0 else out


@dataclass
class PathRecord:
    """One simulated optimal path (columns at the recording stride)."""

    t: np.ndarray
    beta: np.ndarray
    z1: np.ndarray
    d_star: np.ndarray
    z_ctrl: np.ndarray
    x_star: np.ndarray
    c_star: np.ndarray
    pi_star: np.ndarray
    h: np.ndarray
    z_star_t: np.ndarray      # boundary evaluated along the path
    reflect: np.ndarray       # True where D* strictly decreased
    z_hat: float
    seed: int
    stream: int


@dataclass
class EnsembleStats:
    """Cross-path aggregates on a thinned time grid."""

    t: np.ndarray
    n_paths: int
    seed: int
    dt: float
    stats: dict                      # column -> dict of mean/sd/se/q05/q50/q95
    terminal: dict = field(default_factory=dict)  # column -> per-path last value
    n_errors: int = 0
    min_x: float = math.inf
    reflect_events: int = 0
    reflect_max_rel_gap: float = 0.0  # max |Z*/z*(beta) - 1| at events
    reflect_max_x: float = 0.0        # max wealth at events
    budget: dict | None = None        # MC of the static budget integral
    primal: dict | None = None        # MC of discounted utility of c*

    def column(self, name: str, stat: str = "mean") -> np.ndarray:
        return self.stats[name][stat]


@dataclass
class ComparisonResult:
    """Common-noise comparison of the dynamic-factor and frozen-factor agents."""

    t: np.ndarray
    mean_x_stochastic: np.ndarray
    mean_x_constant: np.ndarray
    se_x_stochastic: np.ndarray
    se_x_constant: np.ndarray
    diff_terminal_mean: float
    diff_terminal_se: float
    rel_gap_start: float
    rel_gap_end: float
    n_paths: int
    seed: int
    stats_stochastic: EnsembleStats | None = None
    stats_constant: EnsembleStats | None = None


def _chunk_ranges(n: int, chunk: int):
    for s in range(0, n, chunk):
        yield s, min(chunk, n - s)


def _advance_chunk(p: ModelParams, dual, z_hat: float, beta0: float,
                   dt: float, n_steps: int, seed: int, streams_lo: int,
                   m: int, stride: int, columns: tuple[str, ...],
                   integrals: bool, integral_horizon: float | None,
                   antithetic: bool = False, bridge: bool = True):
    """Vectorized march of m paths; returns recorded columns and accumulators.

    With ``bridge=True`` the running minimum of z*(beta)/Z1 also samples the
    in-step maximum of ln Z1 from the Brownian bridge between endpoints
    (factor frozen over the step), removing the O(sqrt(dt)) reflection bias
    of endpoint-only monitoring.
    """
    streams = StreamBlocks(seed, range(streams_lo, streams_lo + m), dt,
                           antithetic=antithetic)
    log_zhat = math.log(z_hat)
    beta = np.full(m, beta0)
    log_h = np.zeros(m)
    d = np.ones(m)
    grid = getattr(getattr(dual, "surface", None), "grid", None)
    z_cap = grid.z_max if grid is not None else math.inf

    n_rec = n_steps // stride + 1
    rec = {c: np.empty((m, n_rec)) for c in columns}
    rec_t = np.empty(n_rec)

    acc_budget = np.zeros(m)
    acc_primal = np.zeros(m)
    min_x = np.full(m, np.inf)
    n_events = 0
    max_rel_gap = 0.0
    max_x_at_event = 0.0
    drop_accum = np.zeros(m, dtype=bool)   # drops since the last record
    bridge_fired = np.zeros(m, dtype=bool)  # in-step drops to attribute next x
    int_steps = n_steps if integral_horizon is None \
        else min(n_steps, int(round(integral_horizon / dt)))
    hd_terminal_sum = float(m)  # H_0 D_0 = 1 per path until overwritten

    k = 0
    rec_idx = 0
    while k <= n_steps:
        if k < n_steps:
            blk, unif = streams.draw_with_uniforms(np.arange(m))
        else:
            blk = unif = None
        ncols = blk.shape[1] if blk is not None else 1
        for col in range(ncols):
            if k > n_steps:
                break
            t = k * dt
            log_z1 = log_zhat + p.delta * t + log_h
            z1 = np.exp(log_z1)
            zs = dual.boundary(beta)
            d_new = np.minimum(d, np.minimum(zs / z1, 1.0))
            dropped = d_new < d * (1.0 - REFLECT_REL_DROP)
            d = d_new
            z_ctrl = z1 * d
            if np.any(z_ctrl > z_cap):
                raise RuntimeError(
                    "controlled dual state escaped above z_max; enlarge the grid")
            x = np.maximum(-np.asarray(dual.value(z_ctrl, beta)), 0.0)
            c = z_ctrl ** (-1.0 / p.gamma)

            # endpoint contacts sit on the boundary; bridge contacts from the
            # previous step report the post-reflection wealth here
            at_event = dropped | bridge_fired
            if np.any(dropped):
                rel = np.abs(z_ctrl[dropped] / zs[dropped] - 1.0)
                max_rel_gap = max(max_rel_gap, float(np.max(rel)))
            if np.any(at_event):
                n_events += int(np.sum(at_event))
                max_x_at_event = max(max_x_at_event,
                                     float(np.max(x[at_event])))
            bridge_fired[:] = False
            drop_accum |= dropped
            np.minimum(min_x, x, out=min_x)

            if integrals and k < int_steps:
                hh = np.exp(log_h)
                acc_budget += hh * d * (c - p.ell) * dt
                acc_primal += math.exp(-p.delta * t) \
                    * c ** (1.0 - p.gamma) / (1.0 - p.gamma) * dt
            if integrals and k == int_steps:
                hd_terminal_sum = float(np.sum(np.exp(log_h) * d))

            if k % stride == 0:
                rec_t[rec_idx] = t
                for name in columns:
                    if name == "beta":
                        rec[name][:, rec_idx] = beta
                    elif name == "z1":
                        rec[name][:, rec_idx] = z1
                    elif name == "d_star":
                        rec[name][:, rec_idx] = d
                    elif name == "z_ctrl":
                        rec[name][:, rec_idx] = z_ctrl
                    elif name == "x_star":
                        rec[name][:, rec_idx] = x
                    elif name == "c_star":
                        rec[name][:, rec_idx] = c
                    elif name == "h":
                        rec[name][:, rec_idx] = np.exp(log_h)
                    elif name == "z_star_t":
                        rec[name][:, rec_idx] = zs
                    elif name == "reflect":
                        rec[name][:, rec_idx] = drop_accum
                    elif name == "pi_star":
                        pass  # evaluated below, after the cheap columns
                    else:
                        raise KeyError(name)
                if "pi_star" in columns:
                    vz = np.asarray(dual.value_z(z_ctrl, beta, policy_side=True))
                    vb = np.asarray(dual.value_beta(z_ctrl, beta))
                    rec["pi_star"][:, rec_idx] = \
                        (beta / p.sigma ** 2) * z_ctrl * vz \
                        + (p.sigma_beta / p.sigma) * vb
                if "reflect" in columns:
                    drop_accum[:] = False
                rec_idx += 1
            if k < n_steps:
                beta_new, log_h_new = step_p_arrays(beta, log_h, p,
                                                    blk[:, col], dt)
                if bridge:
                    a = log_z1
                    b = log_zhat + p.delta * (t + dt) + log_h_new
                    s2 = (beta / p.sigma) ** 2 * dt
                    disc = (b - a) ** 2 - 2.0 * s2 * np.log(unif[:, col])
                    m_log = 0.5 * (a + b + np.sqrt(np.maximum(disc, 0.0)))
                    d_b = np.minimum(d, zs / np.exp(m_log))
                    fired = d_b < d * (1.0 - REFLECT_REL_DROP)
                    if np.any(fired):
                        # counted when the post-reflection state is observed
                        bridge_fired |= fired
                        drop_accum |= fired
                        d = d_b
                beta, log_h = beta_new, log_h_new
            k += 1

    diag = {
        "min_x": float(np.min(min_x)),
        "events": n_events,
        "max_rel_gap": max_rel_gap,
        "max_x_at_event": max_x_at_event,
        "budget": acc_budget,
        "primal": acc_primal,
        # terminal deflated control state, for the budget tail bound
        "hd_terminal_sum": hd_terminal_sum,
    }
    return rec_t, rec, diag


def simulate_optimal_path(x0: float, beta0: float, dual, horizon: float,
                          dt: float = 1 / 250, seed: int = 0, stream: int = 0,
                          stride: int = 1, bridge: bool = True) -> PathRecord:
    """Simulate one optimal path, deriving wealth from the dual state."""
    if x0 <= 0:
        raise ValueError("initial wealth must be positive")
    p = dual.params
    z_hat = dual.invert(x0, beta0)
    n_steps = int(round(horizon / dt))
    cols = ("beta", "z1", "d_star", "z_ctrl", "x_star", "c_star", "pi_star",
            "h", "z_star_t", "reflect")
    t, rec, _ = _advance_chunk(p, dual, z_hat, beta0, dt, n_steps, seed,
                               stream, 1, stride, cols, False, None,
                               bridge=bridge)
    return PathRecord(t=t, beta=rec["beta"][0], z1=rec["z1"][0],
                      d_star=rec["d_star"][0], z_ctrl=rec["z_ctrl"][0],
                      x_star=rec["x_star"][0], c_star=rec["c_star"][0],
                      pi_star=rec["pi_star"][0], h=rec["h"][0],
                      z_star_t=rec["z_star_t"][0],
                      reflect=rec["reflect"][0].astype(bool),
                      z_hat=z_hat, seed=seed, stream=stream)


def _chunk_task(args):
    """One chunk of paths, with per-path isolation of failures.

    Returns (t_rec, blocks, errors) where blocks are (lo, m, rec, diag)
    tuples; module-level so process pools can pickle it.
    """
    (p, dual, z_hat, beta0, dt, n_steps, seed, lo, m, stride, columns,
     integrals, integral_horizon, antithetic, bridge) = args
    try:
        t_rec, rec, diag = _advance_chunk(p, dual, z_hat, beta0, dt, n_steps,
                                          seed, lo, m, stride, columns,
                                          integrals, integral_horizon,
                                          antithetic=antithetic, bridge=bridge)
        return t_rec, [(lo, m, rec, diag)], []
    except Exception:
        blocks, errors, t_rec = [], [], None
        for s in range(lo, lo + m):
            try:
                t_rec, rec1, diag1 = _advance_chunk(
                    p, dual, z_hat, beta0, dt, n_steps, seed, s, 1, stride,
                    columns, integrals, integral_horizon,
                    antithetic=antithetic, bridge=bridge)
                blocks.append((s, 1, rec1, diag1))
            except Exception as exc:
                errors.append({"path": s, "error": str(exc)})
        return t_rec, blocks, errors


def run_ensemble(dual, x0: float, beta0: float, horizon: float,
                 dt: float = 1 / 250, n_paths: int = 10_000, seed: int = 0,
                 columns: tuple[str, ...] = ("x_star", "c_star", "d_star", "z_ctrl"),
                 stride: int | None = None, chunk: int = 1000,
                 integrals: bool = False, integral_horizon: float | None = None,
                 antithetic: bool = False, bridge: bool = True,
                 max_failures: float = 1e-3,
                 workers: int = 1) -> EnsembleStats:
    """Cross-path statistics of the optimal system from per-path streams.

    With ``workers > 1`` chunks run in a process pool; results reduce in
    chunk order, so output is identical for any worker count.
    """
    p = dual.params
    z_hat = dual.invert(x0, beta0)
    n_steps = int(round(horizon / dt))
    if stride is None:
        stride = max(1, n_steps // 250)

    n_rec = n_steps // stride + 1
    store = {c: np.empty((n_paths, n_rec)) for c in columns}
    valid = np.ones(n_paths, dtype=bool)
    t_rec = None
    n_errors = 0
    min_x = math.inf
    events = 0
    max_rel_gap = 0.0
    max_x_event = 0.0
    budget_parts = []
    primal_parts = []
    hd_terminal = 0.0
    path_errors: list[dict] = []

    tasks = [(p, dual, z_hat, beta0, dt, n_steps, seed, lo, m, stride,
              tuple(columns), integrals, integral_horizon, antithetic, bridge)
             for lo, m in _chunk_ranges(n_paths, chunk)]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_chunk_task, tasks))
    else:
        results = [_chunk_task(t) for t in tasks]

    for t_chunk, blocks, errors in results:
        if t_chunk is not None:
            t_rec = t_chunk
        for err in errors:
            valid[err["path"]] = False
            n_errors += 1
            path_errors.append(err)
        for blo, bm, rec, diag in blocks:
            for c in columns:
                store[c][blo:blo + bm] = rec[c]
            min_x = min(min_x, diag["min_x"])
            events += diag["events"]
            max_rel_gap = max(max_rel_gap, diag["max_rel_gap"])
            max_x_event = max(max_x_event, diag["max_x_at_event"])
            budget_parts.append(diag["budget"])
            primal_parts.append(diag["primal"])
            hd_terminal += diag["hd_terminal_sum"]
    if n_errors > max_failures * n_paths:
        raise RuntimeError(
            f"{n_errors} of {n_paths} paths failed (tolerance "
            f"{max_failures:.1%}); first errors: {path_errors[:3]}")

    stats = {}
    terminal = {}
    n_ok = int(np.sum(valid))
    root_n = math.sqrt(max(n_ok, 1))
    ddof = 1 if n_ok > 1 else 0
    for c in columns:
        arr = store[c][valid]
        sd = arr.std(axis=0, ddof=ddof)
        stats[c] = {
            "mean": arr.mean(axis=0),
            "sd": sd,
            "se": sd / root_n,
            "q05": np.quantile(arr, 0.05, axis=0),
            "q50": np.quantile(arr, 0.50, axis=0),
            "q95": np.quantile(arr, 0.95, axis=0),
        }
        terminal[c] = arr[:, -1].copy()

    budget = primal = None
    if integrals:
        T = integral_horizon if integral_horizon is not None else horizon
        zs_max = _boundary_sup(dual)
        g = p.gamma
        budget_vals = np.concatenate(budget_parts)
        primal_vals = np.concatenate(primal_parts)
        # labor leg: 0 <= E int_T^inf H D ell dt <= (ell/r) E[H_T D_T];
        # consumption leg bounded via Z* <= sup z* and H D = e^{-dt} Z*/zhat
        mean_hd = hd_terminal / max(n_ok, 1)
        budget_tail = (p.ell / p.r) * mean_hd \
            + math.exp(-p.delta * T) * zs_max ** (1.0 - 1.0 / g) / (p.delta * z_hat)
        primal_tail = math.exp(-p.delta * T) \
            * zs_max ** ((g - 1.0) / g) / ((g - 1.0) * p.delta)
        budget = {"value": float(budget_vals.mean()),
                  "se": float(budget_vals.std(ddof=1) / root_n),
                  "tail_bound": budget_tail, "target": x0, "horizon": T}
        primal = {"value": float(primal_vals.mean()),
                  "se": float(primal_vals.std(ddof=1) / root_n),
                  "tail_bound": primal_tail,
                  "target": float(dual.vtilde(z_hat, beta0) + z_hat * x0),
                  "horizon": T}

    return EnsembleStats(t=t_rec, n_paths=n_paths, seed=seed, dt=dt,
                         stats=stats, terminal=terminal, n_errors=n_errors,
                         min_x=min_x, reflect_events=events,
                         reflect_max_rel_gap=max_rel_gap,
                         reflect_max_x=max_x_event, budget=budget, primal=primal)


def primal_consistency_check(record: PathRecord, p: ModelParams) -> dict:
    """Scheme diagnostic: integrate the wealth SDE directly and compare.

    Wealth along an optimal path is *derived* from the dual state; as a
    cross-check this Euler-integrates dX = (rX + beta pi - c + ell)dt
    + sigma pi dW using the recorded policies, recovering the increments
    from the factor column.  The discrepancy reflects the time-stepping of
    the policies and the reflection at zero (where the direct integration
    has no constraint), so it is reported, not asserted.
    """
    if record.t[1] - record.t[0] <= 0:
        raise ValueError("record must be sampled at full rate")
    if p.sigma_beta == 0.0:
        raise ValueError("increments cannot be recovered with sigma_beta = 0")
    dt = record.t[1] - record.t[0]
    dw = -(np.diff(record.beta) - p.kappa * (p.beta_bar - record.beta[:-1]) * dt) \
        / p.sigma_beta
    x = np.empty_like(record.x_star)
    x[0] = record.x_star[0]
    for k in range(len(dw)):
        drift = (p.r * x[k] + record.beta[k] * record.pi_star[k]
                 - record.c_star[k] + p.ell)
        x[k + 1] = x[k] + drift * dt + p.sigma * record.pi_star[k] * dw[k]
    err = x - record.x_star
    scale = max(float(np.max(record.x_star)), 1e-12)
    return {
        "max_abs_gap": float(np.max(np.abs(err))),
        "terminal_gap": float(err[-1]),
        "rel_gap": float(np.max(np.abs(err)) / scale),
        "integrated_terminal": float(x[-1]),
        "derived_terminal": float(record.x_star[-1]),
    }


def _boundary_sup(dual) -> float:
    bnd = dual.boundary
    if hasattr(bnd, "z_star_max"):
        return bnd.z_star_max
    probe = np.linspace(-1.0, 1.0, 101)
    return float(np.max(bnd(probe)))


def compare_agents(p: ModelParams, dual_stochastic, dual_constant,
                   x0: float = 10.0, beta0: float | None = None,
                   horizon: float = 30.0, dt: float = 1 / 250,
                   n_paths: int = 10_000, seed: int = 0,
                   chunk: int = 1000, antithetic: bool = True) -> ComparisonResult:
    """Run both agents on identical Brownian draws and compare mean wealth.

    The frozen-factor agent lives in its own market (kappa = sigma_beta = 0,
    beta fixed at beta_bar) driven by the same noise streams.
    """
    beta0 = p.beta_bar if beta0 is None else beta0

    stats_s = run_ensemble(dual_stochastic, x0, beta0, horizon, dt=dt,
                           n_paths=n_paths, seed=seed, antithetic=antithetic,
                           columns=("x_star",), chunk=chunk)
    stats_c = run_ensemble(dual_constant, x0, p.beta_bar, horizon, dt=dt,
                           n_paths=n_paths, seed=seed, antithetic=antithetic,
                           columns=("x_star",), chunk=chunk)
    if len(stats_c.t) != len(stats_s.t):
        raise RuntimeError("agents were recorded on different time grids")
    if stats_s.n_errors or stats_c.n_errors:
        raise RuntimeError("path failures would misalign the common-noise pairing")

    # paired difference of terminal wealth (common noise stream per path);
    # antithetic partners are averaged before the s.e. since they share a stream
    xs = stats_s.stats["x_star"]
    xc = stats_c.stats["x_star"]
    diffs = stats_s.terminal["x_star"] - stats_c.terminal["x_star"]
    if antithetic and len(diffs) % 2 == 0:
        diffs = diffs.reshape(-1, 2).mean(axis=1)
    diff_mean = float(diffs.mean())
    diff_se = float(diffs.std(ddof=1) / math.sqrt(len(diffs)))

    idx_start = int(np.argmin(np.abs(stats_s.t - 1.0)))
    denom_start = xc["mean"][idx_start]
    denom_end = xc["mean"][-1]
    rel_start = float((xs["mean"][idx_start] - denom_start) / denom_start)
    rel_end = float((xs["mean"][-1] - denom_end) / denom_end)

    return ComparisonResult(
        t=stats_s.t, mean_x_stochastic=xs["mean"], mean_x_constant=xc["mean"],
        se_x_stochastic=xs["se"], se_x_constant=xc["se"],
        diff_terminal_mean=diff_mean, diff_terminal_se=diff_se,
        rel_gap_start=rel_start, rel_gap_end=rel_end,
        n_paths=n_paths, seed=seed,
        stats_stochastic=stats_s, stats_constant=stats_c)
