"""State-feedback optimal policies from the dual surface.

Wealth x and factor beta map to the dual initializer zhat with
v(zhat, beta) = -x, and then to

    c* = zhat^(-1/gamma),
    pi* = (beta/sigma^2) zhat v_z(zhat, beta) + (sigma_beta/sigma) v_beta(zhat, beta),
    V  = Vtilde(zhat, beta) + zhat x.

Derivatives at zhat use one-sided continuation-side slopes within two cells
of the boundary so the flat stop region does not contaminate v_z.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from koport.dual import DualSurface, invert_marginal

__all__ = [
    "PolicyTable",
    "consumption_policy",
    "investment_policy",
    "policy_at",
    "build_policy_table",
    "ordering_violations",
    "crossover_points",
]


def policy_at(x: float, beta: float, dual: DualSurface):
    """(z_hat, c_star, pi_star, V) at one state."""
    p = dual.params
    z_hat = invert_marginal(x, beta, dual)
    c_star = z_hat ** (-1.0 / p.gamma)
    pi_star = (beta / p.sigma ** 2) * z_hat * dual.value_z(z_hat, beta, policy_side=True) \
        + (p.sigma_beta / p.sigma) * dual.value_beta(z_hat, beta)
    value = dual.vtilde(z_hat, beta) + z_hat * x
    return z_hat, c_star, pi_star, value


def consumption_policy(x: float, beta: float, dual: DualSurface) -> float:
    return policy_at(x, beta, dual)[1]


def investment_policy(x: float, beta: float, dual: DualSurface) -> float:
    return policy_at(x, beta, dual)[2]


@dataclass
class PolicyTable:
    """Sampled policy surfaces over a wealth grid and factor cross-sections."""

    x_nodes: np.ndarray
    beta_values: np.ndarray
    z_hat: np.ndarray     # (n_beta, n_x)
    c_star: np.ndarray
    pi_star: np.ndarray
    value: np.ndarray
    errors: list = field(default_factory=list)

    def column(self, beta: float, name: str) -> np.ndarray:
        j = int(np.argmin(np.abs(self.beta_values - beta)))
        return getattr(self, name)[j]


def build_policy_table(x_grid, beta_list, dual: DualSurface) -> PolicyTable:
    """Populate the table cell-wise; per-cell failures are recorded, not fatal."""
    x_grid = np.asarray(x_grid, dtype=float)
    beta_list = np.asarray(np.atleast_1d(beta_list), dtype=float)
    shape = (len(beta_list), len(x_grid))
    z_hat = np.full(shape, np.nan)
    c_star = np.full(shape, np.nan)
    pi_star = np.full(shape, np.nan)
    value = np.full(shape, np.nan)
    errors = []
    for j, b in enumerate(beta_list):
        for i, x in enumerate(x_grid):
            try:
                z_hat[j, i], c_star[j, i], pi_star[j, i], value[j, i] = \
                    policy_at(float(x), float(b), dual)
            except Exception as exc:  # per-cell failures recorded
                errors.append({"x": float(x), "beta": float(b), "error": str(exc)})
    return PolicyTable(x_nodes=x_grid, beta_values=beta_list, z_hat=z_hat,
                       c_star=c_star, pi_star=pi_star, value=value,
                       errors=errors)


def ordering_violations(values: np.ndarray, increasing: bool = True,
                        rtol: float = 0.0) -> int:
    """Count adjacent pairs violating the requested monotone ordering."""
    d = np.diff(np.asarray(values, dtype=float))
    scale = np.maximum(np.abs(values[:-1]), 1e-300)
    if increasing:
        return int(np.sum(d < -rtol * scale))
    return int(np.sum(d > rtol * scale))


def crossover_points(x_nodes: np.ndarray, lo: np.ndarray, hi: np.ndarray,
                     atol: float = 0.0) -> list[float]:
    """x locations where the sign of (lo - hi) flips, ignoring |diff| <= atol."""
    d = np.asarray(lo) - np.asarray(hi)
    keep = np.abs(d) > atol
    xs = np.asarray(x_nodes)[keep]
    ds = d[keep]
    out = []
    for k in range(1, len(ds)):
        if np.sign(ds[k]) != np.sign(ds[k - 1]) and ds[k - 1] != 0:
            # linear interpolation of the crossing location
            x0, x1 = xs[k - 1], xs[k]
            out.append(float(x0 + (x1 - x0) * abs(ds[k - 1])
                             / (abs(ds[k - 1]) + abs(ds[k]))))
    return out
