"""Free boundary extraction, dual value reconstruction, and marginal inversion.

From a solved ValueSurface this module recovers:

* the stopping threshold z*(beta) per row, refined inside the crossing cell;
* the dual value Vtilde(z, beta) as the running z-integral of v, with the
  sub-grid tail integrated in closed form from the small-z asymptote;
* the gradients v_z and v_beta by finite differences;
* the dual initializer zhat(x, beta) solving v(zhat, beta) = -x, with
  evaluation extended below the grid by the asymptote so arbitrarily large
  wealth levels invert.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from koport.model import ModelParams
from koport.vi import ValueSurface, asymptote_g, h_upper_bound

__all__ = [
    "FreeBoundary",
    "DualSurface",
    "extract_boundary",
    "differentiate_surface",
    "integrate_dual_value",
    "build_dual_surface",
    "invert_marginal",
    "wealth_from_dual",
]


@dataclass
class FreeBoundary:
    """Sampled stopping threshold beta -> z*(beta), linear in beta, clamped."""

    beta_nodes: np.ndarray
    z_star: np.ndarray  # may contain +inf sentinels

    def __post_init__(self):
        finite = np.isfinite(self.z_star)
        if not np.any(finite):
            raise ValueError("boundary has no finite nodes")
        self._finite = finite

    def __call__(self, beta):
        beta = np.asarray(beta, dtype=float)
        out = np.interp(beta, self.beta_nodes[self._finite],
                        self.z_star[self._finite])
        return float(out) if out.ndim == 0 else out

    @property
    def z_star_max(self) -> float:
        return float(np.max(self.z_star[self._finite]))


def extract_boundary(surface: ValueSurface) -> FreeBoundary:
    """Per-row first stop node, refined inside the crossing cell.

    v meets the obstacle with a vanishing slope, so near the boundary
    v(z) ~ -(const)(z* - z)^2; extrapolating sqrt(-v) from the last two
    continuation values to zero is exact for that contact and locates the
    crossing inside the cell (the plain first-active-node estimate biases a
    full cell low).  Rows whose active flags are not a single upward run
    raise; rows that never stop in-domain get a +inf sentinel and a warning.
    """
    nb, nz = surface.v.shape
    z_star = np.full(nb, np.inf)
    for j in range(nb):
        act = surface.active[j]
        interior = act[1:-1]
        idx = np.flatnonzero(interior)
        if idx.size == 0:
            warnings.warn(f"row beta={surface.beta[j]:.4f} never stops inside "
                          "the domain; +inf sentinel recorded", RuntimeWarning)
            continue
        first = idx[0] + 1
        if not np.all(interior[idx[0]:]):
            raise RuntimeError(
                f"active set is not single-crossing in z at beta="
                f"{surface.beta[j]:.4f}")
        z_hi = surface.z[j, first]
        if first >= 2:
            z0, z1 = surface.z[j, first - 2], surface.z[j, first - 1]
            s0 = math.sqrt(max(-surface.v[j, first - 2], 0.0))
            s1 = math.sqrt(max(-surface.v[j, first - 1], 0.0))
            if s0 > s1 > 0.0:
                z_cross = z1 + (z1 - z0) * s1 / (s0 - s1)
                # the discrete contact starts up to one cell early, so the
                # extrapolation may legitimately pass the first stop node
                cap = z_hi * math.exp(surface.grid.h)
                z_star[j] = min(max(z_cross, z1), cap)
                continue
        z_star[j] = z_hi
    return FreeBoundary(beta_nodes=surface.beta.copy(), z_star=z_star)


def differentiate_surface(surface: ValueSurface):
    """Gradients (v_z, v_beta): central interior, one-sided at edges.

    The beta differences follow constant z (rows may carry different node z's;
    neighbor rows are sampled at the row's own z by linear interpolation).
    Both gradients vanish identically on the interior of the stop region.
    """
    nb, nz = surface.v.shape
    v_z = np.empty_like(surface.v)
    for j in range(nb):
        v_z[j] = np.gradient(surface.v[j], surface.z[j])

    v_b = np.zeros_like(surface.v)
    if nb > 1:
        k = surface.grid.k

        def row_at(j, z_query):
            # sample row j at arbitrary z (log-linear index within the row)
            y0 = math.log(surface.z[j, 0])
            pos = (np.log(z_query) - y0) / surface.grid.h
            i0 = np.clip(np.floor(pos).astype(int), 0, nz - 2)
            t = np.clip(pos - i0, 0.0, 1.0)
            return (1.0 - t) * surface.v[j, i0] + t * surface.v[j, i0 + 1]

        for j in range(nb):
            z_here = surface.z[j]
            if j == 0:
                v_b[j] = (row_at(1, z_here) - surface.v[j]) / k
            elif j == nb - 1:
                v_b[j] = (surface.v[j] - row_at(nb - 2, z_here)) / k
            else:
                v_b[j] = (row_at(j + 1, z_here) - row_at(j - 1, z_here)) / (2.0 * k)
    return v_z, v_b


@dataclass
class DualSurface:
    """Value surface plus boundary, dual value, and gradients, query-ready."""

    surface: ValueSurface
    boundary: FreeBoundary
    v_tilde: np.ndarray
    v_z: np.ndarray
    v_beta: np.ndarray
    v_z_policy: np.ndarray  # one-sided from the continuation side near z*

    @property
    def params(self) -> ModelParams:
        return self.surface.params

    @property
    def h_beta(self) -> np.ndarray:
        return self.surface.h_beta

    # -- interpolation helpers -------------------------------------------------

    def _h_at(self, beta):
        return np.interp(beta, self.surface.beta, self.surface.h_beta)

    def _bilinear(self, arr, z, beta, outside_high=0.0):
        """Sample a node array at (z, beta); constant extrapolation in beta,
        ``outside_high`` above the grid in z, NaN below (callers handle)."""
        s = self.surface
        g = s.grid
        nb, nz = arr.shape
        z = np.asarray(z, dtype=float)
        beta = np.asarray(beta, dtype=float)
        y = np.log(z)

        if nb == 1:
            j0 = np.zeros(np.broadcast(z, beta).shape, dtype=int)
            tb = np.zeros_like(j0, dtype=float)
        else:
            pos_b = (beta - g.beta_lo) / g.k
            j0 = np.clip(np.floor(pos_b).astype(int), 0, nb - 2)
            tb = np.clip(pos_b - j0, 0.0, 1.0)

        def at_row(j):
            y0 = np.log(s.z[j, 0])
            pos = (y - y0) / g.h
            i0 = np.clip(np.floor(pos).astype(int), 0, nz - 2)
            t = np.clip(pos - i0, 0.0, 1.0)
            vals = (1.0 - t) * arr[j, i0] + t * arr[j, i0 + 1]
            vals = np.where(pos > nz - 1, outside_high, vals)
            return vals, pos < 0

        va, lo_a = at_row(j0)
        if nb == 1:
            return va, lo_a
        vb, lo_b = at_row(j0 + 1)
        return (1.0 - tb) * va + tb * vb, lo_a | lo_b

    def value(self, z, beta):
        """v(z, beta); asymptote below the grid, 0 above."""
        z = np.asarray(z, dtype=float)
        vals, below = self._bilinear(self.surface.v, z, beta, outside_high=0.0)
        if np.any(below):
            g = asymptote_g(np.where(below, z, 1.0), self._h_at(beta), self.params)
            vals = np.where(below, np.minimum(g, 0.0), vals)
        out = np.asarray(vals)
        return float(out) if out.ndim == 0 else out

    def value_z(self, z, beta, policy_side: bool = False):
        arr = self.v_z_policy if policy_side else self.v_z
        z = np.asarray(z, dtype=float)
        vals, below = self._bilinear(arr, z, beta, outside_high=0.0)
        if np.any(below):
            # asymptote gradient: d/dz [ell/r - z^(-1/g) h] = (h/g) z^(-1/g-1)
            p = self.params
            gz = (self._h_at(beta) / p.gamma) * np.where(below, z, 1.0) ** (-1.0 / p.gamma - 1.0)
            vals = np.where(below, gz, vals)
        out = np.asarray(vals)
        return float(out) if out.ndim == 0 else out

    def value_beta(self, z, beta):
        z = np.asarray(z, dtype=float)
        vals, below = self._bilinear(self.v_beta, z, beta, outside_high=0.0)
        if np.any(below):
            # asymptote: -z^(-1/g) h'(beta)
            s = self.surface
            hprime = np.gradient(s.h_beta, s.beta) if len(s.beta) > 1 \
                else np.zeros(1)
            hp = np.interp(beta, s.beta, hprime)
            p = self.params
            gb = -np.where(below, z, 1.0) ** (-1.0 / p.gamma) * hp
            vals = np.where(below, gb, vals)
        out = np.asarray(vals)
        return float(out) if out.ndim == 0 else out

    def invert(self, x: float, beta: float) -> float:
        return invert_marginal(x, beta, self)

    def vtilde(self, z, beta):
        """Dual value: running z-integral of v, constant beyond the boundary."""
        z = np.asarray(z, dtype=float)
        vals, below = self._bilinear(self.v_tilde, z, beta, outside_high=np.nan)
        # above the grid Vtilde stays at the row's last value
        if np.any(np.isnan(np.atleast_1d(vals))):
            top = np.interp(beta, self.surface.beta, self.v_tilde[:, -1])
            vals = np.where(np.isnan(vals), top, vals)
        if np.any(below):
            p = self.params
            e = 1.0 - 1.0 / p.gamma
            zt = np.where(below, z, 1.0)
            tail = p.ell * zt / p.r - self._h_at(beta) * zt ** e / e
            vals = np.where(below, tail, vals)
        out = np.asarray(vals)
        return float(out) if out.ndim == 0 else out


def integrate_dual_value(surface: ValueSurface,
                         h_beta: np.ndarray | None = None) -> np.ndarray:
    """Vtilde rows: closed-form tail below the first node plus trapezoid of v.

    The tail integrates the asymptote ell/r - y^(-1/gamma) h(beta) from 0 to
    the row's first node, which is finite because 1 - 1/gamma > 0.
    """
    p = surface.params
    if p.gamma <= 1.0:
        raise ValueError("dual value tail diverges for gamma <= 1")
    h = surface.h_beta if h_beta is None else h_beta
    nb, nz = surface.v.shape
    e = 1.0 - 1.0 / p.gamma
    out = np.empty_like(surface.v)
    for j in range(nb):
        z0 = surface.z[j, 0]
        tail = p.ell * z0 / p.r - h[j] * z0 ** e / e
        inc = np.concatenate([
            [0.0],
            np.cumsum(0.5 * (surface.v[j, 1:] + surface.v[j, :-1])
                      * np.diff(surface.z[j]))])
        out[j] = tail + inc
    return out


def _policy_side_vz(surface: ValueSurface, v_z: np.ndarray,
                    boundary: FreeBoundary) -> np.ndarray:
    """v_z with one-sided (backward) differences within two cells of z*.

    Central differences straddle the boundary where v is C^1 but not C^2;
    sampling policies right at zhat -> z* (small wealth) is cleaner with the
    continuation-side slope.
    """
    nb, nz = surface.v.shape
    out = v_z.copy()
    for j in range(nb):
        idx = np.flatnonzero(surface.active[j, 1:-1])
        if idx.size == 0:
            continue
        first = idx[0] + 1
        for i in range(max(first - 2, 1), first):
            dz = surface.z[j, i] - surface.z[j, i - 1]
            out[j, i] = (surface.v[j, i] - surface.v[j, i - 1]) / dz
        out[j, first:] = 0.0
    return out


def build_dual_surface(surface: ValueSurface) -> DualSurface:
    boundary = extract_boundary(surface)
    v_z, v_beta = differentiate_surface(surface)
    v_tilde = integrate_dual_value(surface)
    v_z_policy = _policy_side_vz(surface, v_z, boundary)
    return DualSurface(surface=surface, boundary=boundary, v_tilde=v_tilde,
                       v_z=v_z, v_beta=v_beta, v_z_policy=v_z_policy)


def invert_marginal(x: float, beta: float, dual: DualSurface) -> float:
    """Unique zhat in (0, z*(beta)) with v(zhat, beta) = -x.

    Bracketing: the never-stop value ell/r - z^(-1/gamma) h(beta) is an upper
    bound for v, so its crossing of -x lies at or below zhat; the uniform
    lower bound -z^(-1/gamma) / (r + (delta-r)/gamma) crosses -x at or above
    zhat (capped inside the continuation region).
    """
    if x <= 0:
        raise ValueError("wealth must be positive")
    p = dual.params
    h_here = float(dual._h_at(beta))
    z_lo = ((x + p.ell / p.r) / h_here) ** (-p.gamma)
    zs = float(dual.boundary(beta))
    z_hi = min((x / h_upper_bound(p)) ** (-p.gamma), zs * (1.0 - 1e-10))

    f = lambda z: float(dual.value(z, beta)) + x
    flo, fhi = f(z_lo), f(z_hi)
    # expand defensively against interpolation slack at the bracket ends:
    # below by halving, above by whole grid cells (v is exactly zero on the
    # stop nodes, so the upper expansion always terminates)
    tries = 0
    cell = math.exp(dual.surface.grid.h)
    while flo > 0 and tries < 60:
        z_lo *= 0.5
        flo = f(z_lo)
        tries += 1
    while fhi < 0 and tries < 200:
        z_hi *= cell
        fhi = f(z_hi)
        tries += 1
    if flo > 0 or fhi < 0:
        raise RuntimeError(
            f"invert_marginal failed to bracket: x={x}, beta={beta}, "
            f"f(lo)={flo:.3e} at {z_lo:.3e}, f(hi)={fhi:.3e} at {z_hi:.3e}")
    return float(brentq(f, z_lo, z_hi, xtol=1e-14, rtol=1e-13, maxiter=200))


def wealth_from_dual(z, beta, dual: DualSurface):
    """Wealth consistent with a dual state: x = -v(z, beta) (0 in the stop set)."""
    out = -np.asarray(dual.value(z, beta))
    out = np.maximum(out, 0.0)
    return float(out) if out.ndim == 0 else out
