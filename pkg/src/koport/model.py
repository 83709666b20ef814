"""Market/preference constants, utility functions, and parameter validation.

The market has a risk-free rate r, a risky asset whose excess return beta_t
follows a mean-reverting OU process perfectly negatively correlated with the
asset shocks, constant labor income ell, and a CRRA agent with risk aversion
gamma > 1 discounting at delta.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ModelParams",
    "ValidationReport",
    "ValidationEntry",
    "validate_params",
    "utility",
    "dual_utility",
    "dual_utility_prime",
    "boundary_floor",
]


@dataclass(frozen=True)
class ModelParams:
    """The eight market/preference constants.

    r          risk-free rate (1/year)
    delta      utility discount rate (1/year)
    ell        labor income flow (wealth/year)
    gamma      relative risk aversion (> 1)
    kappa      mean-reversion speed of the excess return (1/year)
    beta_bar   long-run excess return level (1/year)
    sigma_beta volatility of the excess return factor (1/year)
    sigma      volatility of the risky asset (1/sqrt(year))
    """

    r: float
    delta: float
    ell: float
    gamma: float
    kappa: float
    beta_bar: float
    sigma_beta: float
    sigma: float

    @property
    def a(self) -> float:
        """Mean-reversion rate of the factor under the auxiliary measure."""
        return self.kappa - self.sigma_beta / self.sigma

    @property
    def b(self) -> float:
        """Long-run factor level under the auxiliary measure (requires a > 0)."""
        a = self.a
        if a <= 0.0:
            raise ValueError(f"b undefined: a = kappa - sigma_beta/sigma = {a:.6g} <= 0")
        return self.kappa * self.beta_bar / a

    @property
    def is_constant_beta(self) -> bool:
        """True in the degenerate regime kappa = sigma_beta = 0 (frozen factor)."""
        return self.kappa == 0.0 and self.sigma_beta == 0.0

    def replace(self, **kw) -> "ModelParams":
        d = {k: getattr(self, k) for k in
             ("r", "delta", "ell", "gamma", "kappa", "beta_bar", "sigma_beta", "sigma")}
        d.update(kw)
        return ModelParams(**d)


@dataclass(frozen=True)
class ValidationEntry:
    check: str
    severity: str  # "error" | "warning"
    message: str
    margin: float  # positive margin = satisfied with room, negative = violated


@dataclass
class ValidationReport:
    entries: list[ValidationEntry] = field(default_factory=list)

    @property
    def errors(self) -> list[ValidationEntry]:
        return [e for e in self.entries if e.severity == "error"]

    @property
    def warnings(self) -> list[ValidationEntry]:
        return [e for e in self.entries if e.severity == "warning"]

    @property
    def ok(self) -> bool:
        return not self.errors

    def add(self, check: str, severity: str, message: str, margin: float) -> None:
        self.entries.append(ValidationEntry(check, severity, message, margin))

    def summary(self) -> str:
        lines = []
        for e in self.entries:
            lines.append(f"[{e.severity}] {e.check}: {e.message} (margin={e.margin:.6g})")
        if not lines:
            lines.append("all checks passed")
        return "\n".join(lines)


def validate_params(p: ModelParams, mode: str = "strict") -> ValidationReport:
    """Check all parameter restrictions, returning a report.

    ``mode="strict"`` requires the factor restriction kappa*sigma > sigma_beta
    and a > 0.  ``mode="permissive"`` additionally accepts the constant-factor
    regime kappa = sigma_beta = 0, skipping the factor restriction.

    The risk-aversion floor gamma > sigma_beta/(sigma*(kappa - sigma_beta/sigma))
    is reported as a warning only: the reference parameter point (gamma = 1.5)
    sits below it, and the solved problem remains well behaved there.
    """
    if mode not in ("strict", "permissive"):
        raise ValueError(f"unknown validation mode: {mode!r}")
    rep = ValidationReport()

    fields = ("r", "delta", "ell", "gamma", "kappa", "beta_bar", "sigma_beta", "sigma")
    for name in fields:
        val = getattr(p, name)
        if not math.isfinite(val):
            rep.add(f"finite[{name}]", "error", f"{name} = {val} is not finite", -math.inf)
    if rep.errors:
        return rep

    for name in ("r", "delta", "ell", "sigma"):
        val = getattr(p, name)
        if val <= 0.0:
            rep.add(f"positive[{name}]", "error", f"{name} = {val:.6g} must be > 0", val)
    if p.gamma <= 1.0:
        rep.add("gamma>1", "error", f"gamma = {p.gamma:.6g} must exceed 1", p.gamma - 1.0)
    if p.kappa < 0.0:
        rep.add("kappa>=0", "error", f"kappa = {p.kappa:.6g} must be >= 0", p.kappa)
    if p.sigma_beta < 0.0:
        rep.add("sigma_beta>=0", "error",
                f"sigma_beta = {p.sigma_beta:.6g} must be >= 0", p.sigma_beta)
    if rep.errors:
        return rep

    if p.is_constant_beta:
        if mode == "permissive":
            rep.add("constant-beta", "warning",
                    "kappa = sigma_beta = 0: constant-factor regime, "
                    "factor restriction skipped", 0.0)
        else:
            rep.add("factor-restriction", "error",
                    "kappa = sigma_beta = 0 only accepted in permissive mode", 0.0)
        return rep

    margin = p.kappa * p.sigma - p.sigma_beta
    if margin <= 0.0:
        rep.add("factor-restriction", "error",
                f"kappa*sigma = {p.kappa * p.sigma:.6g} must exceed "
                f"sigma_beta = {p.sigma_beta:.6g}", margin)
        return rep
    a = p.a
    if a <= 0.0:
        rep.add("a>0", "error", f"a = kappa - sigma_beta/sigma = {a:.6g} must be > 0", a)
        return rep
    if p.sigma_beta > 0.0:
        # gamma floor is sufficient, not necessary, for well-posedness: warn only.
        bound = p.sigma_beta / (p.sigma * a)
        if p.gamma <= bound:
            rep.add("gamma-floor", "warning",
                    f"gamma = {p.gamma:.6g} <= sigma_beta/(sigma*a) = {bound:.6g}; "
                    "proceeding (restriction is sufficient, not necessary)",
                    p.gamma - bound)
    return rep


def utility(c, gamma: float):
    """CRRA utility c^(1-gamma)/(1-gamma); strictly negative for gamma > 1."""
    c = np.asarray(c, dtype=float)
    if np.any(c <= 0.0):
        raise ValueError("utility requires c > 0")
    out = c ** (1.0 - gamma) / (1.0 - gamma)
    return float(out) if out.ndim == 0 else out


def dual_utility(z, gamma: float):
    """Convex conjugate of the CRRA utility: sup_c (u(c) - z c)."""
    z = np.asarray(z, dtype=float)
    if np.any(z <= 0.0):
        raise ValueError("dual_utility requires z > 0")
    out = gamma / (1.0 - gamma) * z ** (-(1.0 - gamma) / gamma)
    return float(out) if out.ndim == 0 else out


def dual_utility_prime(z, gamma: float):
    """Derivative of the conjugate: -z^(-1/gamma)."""
    z = np.asarray(z, dtype=float)
    if np.any(z <= 0.0):
        raise ValueError("dual_utility_prime requires z > 0")
    out = -(z ** (-1.0 / gamma))
    return float(out) if out.ndim == 0 else out


def boundary_floor(p: ModelParams) -> float:
    """Proven lower bound ell^(-gamma) for the stopping threshold z*(beta)."""
    return p.ell ** (-p.gamma)
