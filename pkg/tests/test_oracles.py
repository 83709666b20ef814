import math

import numpy as np
import pytest

from koport.model import boundary_floor
from koport.oracles import (
    ConstantFactorDual,
    check_moment_bound,
    estimate_h_mc,
    mc_value_estimate,
    mc_vbeta_estimate,
    mc_vz_estimate,
    solve_constant_beta,
)
from koport.vi import default_grid, left_boundary_values


class TestConstBetaSolution:
    def test_residual_on_continuation(self, const_solution):
        z = np.geomspace(0.01, const_solution.z_star * 0.999, 50)
        assert np.max(np.abs(const_solution.residual(z))) < 1e-10

    def test_pasting(self, const_solution):
        # evaluate the continuation branch exactly at z*
        sol = const_solution
        p = sol.params
        zs = sol.z_star
        v_at = (p.ell / p.r - zs ** (-1 / p.gamma) / (p.r + sol.rho)
                + sol.A * zs ** sol.alpha_plus)
        vp_at = (zs ** (-1 / p.gamma - 1) / (p.gamma * (p.r + sol.rho))
                 + sol.A * sol.alpha_plus * zs ** (sol.alpha_plus - 1))
        assert abs(v_at) < 1e-10
        assert abs(vp_at) < 1e-10

    def test_reference_boundary_value(self, const_solution):
        # frozen value from the smooth-pasting construction at the reference
        # parameter point (recomputed, not copied from anywhere)
        assert const_solution.z_star == pytest.approx(4.506892259129195, rel=1e-12)
        assert const_solution.z_star > boundary_floor(const_solution.params)

    def test_invert_round_trip(self, const_solution):
        for x in (0.1, 1.0, 10.0, 1e3):
            z = const_solution.invert(x)
            assert const_solution.value(z) == pytest.approx(-x, rel=1e-9)

    def test_vtilde_derivative_is_value(self, const_solution):
        z = np.geomspace(0.05, const_solution.z_star * 2, 200)
        eps = 1e-6
        num = (const_solution.vtilde(z * (1 + eps))
               - const_solution.vtilde(z * (1 - eps))) / (2 * z * eps)
        assert np.max(np.abs(num - const_solution.value(z))) < 1e-5

    def test_zero_factor_level_needs_positive_gap(self, const_params):
        with pytest.raises(ValueError, match="delta > r"):
            solve_constant_beta(const_params.replace(delta=0.03), 0.0)

    def test_adapter_interface(self, const_dual):
        assert const_dual.boundary(0.3) == const_dual.sol.z_star
        z = const_dual.invert(1.0, 0.05)
        assert const_dual.value(z) == pytest.approx(-1.0, rel=1e-9)
        assert const_dual.value_beta(z) == 0.0


@pytest.fixture(scope="module")
def fast_boundary(fast_dual):
    return fast_dual.boundary


class TestStoppedEstimators:
    def test_deep_stop_is_exactly_zero(self, fast_boundary, paper_params):
        zs = fast_boundary(0.05)
        for fn in (mc_value_estimate, mc_vz_estimate, mc_vbeta_estimate):
            est = fn(zs * 3.0, 0.05, fast_boundary, paper_params, n=200,
                     dt=1 / 50, seed=1, horizon=5.0)
            assert est.value == 0.0
            assert est.alive_fraction == 0.0

    def test_value_nonpositive(self, fast_boundary, paper_params):
        est = mc_value_estimate(1.0, 0.05, fast_boundary, paper_params,
                                n=2000, dt=1 / 100, seed=3, horizon=120.0)
        assert est.value <= 3 * est.se

    def test_vz_nonnegative(self, fast_boundary, paper_params):
        est = mc_vz_estimate(1.0, 0.05, fast_boundary, paper_params,
                             n=2000, dt=1 / 100, seed=4, horizon=120.0)
        assert est.value >= 0.0

    def test_value_matches_solver(self, fast_dual, paper_params):
        for z, b, sd in ((1.0, 0.05, 11), (2.5, 0.02, 12), (0.5, 0.12, 13)):
            est = mc_value_estimate(z, b, fast_dual.boundary, paper_params,
                                    n=4000, dt=1 / 100, seed=sd, horizon=150.0)
            fd = float(fast_dual.value(z, b))
            tol = 3 * est.se + est.tail_bound + 0.02 * abs(fd)
            assert abs(est.value - fd) < tol

    def test_vz_matches_solver(self, fast_dual, paper_params):
        z, b = 1.5, 0.05
        est = mc_vz_estimate(z, b, fast_dual.boundary, paper_params,
                             n=4000, dt=1 / 100, seed=5, horizon=150.0)
        fd = float(fast_dual.value_z(z, b))
        assert abs(est.value - fd) < 3 * est.se + est.tail_bound + 0.05 * abs(fd)

    def test_vbeta_frozen_factor_limit(self, paper_params):
        # with kappa and sigma_beta tiny, the pathwise-derivative estimator
        # approaches the finite difference of frozen-factor closed forms
        p = paper_params.replace(kappa=1e-3, sigma_beta=1e-7)
        beta0, z = 0.06, 4.0
        eps = 5e-4
        sols = {s: solve_constant_beta(p, beta0 + s * eps) for s in (-1, 1)}
        fd = (sols[1].value(z) - sols[-1].value(z)) / (2 * eps)
        bnd = lambda b: np.full_like(np.asarray(b, dtype=float),
                                     sols[-1].z_star)
        est = mc_vbeta_estimate(z, beta0, bnd, p, n=8000, dt=1 / 100,
                                seed=6, horizon=120.0)
        assert abs(est.value - fd) < 3 * est.se + 0.1 * abs(fd)

    def test_provenance_recorded(self, fast_boundary, paper_params):
        est = mc_value_estimate(1.0, 0.05, fast_boundary, paper_params,
                                n=500, dt=1 / 50, seed=42, horizon=60.0)
        assert (est.seed, est.n_paths, est.dt, est.horizon) == (42, 500, 1 / 50, 60.0)
        assert est.tail_bound >= 0.0

    def test_flagged_when_truncation_matters(self, fast_boundary, paper_params):
        # a very short horizon leaves most paths alive; with a tail tolerance
        # the estimate is flagged, without one it is not
        kw = dict(n=300, dt=1 / 50, seed=2, horizon=0.5)
        short = mc_value_estimate(0.5, 0.05, fast_boundary, paper_params,
                                  tol_tail=1e-6, **kw)
        assert short.alive_fraction > 1e-3
        assert short.flagged
        lax = mc_value_estimate(0.5, 0.05, fast_boundary, paper_params, **kw)
        assert not lax.flagged

    def test_step_halving_within_noise(self, fast_boundary, paper_params):
        # halving dt moves the estimate by less than 3 combined s.e.
        a = mc_value_estimate(1.0, 0.05, fast_boundary, paper_params,
                              n=4000, dt=1 / 100, seed=31, horizon=120.0)
        b = mc_value_estimate(1.0, 0.05, fast_boundary, paper_params,
                              n=4000, dt=1 / 200, seed=32, horizon=120.0)
        assert abs(a.value - b.value) < 3 * math.hypot(a.se, b.se) \
            + a.tail_bound + b.tail_bound


class TestMomentBound:
    def test_reference_bound_value(self, paper_params):
        recs = check_moment_bound(1.0, 0.05, paper_params, t_list=(1.0,),
                                  n=2000, dt=1 / 50, seed=7)
        assert recs[0]["bound"] == pytest.approx(math.exp(-0.01 / 1.5), rel=1e-12)
        assert recs[0]["bound"] == pytest.approx(0.9933555, abs=5e-7)

    def test_bound_holds(self, paper_params):
        recs = check_moment_bound(1.0, 0.05, paper_params, t_list=(1.0, 5.0),
                                  n=20_000, dt=1 / 100, seed=8)
        assert all(r["passed"] for r in recs)

    def test_z_scaling_is_exact(self, paper_params):
        a = check_moment_bound(1.0, 0.05, paper_params, t_list=(1.0,),
                               n=2000, dt=1 / 50, seed=9)[0]
        b = check_moment_bound(4.0, 0.05, paper_params, t_list=(1.0,),
                               n=2000, dt=1 / 50, seed=9)[0]
        scale = 4.0 ** (-1 / paper_params.gamma)
        assert b["mean"] == pytest.approx(a["mean"] * scale, rel=1e-12)
        assert b["bound"] == pytest.approx(a["bound"] * scale, rel=1e-12)


class TestAsymptoteFactor:
    def test_mc_agrees_with_ode(self, paper_params):
        grid = default_grid(paper_params, n_z=50, n_beta=101)
        h = left_boundary_values(grid, paper_params)
        j = int(np.argmin(np.abs(grid.beta - 0.05)))
        est = estimate_h_mc(float(grid.beta[j]), paper_params, n=4000,
                            dt=1 / 100, horizon=150.0, seed=10)
        tol = max(0.025 * h[j], 3 * est.se + est.tail_bound)
        assert abs(est.value - h[j]) < tol
