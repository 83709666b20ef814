import numpy as np
import pytest

from koport.model import ModelParams


@pytest.fixture(scope="session")
def paper_params() -> ModelParams:
    """Reference parameter point used throughout the experiments."""
    return ModelParams(r=0.03, delta=0.04, ell=0.6, gamma=1.5,
                       kappa=0.25, beta_bar=0.05, sigma_beta=0.03, sigma=0.18)


@pytest.fixture(scope="session")
def const_params(paper_params) -> ModelParams:
    """Constant-factor variant: frozen excess return."""
    return paper_params.replace(kappa=0.0, sigma_beta=0.0)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def fast_dual(paper_params):
    """Shared mid-resolution dual surface for unit tests."""
    from koport.dual import build_dual_surface
    from koport.vi import default_grid, solve_vi_cascade

    surface = solve_vi_cascade(default_grid(paper_params, n_z=300, n_beta=101),
                               paper_params)
    return build_dual_surface(surface)


@pytest.fixture(scope="session")
def default_dual(paper_params):
    """Full default-resolution dual surface (used by acceptance checks)."""
    from koport.dual import build_dual_surface
    from koport.vi import default_grid, solve_vi_cascade

    surface = solve_vi_cascade(default_grid(paper_params), paper_params)
    return build_dual_surface(surface)


@pytest.fixture(scope="session")
def const_solution(const_params):
    from koport.oracles import solve_constant_beta

    return solve_constant_beta(const_params, const_params.beta_bar)


@pytest.fixture(scope="session")
def const_dual(const_solution):
    from koport.oracles import ConstantFactorDual

    return ConstantFactorDual(const_solution)
