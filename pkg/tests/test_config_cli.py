import math
from pathlib import Path

import numpy as np
import pytest

from koport.cli import run
from koport.config import load_config

REPO_CONFIGS = Path(__file__).resolve().parents[1] / "configs"

TINY = """
[model]
r = 0.03
delta = 0.04
ell = 0.6
gamma = 1.5
kappa = 0.25
beta_bar = 0.05
sigma_beta = 0.03
sigma = 0.18

[grid]
n_z = 200
n_beta = 61

[sim]
horizon = 2.0
n_paths = 60
seed = 77
budget_horizon = 40.0

[output]
scenario = tiny
"""


@pytest.fixture()
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY + f"\n")
    # point the output into the tmp tree
    text = path.read_text().replace("[output]\nscenario = tiny",
                                    f"[output]\nout_dir = {tmp_path}/out\nscenario = tiny")
    path.write_text(text)
    return path


class TestLoadConfig:
    def test_reference_config(self):
        cfg = load_config(REPO_CONFIGS / "paper.cfg")
        p = cfg.params
        assert (p.r, p.delta, p.ell, p.gamma) == (0.03, 0.04, 0.6, 1.5)
        assert (p.kappa, p.beta_bar, p.sigma_beta, p.sigma) == \
            (0.25, 0.05, 0.03, 0.18)
        assert cfg.n_paths == 10_000 and cfg.horizon == 30.0

    def test_defaults_filled_and_echoed(self, tmp_path):
        path = tmp_path / "min.cfg"
        path.write_text("[model]\nr = 0.05\n")
        cfg = load_config(path)
        assert cfg.dt == pytest.approx(1 / 250)
        assert cfg.resolved["sim"]["dt"] == pytest.approx(1 / 250)
        assert cfg.params.r == 0.05
        assert cfg.beta0 == cfg.params.beta_bar  # nan default resolves

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("[model]\nr = 0.05\nnot_a_key = 1\n")
        with pytest.raises(ValueError, match="unknown key"):
            load_config(path)

    def test_unknown_section_rejected(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("[mystery]\nx = 1\n")
        with pytest.raises(ValueError, match="unknown config section"):
            load_config(path)

    def test_bad_params_rejected(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("[model]\ngamma = 0.9\n")
        with pytest.raises(ValueError, match="invalid model parameters"):
            load_config(path)

    def test_constant_config_needs_permissive(self):
        with pytest.raises(ValueError):
            load_config(REPO_CONFIGS / "constant.cfg", mode="strict")
        cfg = load_config(REPO_CONFIGS / "constant.cfg", mode="permissive")
        assert cfg.params.is_constant_beta
        assert cfg.grid.n_beta == 1

    def test_scan_configs_parse(self):
        for name in ("labor_ell02.cfg", "labor_ell10.cfg",
                     "gamma_12.cfg", "gamma_20.cfg"):
            cfg = load_config(REPO_CONFIGS / name)
            assert cfg.scenario != "paper"


class TestCli:
    def test_missing_config_usage_error(self, tmp_path):
        assert run(["solve", "--config", str(tmp_path / "nope.cfg")]) == 2

    def test_bad_config_usage_error(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("[model]\nwhat = 1\n")
        assert run(["solve", "--config", str(path)]) == 2

    def test_solve_writes_surface(self, tiny_cfg, tmp_path):
        assert run(["solve", "--config", str(tiny_cfg)]) == 0
        out = tmp_path / "out" / "tiny"
        assert (out / "surface.csv").exists()
        assert (out / "surface.meta").exists()
        header = (out / "surface.csv").read_text().splitlines()[0]
        assert header == "z,beta,v,active,residual"

    def test_boundary_and_policy(self, tiny_cfg, tmp_path):
        assert run(["boundary", "--config", str(tiny_cfg)]) == 0
        assert run(["policy", "--config", str(tiny_cfg)]) == 0
        out = tmp_path / "out" / "tiny"
        assert (out / "boundary.csv").read_text().splitlines()[0] == "beta,z_star"
        assert (out / "policy.csv").read_text().splitlines()[0] == \
            "x,beta,z_hat,c_star,pi_star,V"
        assert (out / "dual.csv").read_text().splitlines()[0] == \
            "z,beta,v,v_tilde,v_z,v_beta"

    def test_simulate_outputs(self, tiny_cfg, tmp_path):
        assert run(["simulate", "--config", str(tiny_cfg)]) == 0
        out = tmp_path / "out" / "tiny"
        for name in ("path.csv", "ensemble.csv", "p_paths.csv", "q_paths.csv"):
            assert (out / name).exists(), name
        assert (out / "path.csv").read_text().splitlines()[0] == \
            ("t,beta,z1,d_star,z_ctrl,x_star,c_star,pi_star,"
             "reflect_flag,z_star_t,h")
        assert (out / "ensemble.csv").read_text().splitlines()[0] == \
            "t,mean_x,se_x,q05,q50,q95"
        assert (out / "p_paths.csv").read_text().splitlines()[0] == \
            "path_id,t,beta,log_h,log_z1"

    def test_validate_deterministic_bytes(self, tiny_cfg, tmp_path):
        rc1 = run(["validate", "--config", str(tiny_cfg), "--seed", "7"])
        first = (tmp_path / "out" / "tiny" / "validation.csv").read_bytes()
        rc2 = run(["validate", "--config", str(tiny_cfg), "--seed", "7"])
        second = (tmp_path / "out" / "tiny" / "validation.csv").read_bytes()
        assert first == second
        assert rc1 == rc2

    def test_out_dir_override(self, tiny_cfg, tmp_path):
        other = tmp_path / "elsewhere"
        assert run(["boundary", "--config", str(tiny_cfg),
                    "--out-dir", str(other)]) == 0
        assert (other / "tiny" / "boundary.csv").exists()
