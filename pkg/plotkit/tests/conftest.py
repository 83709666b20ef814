import numpy as np
import pytest

pytest.importorskip("plotkit")


@pytest.fixture()
def synthetic_csvs(tmp_path):
    """Minimal CSV set matching the documented pipeline schemas."""
    rng = np.random.default_rng(0)
    t = np.linspace(0, 5, 60)

    def write(name, header, cols):
        path = tmp_path / name
        with open(path, "w") as fh:
            fh.write(",".join(header) + "\n")
            for row in zip(*cols):
                fh.write(",".join(str(v) for v in row) + "\n")
        return path

    d_star = np.minimum.accumulate(1.0 - 0.1 * rng.random(60).cumsum() / 60)
    reflect = np.zeros(60, dtype=int)
    reflect[20] = 1
    write("fig1_paths.csv",
          ["t", "beta", "z1", "d_star", "z_ctrl", "x_star", "c_star",
           "pi_star", "reflect_flag", "z_star_t", "h"],
          [t, 0.05 + 0.01 * np.sin(t), 3 + t, d_star, (3 + t) * d_star,
           np.abs(rng.normal(1, 0.1, 60)), 0.5 + 0 * t, 2 + 0 * t, reflect,
           4.5 + 0 * t, np.exp(-0.03 * t)])

    agents = ["stochastic"] * 60 + ["constant"] * 60
    t2 = np.concatenate([t, t])
    mean_x = np.concatenate([1 + 0.10 * t, 1 + 0.08 * t])
    se = np.full(120, 0.01)
    write("fig2_compare.csv", ["t", "agent", "mean_x", "se_x", "q05", "q50", "q95"],
          [t2, agents, mean_x, se, mean_x - 0.2, mean_x, mean_x + 0.2])

    x = np.linspace(0.1, 10, 25)
    for name, col, vals in (("fig3_labor.csv", "ell", (0.2, 0.6, 1.0)),
                            ("fig4_gamma.csv", "gamma", (1.2, 1.5, 2.0)),
                            ("fig5_beta.csv", "beta", (0.02, 0.05, 0.12))):
        xs, vs, cs, ps = [], [], [], []
        for v in vals:
            xs.append(x)
            vs.append(np.full_like(x, v))
            cs.append(0.3 + 0.05 * x * (1 + v))
            ps.append(0.5 + 0.8 * x * (1 + v))
        write(name, ["x", col, "c_star", "pi_star"],
              [np.concatenate(xs), np.concatenate(vs), np.concatenate(cs),
               np.concatenate(ps)])
    return tmp_path
