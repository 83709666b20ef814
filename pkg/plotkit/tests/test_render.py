from pathlib import Path

import pytest

from plotkit.render import FIGURE_IDS, FigureSpec, SchemaError, main, render, render_all


class TestRender:
    def test_all_ten_figures(self, synthetic_csvs, tmp_path):
        out = tmp_path / "img"
        paths = render_all(synthetic_csvs, out)
        assert len(paths) == 10
        for p in paths:
            assert p.exists() and p.stat().st_size > 1000

    def test_deterministic_bytes(self, synthetic_csvs, tmp_path):
        spec = FigureSpec("1a", synthetic_csvs / "fig1_paths.csv",
                          tmp_path / "a.png")
        render(spec)
        first = spec.out_path.read_bytes()
        render(spec)
        assert spec.out_path.read_bytes() == first

    def test_schema_mismatch_lists_columns(self, synthetic_csvs, tmp_path):
        bad = synthetic_csvs / "fig2_compare.csv"
        text = bad.read_text().splitlines()
        text[0] = text[0].replace("mean_x", "avg")
        bad.write_text("\n".join(text) + "\n")
        spec = FigureSpec("2", bad, tmp_path / "b.png")
        with pytest.raises(SchemaError, match="mean_x"):
            render(spec)

    def test_missing_file(self, tmp_path):
        spec = FigureSpec("1b", tmp_path / "nope.csv", tmp_path / "c.png")
        with pytest.raises(SchemaError, match="missing input"):
            render(spec)

    def test_unknown_figure_id(self, tmp_path):
        with pytest.raises(ValueError):
            FigureSpec("9z", tmp_path / "x.csv", tmp_path / "y.png")

    def test_cli(self, synthetic_csvs, tmp_path):
        out = tmp_path / "cli_img"
        rc = main(["--in-dir", str(synthetic_csvs), "--out-dir", str(out)])
        assert rc == 0
        assert len(list(out.glob("fig*.png"))) == len(FIGURE_IDS)

    def test_cli_schema_failure_is_nonzero(self, tmp_path):
        rc = main(["--in-dir", str(tmp_path), "--out-dir", str(tmp_path)])
        assert rc == 1
