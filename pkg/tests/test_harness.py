import csv
import io
import json

import numpy as np
import pytest

from contprune import cli
from contprune import harness as H
from contprune.errors import InputError, UsageError


@pytest.fixture()
def tiny_cfg_kwargs(tiny_dir, tiny_model_path):
    return dict(
        model_path=str(tiny_model_path),
        corpora={n: str(tiny_dir / f"{n}.bin") for n in ("prose", "numeric")},
        seed=5,
        seq_len=48,
        n_samples=4,
    )


class TestConfig:
    def test_missing_paths_rejected(self, tiny_cfg_kwargs):
        bad = dict(tiny_cfg_kwargs)
        bad["model_path"] = "/nonexistent/model.ckpt"
        with pytest.raises(InputError):
            H.ExperimentConfig(**bad, output_dir="x")

    def test_needs_corpora_and_criteria(self, tiny_cfg_kwargs):
        with pytest.raises(UsageError):
            H.ExperimentConfig(**{**tiny_cfg_kwargs, "corpora": {}}, output_dir="x")
        with pytest.raises(UsageError):
            H.ExperimentConfig(**tiny_cfg_kwargs, output_dir="x", criteria=())


class TestRunContinual:
    def test_cell_counts_and_files(self, tiny_cfg_kwargs, tmp_path):
        cfg = H.ExperimentConfig(**tiny_cfg_kwargs, output_dir=str(tmp_path / "runs"))
        out = H.run_continual(cfg)
        assert out["schema_version"] == 1
        # 2 corpora -> 2 permutations x 2 steps x 2 evals = 8 cells per grid
        for key, g in out["grids"].items():
            assert len(g["report"]["cells"]) == 8, key
            assert g["complete"]
        assert set(out["dense"]["per_dataset"]) == {"prose", "numeric"}
        run_dir = tmp_path / "runs"
        assert (run_dir / "grid.json").exists()
        assert (run_dir / "table.txt").exists()
        assert (run_dir / "table.csv").exists()
        assert (run_dir / "cells_magnitude_unstructured-0.5.csv").exists()

    def test_dense_row_has_no_bwt_and_table_marks_it(self, tiny_cfg_kwargs, tmp_path):
        cfg = H.ExperimentConfig(**tiny_cfg_kwargs, output_dir=str(tmp_path / "runs"))
        out = H.run_continual(cfg)
        table = H.render_table(out)
        dense_line = next(l for l in table.splitlines() if l.startswith("dense"))
        assert "| -" in dense_line
        assert "a_bwt" not in out["dense"]

    def test_ws_marker_for_magnitude(self, tiny_cfg_kwargs, tmp_path):
        cfg = H.ExperimentConfig(**tiny_cfg_kwargs, output_dir=str(tmp_path / "runs"))
        out = H.run_continual(cfg)
        assert out["grids"]["magnitude:unstructured-0.5"]["ws"] is True
        table = H.render_table(out)
        mag_line = next(l for l in table.splitlines() if l.startswith("magnitude"))
        assert "WS" in mag_line

    def test_rerun_is_byte_identical(self, tiny_cfg_kwargs, tmp_path):
        cfg1 = H.ExperimentConfig(**tiny_cfg_kwargs, output_dir=str(tmp_path / "r1"))
        cfg2 = H.ExperimentConfig(**tiny_cfg_kwargs, output_dir=str(tmp_path / "r2"))
        H.run_continual(cfg1)
        H.run_continual(cfg2)
        for name in ("grid.json", "table.txt", "table.csv", "cells_wanda_unstructured-0.5.csv"):
            assert (tmp_path / "r1" / name).read_bytes() == (tmp_path / "r2" / name).read_bytes()

    def test_table_csv_reparses_to_same_aggregates(self, tiny_cfg_kwargs, tmp_path):
        cfg = H.ExperimentConfig(**tiny_cfg_kwargs, output_dir=str(tmp_path / "runs"))
        out = H.run_continual(cfg)
        rows = list(csv.DictReader(io.StringIO((tmp_path / "runs" / "table.csv").read_text())))
        by_key = {f"{r['criterion']}:{r['spec']}": r for r in rows}
        for key, g in out["grids"].items():
            agg = g["report"]["aggregates"]
            row = by_key[key]
            assert float(row["a_ppl"]) == agg["a_ppl"]
            if not g["ws"]:
                assert float(row["a_bwt"]) == agg["a_bwt"]
            else:
                assert row["a_bwt"] == "WS"

    def test_failed_permutations_are_recorded_not_fatal(self, tiny_cfg_kwargs, tmp_path, monkeypatch):
        cfg = H.ExperimentConfig(
            **tiny_cfg_kwargs, output_dir=str(tmp_path / "runs"), criteria=("magnitude",)
        )
        from contprune import harness as hmod

        real = hmod.perplexity
        calls = {"n": 0}

        def flaky(net, corpus, seq_len):
            calls["n"] += 1
            if calls["n"] == 3:  # the first grid cell, after the two dense evals
                raise RuntimeError("synthetic failure")
            return real(net, corpus, seq_len)

        monkeypatch.setattr(hmod, "perplexity", flaky)
        out = H.run_continual(cfg)
        g = out["grids"]["magnitude:unstructured-0.5"]
        assert not g["complete"]
        assert len(g["errors"]) == 1
        assert "synthetic failure" in g["errors"][0]["error"]
        # the other permutation still produced its half of the grid
        assert len(g["report"]["cells"]) == 4

    def test_init_mode_override_forces_sequential(self, tiny_cfg_kwargs, tmp_path):
        cfg = H.ExperimentConfig(
            **tiny_cfg_kwargs, output_dir=str(tmp_path / "runs"),
            criteria=("wanda",), init_mode_override="sequential",
        )
        out = H.run_continual(cfg)
        assert out["grids"]["wanda:unstructured-0.5"]["ws"] is True


class TestAblations:
    def test_sparsity_sweep_rows(self, tiny_cfg_kwargs, tmp_path):
        cfg = H.ExperimentConfig(
            **tiny_cfg_kwargs, output_dir=str(tmp_path / "runs"),
            criteria=("magnitude", "wanda"), sparsity_sweep=(0.5,),
        )
        rows = H.run_ablation_sparsity(cfg)
        assert len(rows) == 2  # one row per criterion at the single sparsity
        assert {r["criterion"] for r in rows} == {"magnitude", "wanda"}
        text = (tmp_path / "runs" / "ablation_sparsity.csv").read_text()
        assert text.splitlines()[0] == "criterion,sparsity,a_bwt,m_bwt"

    def test_samples_sweep_single_row(self, tiny_cfg_kwargs, tmp_path):
        cfg = H.ExperimentConfig(
            **tiny_cfg_kwargs, output_dir=str(tmp_path / "runs"), samples_sweep=(4,),
        )
        rows = H.run_ablation_samples(cfg)
        assert len(rows) == 1
        assert rows[0]["criterion"] == "sensitivity"
        assert rows[0]["n_samples"] == 4
        assert isinstance(rows[0]["a_bwt"], float)


class TestCli:
    def test_gen_train_eval_prune_pipeline(self, tmp_path, capsys):
        data = tmp_path / "data"
        assert cli.main(["gen-corpora", "--out", str(data), "--tokens", "12000", "--seed", "1"]) == 0
        model = tmp_path / "m.ckpt"
        assert cli.main([
            "train", "--corpora-dir", str(data), "--out", str(model),
            "--steps", "40", "--batch", "4", "--seq-len", "24",
            "--dim", "16", "--hidden", "24", "--blocks", "1", "--seed", "3",
        ]) == 0
        assert cli.main([
            "eval", "--model", str(model),
            "--corpus-path", str(data / "prose.bin"), "--corpus-name", "prose",
            "--seq-len", "24",
        ]) == 0
        out = capsys.readouterr().out
        assert "perplexity" in out
        pruned = tmp_path / "p.ckpt"
        state = tmp_path / "s.bin"
        assert cli.main([
            "prune", "--model", str(model), "--corpus-path", str(data / "prose.bin"),
            "--corpus-name", "prose", "--criterion", "sensitivity", "--sparsity", "0.5",
            "--n-samples", "2", "--seq-len", "24", "--seed", "0",
            "--out", str(pruned), "--save-state", str(state),
            "--export-masks", str(tmp_path / "masks"),
        ]) == 0
        assert pruned.exists() and state.exists()
        assert (tmp_path / "masks" / "masks.json").exists()

    def test_run_grid_with_config_file_and_flag_override(self, tiny_cfg_kwargs, tmp_path, capsys):
        config = {
            "model_path": tiny_cfg_kwargs["model_path"],
            "corpora": tiny_cfg_kwargs["corpora"],
            "criteria": ["magnitude"],
            "seq_len": 48,
            "n_samples": 4,
            "seed": 1,
        }
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(config))
        out_dir = tmp_path / "grid"
        rc = cli.main([
            "run-grid", "--config", str(cfg_path),
            "--out", str(out_dir), "--seed", "7",  # flag overrides the file seed
        ])
        assert rc == 0
        written = json.loads((out_dir / "grid.json").read_text())
        assert written["config"]["seed"] == 7
        assert written["config"]["criteria"] == ["magnitude"]
        table = capsys.readouterr().out
        assert "magnitude" in table

    def test_run_grid_requires_seed(self, tiny_cfg_kwargs, tmp_path):
        with pytest.raises(SystemExit):
            cli.main([
                "run-grid", "--model", tiny_cfg_kwargs["model_path"],
                "--corpus", f"prose={tiny_cfg_kwargs['corpora']['prose']}",
                "--out", str(tmp_path / "g"),
            ])

    def test_report_rerenders_table(self, tiny_cfg_kwargs, tmp_path, capsys):
        cfg = H.ExperimentConfig(
            **tiny_cfg_kwargs, output_dir=str(tmp_path / "runs"), criteria=("magnitude",)
        )
        H.run_continual(cfg)
        capsys.readouterr()
        assert cli.main(["report", "--run-dir", str(tmp_path / "runs")]) == 0
        out = capsys.readouterr().out
        assert "criterion" in out and "dense" in out
