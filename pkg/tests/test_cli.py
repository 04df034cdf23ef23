import json
import subprocess

import pytest

from lungsound import __version__, cli

from conftest import TINY_RUN_CONFIG


def invoke(argv, capsys):
    code = cli.main(argv)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


@pytest.fixture(scope="module")
def chain_dir(tmp_path_factory):
    """Run the whole command suite once on a fresh directory."""
    base = tmp_path_factory.mktemp("cli_chain")
    config_path = base / "config.json"
    config_path.write_text(json.dumps(TINY_RUN_CONFIG))
    run_dir = base / "run"
    first = ["synth", "--run-dir", str(run_dir), "--config", str(config_path)]
    assert cli.main(first) == 0
    for command in ("preprocess", "embed", "train-base", "stack",
                    "aggregate", "evaluate", "report"):
        assert cli.main([command, "--run-dir", str(run_dir)]) == 0, command
    return run_dir


class TestParser:
    def test_version(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(["--version"])
        assert exc.value.code == 0
        assert capsys.readouterr().out.strip() == f"lungsound {__version__}"

    def test_command_required(self):
        with pytest.raises(SystemExit) as exc:
            cli.main([])
        assert exc.value.code == 2

    def test_unknown_command(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["transmogrify", "--run-dir", "x"])
        assert exc.value.code == 2

    def test_run_dir_required(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["synth"])
        assert exc.value.code == 2

    def test_evaluate_level_choices(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["evaluate", "--run-dir", "x", "--level", "sideways"])
        assert exc.value.code == 2

    def test_console_script_installed(self):
        proc = subprocess.run(["lungsound", "--version"],
                              capture_output=True, text=True)
        assert proc.returncode == 0
        assert __version__ in proc.stdout


class TestConfigErrors:
    def test_first_command_needs_config(self, tmp_path, capsys):
        code, _, err = invoke(["synth", "--run-dir", str(tmp_path / "r")], capsys)
        assert code == 2
        assert "configuration error" in err
        assert "--config" in err

    def test_config_file_missing(self, tmp_path, capsys):
        code, _, err = invoke(
            ["synth", "--run-dir", str(tmp_path / "r"),
             "--config", str(tmp_path / "none.json")], capsys)
        assert code == 2
        assert "not found" in err

    def test_config_unknown_key(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"seed": 1, "wings": 2}))
        code, _, err = invoke(
            ["synth", "--run-dir", str(tmp_path / "r"), "--config", str(cfg)],
            capsys)
        assert code == 2
        assert "wings" in err

    def test_conflicting_config_rejected(self, chain_dir, tmp_path, capsys):
        other = tmp_path / "other.json"
        other.write_text(json.dumps(dict(TINY_RUN_CONFIG, seed=999)))
        code, _, err = invoke(
            ["synth", "--run-dir", str(chain_dir), "--config", str(other)],
            capsys)
        assert code == 2
        assert "refusing to mix artifacts" in err

    def test_ingest_without_data_root(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"seed": 1}))
        code, _, err = invoke(
            ["ingest", "--run-dir", str(tmp_path / "r"), "--config", str(cfg)],
            capsys)
        assert code == 2
        assert "data_root" in err


class TestFastToggle:
    def seed_only_run(self, tmp_path, capsys, extra=()):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"seed": 1}))
        argv = ["preprocess", "--run-dir", str(tmp_path / "r"),
                "--config", str(cfg), *extra]
        return invoke(argv, capsys)

    def test_fast_cannot_be_added_later(self, tmp_path, capsys):
        code, _, _ = self.seed_only_run(tmp_path, capsys)
        assert code == 3  # dir created, corpus missing
        code, _, err = invoke(
            ["preprocess", "--run-dir", str(tmp_path / "r"), "--fast"], capsys)
        assert code == 2
        assert "cannot be toggled" in err

    def test_fast_at_creation_sticks(self, tmp_path, capsys):
        code, _, _ = self.seed_only_run(tmp_path, capsys, extra=["--fast"])
        assert code == 3
        stored = json.loads((tmp_path / "r" / "config.json").read_text())
        assert stored["fast"] is True
        code, _, _ = invoke(
            ["preprocess", "--run-dir", str(tmp_path / "r"), "--fast"], capsys)
        assert code == 3  # allowed; still fails on the missing corpus


class TestDataErrors:
    def test_missing_artifact_names_producer(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"seed": 1}))
        code, _, err = invoke(
            ["preprocess", "--run-dir", str(tmp_path / "r"),
             "--config", str(cfg)], capsys)
        assert code == 3
        assert "data error" in err
        assert "ingest (or synth)" in err

    def test_ingest_empty_data_root(self, tmp_path, capsys):
        empty = tmp_path / "empty"
        empty.mkdir()
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"seed": 1, "data_root": str(empty)}))
        code, _, err = invoke(
            ["ingest", "--run-dir", str(tmp_path / "r"), "--config", str(cfg)],
            capsys)
        assert code == 3
        assert "data error" in err


class TestRuntimeErrors:
    def test_locked_run_dir(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps(TINY_RUN_CONFIG))
        run_dir = tmp_path / "r"
        run_dir.mkdir()
        (run_dir / "config.json").write_text(json.dumps(TINY_RUN_CONFIG))
        (run_dir / ".lock").write_text("12345")
        code, _, err = invoke(["synth", "--run-dir", str(run_dir)], capsys)
        assert code == 4
        assert "locked" in err
        assert (run_dir / ".lock").exists()  # foreign lock left in place


class TestIngestCommand:
    def test_ingest_from_disk_cohort(self, synth_root, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"seed": 2, "data_root": str(synth_root)}))
        run_dir = tmp_path / "r"
        code, out, _ = invoke(
            ["ingest", "--run-dir", str(run_dir), "--config", str(cfg)], capsys)
        assert code == 0
        assert "ingest: done" in out
        assert (run_dir / "corpus" / "corpus.json").exists()


class TestChain:
    def test_rerun_is_up_to_date(self, chain_dir, capsys):
        for command in ("synth", "preprocess", "embed", "train-base",
                        "stack", "aggregate", "evaluate", "report"):
            code, out, _ = invoke([command, "--run-dir", str(chain_dir)], capsys)
            assert code == 0
            assert f"{command}: up to date" in out

    def test_evaluate_bootstrap_flag_reruns(self, chain_dir, capsys):
        argv = ["evaluate", "--run-dir", str(chain_dir), "--bootstrap", "10"]
        code, out, _ = invoke(argv, capsys)
        assert code == 0
        assert "evaluate: done" in out
        payload = json.loads(
            (chain_dir / "metrics" / "patient_disease_group.json").read_text())
        assert payload["bootstrap"]["n_replicates"] == 10
        # and back to the configured value
        code, out, _ = invoke(["evaluate", "--run-dir", str(chain_dir)], capsys)
        assert code == 0
        assert "evaluate: done" in out

    def test_evaluate_seed_flag_reruns(self, chain_dir, capsys):
        argv = ["evaluate", "--run-dir", str(chain_dir), "--seed", "777"]
        code, out, _ = invoke(argv, capsys)
        assert code == 0
        assert "evaluate: done" in out
        invoke(["evaluate", "--run-dir", str(chain_dir)], capsys)

    def test_report_writes_figures_and_tables(self, chain_dir):
        figures = chain_dir / "report" / "figures"
        tables = chain_dir / "report" / "tables"
        pngs = sorted(figures.glob("*.png"))
        assert len([p for p in pngs if p.name.startswith("confusion_")]) == 7
        assert len([p for p in pngs if p.name.startswith("roc_")]) == 7
        assert len([p for p in pngs if p.name.startswith("pr_")]) == 7
        assert any(p.name.startswith("clip_") for p in pngs)
        for png in pngs:
            assert png.read_bytes()[:4] == b"\x89PNG"
        assert (tables / "cohort.csv").exists()
        assert len(list(tables.glob("metrics_*.csv"))) == 7
        assert len(list(tables.glob("roc_points_*.csv"))) == 7
        assert len(list(tables.glob("pr_points_*.csv"))) == 7
        assert len(list(tables.glob("confusion_*.csv"))) == 7
        for stem in ("waveform", "mel", "probs"):
            assert list(tables.glob(f"clip_*_{stem}.csv"))

    def test_verbose_flag_accepted(self, chain_dir, capsys):
        code, out, _ = invoke(
            ["synth", "--run-dir", str(chain_dir), "--verbose"], capsys)
        assert code == 0
        assert "synth: up to date" in out
