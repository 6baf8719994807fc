from __future__ import annotations

import hashlib
import json
from pathlib import Path

import pytest

from remprop.cli import main

TINY_SPEC = {
    "n_indicators": 5,
    "nodes_per_indicator": 8,
    "n_scenes": 10,
    "n_ambiguous": 8,
    "n_invalid": 10,
    "n_test_scenes_het": 4,
}


@pytest.fixture()
def spec_file(tmp_path):
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(TINY_SPEC))
    return path


@pytest.fixture()
def data_dir(tmp_path, spec_file):
    out = tmp_path / "data"
    assert main(["generate", "--profile", "separable", "--spec", str(spec_file),
                 "--rng-seed", "3", "--out", str(out)]) == 0
    return out


def _stdout_json(capsys) -> dict:
    out = capsys.readouterr().out.strip().splitlines()
    return json.loads(out[-1])


class TestGenerate:
    def test_happy_path_writes_artifacts(self, data_dir, capsys):
        assert (data_dir / "manifest.json").is_file()
        assert (data_dir / "embeddings.bin").is_file()
        assert (data_dir / "run_manifest.json").is_file()

    def test_stdout_is_machine_readable(self, tmp_path, spec_file, capsys):
        out = tmp_path / "d2"
        assert main(["generate", "--spec", str(spec_file), "--out", str(out)]) == 0
        doc = _stdout_json(capsys)
        assert doc["command"] == "generate"
        assert doc["indicators"] == 5

    def test_bad_spec_field_is_validation_error(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"does_not_exist": 1}))
        assert main(["generate", "--spec", str(bad), "--out", str(tmp_path / "x")]) == 1


class TestPropagate:
    def test_happy_path(self, data_dir, tmp_path, capsys):
        out = tmp_path / "run1"
        code = main(["propagate", "--data", str(data_dir), "--method", "pga",
                     "--threshold", "0.75", "--out", str(out)])
        assert code == 0
        doc = _stdout_json(capsys)
        assert doc["converged"] is True
        result = json.loads((out / "result.json").read_text())
        assert result["config"]["threshold"] == 0.75
        assert (out / "convergence.png").stat().st_size > 0

    def test_bogus_method_exits_one_with_usage(self, capsys):
        assert main(["propagate", "--method", "bogus"]) == 1
        err = capsys.readouterr().err
        assert "usage:" in err
        assert "invalid choice" in err

    def test_unknown_command_exits_one(self, capsys):
        assert main(["transmogrify"]) == 1
        assert "usage:" in capsys.readouterr().err

    def test_missing_data_dir_is_io_error(self, tmp_path):
        assert main(["propagate", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 2

    def test_config_file_merges_flags_win(self, data_dir, tmp_path):
        cfg = tmp_path / "prop.json"
        cfg.write_text(json.dumps({"threshold": 0.9, "update_mode": "batch"}))
        out = tmp_path / "run2"
        assert main(["propagate", "--data", str(data_dir), "--config", str(cfg),
                     "--threshold", "0.7", "--out", str(out)]) == 0
        result = json.loads((out / "result.json").read_text())
        assert result["config"]["threshold"] == 0.7          # flag wins
        assert result["config"]["update_mode"] == "batch"    # file survives

    def test_config_file_unknown_key_rejected(self, data_dir, tmp_path):
        cfg = tmp_path / "prop.json"
        cfg.write_text(json.dumps({"thresold": 0.9}))
        assert main(["propagate", "--data", str(data_dir), "--config", str(cfg),
                     "--out", str(tmp_path / "o")]) == 1

    def test_direct_method_emits_empty_trail(self, data_dir, tmp_path):
        out = tmp_path / "run3"
        assert main(["propagate", "--data", str(data_dir), "--method", "direct",
                     "--out", str(out)]) == 0
        result = json.loads((out / "result.json").read_text())
        assert result["passes"] == []
        assert result["iterations_used"] == 0


class TestEvaluate:
    def test_happy_path_writes_reports_and_figure(self, data_dir, tmp_path, capsys):
        out = tmp_path / "eval1"
        assert main(["evaluate", "--data", str(data_dir), "--method", "pga",
                     "--out", str(out)]) == 0
        doc = _stdout_json(capsys)
        assert "overall_iou50" in doc
        assert (out / "eval_overall.json").is_file()
        assert (out / "eval_overall.csv").is_file()
        assert (out / "eval_heterogeneous.json").is_file()
        assert (out / "eval_summary.png").stat().st_size > 0

    def test_inputs_never_mutated(self, data_dir, tmp_path):
        digests = {p.name: hashlib.sha256(p.read_bytes()).hexdigest()
                   for p in data_dir.iterdir()}
        assert main(["evaluate", "--data", str(data_dir), "--out", str(tmp_path / "e")]) == 0
        after = {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in data_dir.iterdir()}
        assert digests == after


class TestAblate:
    def test_csv_and_runs_written(self, data_dir, tmp_path, capsys):
        out = tmp_path / "abl"
        assert main(["ablate", "--data", str(data_dir), "--sizes", "0,5,10",
                     "--trials", "2", "--out", str(out)]) == 0
        csv_text = (out / "ablation.csv").read_text().strip().splitlines()
        assert csv_text[0] == "size,trial,iou50,iou80,labeled_count"
        assert len(csv_text) == 1 + 6 + 3  # header + rows + per-size means
        assert (out / "ablation.png").stat().st_size > 0
        assert (out / "runs" / "eval_size0_trial1_pga.json").is_file()

    def test_bad_sizes_rejected(self, data_dir, tmp_path):
        assert main(["ablate", "--data", str(data_dir), "--sizes", "0,999",
                     "--out", str(tmp_path / "a")]) == 1
        assert main(["ablate", "--data", str(data_dir), "--sizes", "abc",
                     "--out", str(tmp_path / "b")]) == 1


class TestNoiseReport:
    def test_compares_methods(self, data_dir, tmp_path, capsys):
        out = tmp_path / "nr"
        assert main(["noise-report", "--data", str(data_dir),
                     "--methods", "pga,passive", "--out", str(out)]) == 0
        doc = _stdout_json(capsys)
        assert set(doc["methods"]) == {"pga", "passive"}
        saved = json.loads((out / "noise_report.json").read_text())
        assert saved["pga"]["ambiguous_total"] == 8
        assert (out / "noise_report.png").stat().st_size > 0

    def test_non_propagating_method_rejected(self, data_dir, tmp_path):
        assert main(["noise-report", "--data", str(data_dir),
                     "--methods", "direct", "--out", str(tmp_path / "n")]) == 1


class TestOracleCheck:
    def test_small_run_passes(self, tmp_path, capsys):
        out = tmp_path / "oc"
        assert main(["oracle-check", "--instances", "10", "--out", str(out)]) == 0
        doc = json.loads((out / "oracle_check.json").read_text())
        assert doc["ok"] is True
        assert doc["instances"] == 10


class TestRunManifest:
    def test_reproducible_from_recorded_argv(self, data_dir, tmp_path):
        out1 = tmp_path / "r1"
        assert main(["evaluate", "--data", str(data_dir), "--method", "passive",
                     "--out", str(out1)]) == 0
        manifest = json.loads((out1 / "run_manifest.json").read_text())
        argv = [a.replace(str(out1), str(tmp_path / "r2")) for a in manifest["argv"]]
        assert main(argv) == 0
        for rel in manifest["outputs"]:
            first = (out1 / rel).read_bytes()
            second = (tmp_path / "r2" / rel).read_bytes()
            assert first == second, f"artifact {rel} differs between identical runs"

    def test_records_inputs_and_version(self, data_dir, tmp_path):
        out = tmp_path / "r3"
        assert main(["propagate", "--data", str(data_dir), "--out", str(out)]) == 0
        doc = json.loads((out / "run_manifest.json").read_text())
        assert doc["tool"] == "remprop"
        assert any(p.endswith("manifest.json") for p in doc["inputs"])
        assert any(p.endswith("embeddings.bin") for p in doc["inputs"])
        assert doc["config"]["propagation"]["threshold"] == 0.75
