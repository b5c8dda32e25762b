import json

import numpy as np
import pytest

from fmvr.cli import main
from fmvr.tensor_core import read_fmt1, write_fmt1
from conftest import assert_within_ulp


def run_cli(*argv):
    try:
        return main(list(argv))
    except SystemExit as exc:  # argparse usage failures
        return exc.code


@pytest.fixture
def feature_file(tmp_path):
    rng = np.random.default_rng(0)
    path = tmp_path / "features.fmt1"
    write_fmt1(rng.normal(size=(3, 12, 12)), path)
    return path


class TestGradcheckCommand:
    def test_default_passes(self, tmp_path):
        code = run_cli(
            "gradcheck", "--seeds", "3", "--e2e-cases", "2", "--out", str(tmp_path)
        )
        assert code == 0
        report = json.loads((tmp_path / "gradcheck.json").read_text())
        assert report["passed"] is True
        worst = max(report["restoration"]["max_relative_error"].values())
        assert worst < 1e-6

    def test_zero_tolerance_fails(self, tmp_path):
        code = run_cli(
            "gradcheck",
            "--seeds",
            "1",
            "--e2e-cases",
            "1",
            "--tolerance",
            "0",
            "--out",
            str(tmp_path),
        )
        assert code == 1

    def test_invalid_shape_is_usage_error(self):
        assert run_cli("gradcheck", "--shapes", "3x4") == 2
        assert run_cli("gradcheck", "--shapes", "axbxc") == 2


class TestDecomposeCommand:
    def test_round_trip_and_energy(self, tmp_path, feature_file):
        out = tmp_path / "parts"
        assert run_cli("decompose", str(feature_file), "--out", str(out)) == 0
        x = read_fmt1(feature_file)
        low_a = read_fmt1(out / "x_l_a.fmt1")
        high_a = read_fmt1(out / "x_h_a.fmt1")
        high_m = read_fmt1(out / "x_h_m.fmt1")
        low_m = read_fmt1(out / "x_l_m.fmt1")
        scale = np.maximum(np.abs(x), np.abs(low_a))
        assert_within_ulp(low_a + high_a, x, scale=scale)
        scale = np.maximum(np.abs(x), np.abs(high_m))
        assert_within_ulp(high_m + low_m, x, scale=scale)
        assert np.all(low_m <= 0)

        stats = json.loads((out / "stats.json").read_text())
        e = stats["energy"]
        lhs = e["x_l_a"] + e["x_h_a"] + 2 * stats["cross"]["avg_route"]
        assert lhs == pytest.approx(e["input"], rel=1e-12)

    def test_constant_input_gives_zero_components(self, tmp_path):
        src = tmp_path / "const.fmt1"
        write_fmt1(np.full((2, 4, 4), 1.25), src)
        out = tmp_path / "parts"
        assert run_cli("decompose", str(src), "--out", str(out)) == 0
        np.testing.assert_array_equal(read_fmt1(out / "x_h_a.fmt1"), np.zeros((2, 4, 4)))
        np.testing.assert_array_equal(read_fmt1(out / "x_l_m.fmt1"), np.zeros((2, 4, 4)))

    def test_missing_input_is_runtime_error(self, tmp_path):
        assert run_cli("decompose", str(tmp_path / "nope.fmt1"), "--out", str(tmp_path)) == 1

    def test_corrupt_input_is_runtime_error(self, tmp_path):
        bad = tmp_path / "bad.fmt1"
        bad.write_bytes(b"FMT1\x02\x00\x00\x00\x02\x00\x00\x00")
        assert run_cli("decompose", str(bad), "--out", str(tmp_path)) == 1


class TestPyramidCommand:
    def test_writes_levels_and_manifest(self, tmp_path, feature_file):
        out = tmp_path / "pyr"
        assert run_cli("pyramid", str(feature_file), "--out", str(out)) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["token_counts"] == [144, 36, 9, 1]
        for entry in manifest["files"]:
            tensor = read_fmt1(out / entry["file"])
            assert list(tensor.shape) == entry["shape"]

    def test_no_fmvr_skips_restored_files(self, tmp_path, feature_file):
        out = tmp_path / "pyr"
        assert run_cli("pyramid", str(feature_file), "--no-fmvr", "--out", str(out)) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert all(entry["role"] == "raw" for entry in manifest["files"])


class TestTrainEvalCommands:
    FAST = [
        "--num-classes", "4", "--channels", "2", "--base-side", "4",
        "--train-samples", "64", "--eval-samples", "32", "--steps", "25",
    ]

    def test_train_writes_artifacts_and_eval_matches(self, tmp_path):
        out = tmp_path / "run"
        assert run_cli("train", "--seed", "5", "--out", str(out), *self.FAST) == 0
        csv_lines = (out / "train_log.csv").read_text().splitlines()
        assert csv_lines[0] == "step,total_loss,loss_tokens_16,loss_tokens_4,loss_tokens_1"
        assert len(csv_lines) == 26
        summary = json.loads((out / "accuracies.json").read_text())
        assert summary["token_counts"] == [16, 4, 1]

        eval_out = tmp_path / "eval"
        assert run_cli(
            "eval", "--model", str(out / "model"), "--out", str(eval_out), "--json"
        ) == 0
        payload = json.loads((eval_out / "eval.json").read_text())
        assert payload["accuracy"] == summary["accuracy"]

    def test_train_is_bitwise_reproducible(self, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert run_cli("train", "--seed", "3", "--out", str(out), *self.FAST) == 0
            outs.append((out / "train_log.csv").read_bytes())
        assert outs[0] == outs[1]

    def test_config_file_toml_and_overrides(self, tmp_path):
        cfg = tmp_path / "run.toml"
        cfg.write_text(
            "num_classes = 4\nchannels = 2\nbase_side = 4\n"
            "train_samples = 64\neval_samples = 32\nsteps = 5\n"
        )
        out = tmp_path / "run"
        assert run_cli("train", "--config", str(cfg), "--seed", "1", "--out", str(out)) == 0
        summary = json.loads((out / "accuracies.json").read_text())
        assert summary["settings"]["steps"] == 5
        assert summary["settings"]["seed"] == 1

    def test_config_file_json(self, tmp_path):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({"num_classes": 4, "channels": 2, "base_side": 4,
                                   "train_samples": 64, "eval_samples": 32, "steps": 5}))
        out = tmp_path / "run"
        assert run_cli("train", "--config", str(cfg), "--out", str(out)) == 0

    def test_unknown_config_key_is_usage_error(self, tmp_path):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({"stepz": 5}))
        assert run_cli("train", "--config", str(cfg), "--out", str(tmp_path)) == 2

    def test_malformed_config_is_usage_error(self, tmp_path):
        cfg = tmp_path / "run.json"
        cfg.write_text("{not json")
        assert run_cli("train", "--config", str(cfg), "--out", str(tmp_path)) == 2


class TestFlopsCommand:
    def test_json_payload_and_files(self, tmp_path, capsys):
        assert run_cli("flops", "--out", str(tmp_path), "--json") == 0
        payload = json.loads(capsys.readouterr().out)
        by_tokens = {r["visual_tokens"]: r for r in payload["reports"]}
        assert by_tokens[576]["llm_tb"] == pytest.approx(8.0, rel=0.15)
        assert by_tokens[576]["llm_tb"] / by_tokens[36]["llm_tb"] == pytest.approx(
            8.9, rel=0.15
        )
        csv_lines = (tmp_path / "flops.csv").read_text().splitlines()
        assert len(csv_lines) == 6

    def test_custom_tokens_and_calibrate(self, tmp_path, capsys):
        assert run_cli("flops", "--tokens", "64,32", "--calibrate", "--json",
                       "--out", str(tmp_path)) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["calibration"]["fitted_text_tokens"] == 25
        assert [r["visual_tokens"] for r in payload["reports"]] == [64, 32]

    def test_bad_tokens_usage_error(self):
        assert run_cli("flops", "--tokens", "12,xyz") == 2


class TestAblateCommand:
    def test_tiny_ablation_artifacts(self, tmp_path):
        out = tmp_path / "ablate"
        code = run_cli(
            "ablate-sampling", "--seeds", "0,1", "--steps", "10",
            "--num-classes", "4", "--channels", "2", "--base-side", "4",
            "--train-samples", "32", "--eval-samples", "16", "--out", str(out),
        )
        assert code == 0
        payload = json.loads((out / "ablation.json").read_text())
        assert set(payload["mean_accuracy"]) == {
            "avg_pool", "max_pool", "sequential", "spatial"
        }
        csv_lines = (out / "ablation.csv").read_text().splitlines()
        assert csv_lines[0] == "tokens,avg_pool,max_pool,sequential,spatial"
        assert len(csv_lines) == 4  # header + one row per level

    def test_bad_seeds_usage_error(self):
        assert run_cli("ablate-sampling", "--seeds", "a,b") == 2
