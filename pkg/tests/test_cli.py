import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from kneeoa.cli import main


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture(scope="module")
def unsplit_csv(tmp_path_factory):
    import csv

    path = tmp_path_factory.mktemp("csv") / "manifest.csv"
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["image_path", "kl_grade", "subject_id"])
        for g in range(5):
            for i in range(10):
                w.writerow([f"img_g{g}_{i}.png", g, f"s{g}{i}"])
    return path


class TestSplit:
    def test_writes_populated_csv(self, runner, unsplit_csv, tmp_path):
        out = tmp_path / "split.csv"
        result = runner.invoke(main, ["split", "--manifest", str(unsplit_csv),
                                      "--seed", "3", "--out", str(out)])
        assert result.exit_code == 0, result.output
        lines = out.read_text().splitlines()
        assert lines[0] == "image_path,kl_grade,subject_id,split"
        splits = [l.rsplit(",", 1)[1] for l in lines[1:]]
        assert set(splits) == {"train", "val", "test"}

    def test_missing_manifest_fails(self, runner, tmp_path):
        result = runner.invoke(main, ["split", "--manifest", str(tmp_path / "no.csv"),
                                      "--out", str(tmp_path / "o.csv")])
        assert result.exit_code != 0
        assert "not found" in result.output

    def test_rerun_byte_identical(self, runner, unsplit_csv, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        for out in (a, b):
            result = runner.invoke(main, ["split", "--manifest", str(unsplit_csv),
                                          "--seed", "7", "--out", str(out)])
            assert result.exit_code == 0
        assert a.read_bytes() == b.read_bytes()

    def test_bad_ratios(self, runner, unsplit_csv, tmp_path):
        result = runner.invoke(main, ["split", "--manifest", str(unsplit_csv),
                                      "--ratios", "1:2", "--out", str(tmp_path / "o.csv")])
        assert result.exit_code != 0


class TestTrain:
    def test_run_dir_layout(self, runner, mini_splits, tmp_path):
        out = tmp_path / "runs"
        result = runner.invoke(main, [
            "train", "--manifest", str(mini_splits["csv"]), "--backbone", "tiny",
            "--seeds", "0", "--epochs", "2", "--out", str(out),
        ])
        assert result.exit_code == 0, result.output
        run_dir = out / "exp1_uniform" / "tiny" / "0"
        assert (run_dir / "checkpoint.pt").exists()
        assert (run_dir / "history.csv").exists()
        assert (run_dir / "metrics.json").exists()
        assert (out / "exp1_uniform" / "tiny" / "aggregate.json").exists()
        assert (out / "exp1_uniform" / "config.toml").exists()

    def test_multi_seed_aggregate(self, runner, mini_splits, tmp_path):
        out = tmp_path / "runs"
        result = runner.invoke(main, [
            "train", "--manifest", str(mini_splits["csv"]), "--backbone", "tiny",
            "--seeds", "0,1,2", "--epochs", "1", "--out", str(out),
        ])
        assert result.exit_code == 0, result.output
        agg = json.loads((out / "exp1_uniform" / "tiny" / "aggregate.json").read_text())
        assert agg["n_runs"] == 3
        assert "mean_accuracy" in agg and "std_accuracy" in agg

    def test_weighted_sampling_switches_experiment(self, runner, mini_splits, tmp_path):
        out = tmp_path / "runs"
        result = runner.invoke(main, [
            "train", "--manifest", str(mini_splits["csv"]), "--backbone", "tiny",
            "--seeds", "0", "--epochs", "1", "--sampling", "inverse_frequency",
            "--out", str(out),
        ])
        assert result.exit_code == 0, result.output
        assert (out / "exp2_weighted" / "tiny" / "0" / "metrics.json").exists()

    def test_unknown_backbone_rejected_before_training(self, runner, mini_splits, tmp_path):
        out = tmp_path / "runs"
        result = runner.invoke(main, [
            "train", "--manifest", str(mini_splits["csv"]), "--backbone", "resnet99",
            "--seeds", "0", "--epochs", "1", "--out", str(out),
        ])
        assert result.exit_code != 0
        assert "resnet99" in result.output
        assert not out.exists()

    def test_config_file_with_flag_override(self, runner, mini_splits, tmp_path):
        cfg = tmp_path / "cfg.toml"
        cfg.write_text(
            f'manifest = "{mini_splits["csv"]}"\n'
            f'out = "{tmp_path / "runs"}"\n'
            'backbones = ["tiny"]\n'
            "seeds = [0]\n\n"
            "[train]\n"
            "epochs = 5\n"
            "[train.augmentation]\n"
            "hflip_prob = 0.0\n"
        )
        result = runner.invoke(main, ["train", "--config", str(cfg), "--epochs", "1"])
        assert result.exit_code == 0, result.output
        history = (tmp_path / "runs" / "exp1_uniform" / "tiny" / "0" / "history.csv").read_text()
        assert len(history.splitlines()) == 2  # header + 1 epoch: flag wins


@pytest.fixture(scope="module")
def member_run_dirs(tmp_path_factory, mini_splits):
    runner = CliRunner()
    out = tmp_path_factory.mktemp("members")
    result = runner.invoke(main, [
        "train", "--manifest", str(mini_splits["csv"]), "--backbone", "tiny",
        "--seeds", "0,1", "--epochs", "2", "--out", str(out),
    ])
    assert result.exit_code == 0, result.output
    base = out / "exp1_uniform" / "tiny"
    return [base / "0", base / "1"]


class TestEnsembleCmd:
    def test_vote(self, runner, mini_splits, member_run_dirs, tmp_path):
        out = tmp_path / "vote"
        result = runner.invoke(main, [
            "ensemble", "--run-dir", str(member_run_dirs[0]),
            "--run-dir", str(member_run_dirs[1]), "--strategy", "vote",
            "--manifest", str(mini_splits["csv"]), "--out", str(out),
        ])
        assert result.exit_code == 0, result.output
        payload = json.loads((out / "metrics.json").read_text())
        assert 0.0 <= payload["accuracy"] <= 1.0
        assert len(payload["f1"]) == 5
        manifest = json.loads((out / "ensemble.json").read_text())
        assert manifest["strategy"] == "vote"
        assert len(manifest["members"]) == 2

    def test_stack(self, runner, mini_splits, member_run_dirs, tmp_path):
        out = tmp_path / "stack"
        result = runner.invoke(main, [
            "ensemble", "--run-dir", str(member_run_dirs[0]),
            "--run-dir", str(member_run_dirs[1]), "--strategy", "stack",
            "--manifest", str(mini_splits["csv"]), "--seeds", "0,1,2",
            "--epochs", "5", "--out", str(out),
        ])
        assert result.exit_code == 0, result.output
        agg = json.loads((out / "aggregate.json").read_text())
        assert agg["n_runs"] == 3
        assert (out / "0" / "stacker.pt").exists()

    def test_split_mismatch_refused(self, runner, marker_splits, member_run_dirs, tmp_path):
        # members were evaluated on the mini test split, not the marker one
        out = tmp_path / "bad"
        result = runner.invoke(main, [
            "ensemble", "--run-dir", str(member_run_dirs[0]), "--strategy", "vote",
            "--manifest", str(marker_splits["csv"]), "--out", str(out),
        ])
        assert result.exit_code != 0
        assert "different test split" in result.output


class TestExplainCmd:
    def test_overlay_written(self, runner, mini_splits, member_run_dirs, tmp_path):
        out = tmp_path / "cams"
        image = mini_splits["test"].records[0].image_path
        ckpt = member_run_dirs[0] / "checkpoint.pt"
        result = runner.invoke(main, [
            "explain", "--checkpoint", str(ckpt), "--image", image,
            "--target-class", "0", "--n-samples", "2", "--sigma", "0.05",
            "--out", str(out),
        ])
        assert result.exit_code == 0, result.output
        stem = Path(image).stem
        assert (out / f"{stem}_cam_0.png").exists()

    def test_predicted_class_default_and_csv(self, runner, mini_splits, member_run_dirs, tmp_path):
        out = tmp_path / "cams"
        image = mini_splits["test"].records[1].image_path
        ckpt = member_run_dirs[0] / "checkpoint.pt"
        result = runner.invoke(main, [
            "explain", "--checkpoint", str(ckpt), "--image", image,
            "--n-samples", "1", "--sigma", "0", "--save-csv", "--out", str(out),
        ])
        assert result.exit_code == 0, result.output
        pngs = list(out.glob("*_cam_*.png"))
        csvs = list(out.glob("*_cam_*.csv"))
        assert len(pngs) == 1 and len(csvs) == 1
        sal = np.loadtxt(csvs[0], delimiter=",")
        assert sal.shape == (224, 224)

    def test_bad_target_layer_lists_layers(self, runner, mini_splits, member_run_dirs, tmp_path):
        image = mini_splits["test"].records[0].image_path
        ckpt = member_run_dirs[0] / "checkpoint.pt"
        result = runner.invoke(main, [
            "explain", "--checkpoint", str(ckpt), "--image", image,
            "--target-layer", "bogus", "--out", str(tmp_path / "cams"),
        ])
        assert result.exit_code != 0
        assert "features" in result.output


class TestReport:
    def test_table_sorted_by_accuracy(self, runner, member_run_dirs, tmp_path):
        out_csv = tmp_path / "report.csv"
        result = runner.invoke(main, [
            "report", str(member_run_dirs[0]), str(member_run_dirs[1]),
            "--out-csv", str(out_csv),
        ])
        assert result.exit_code == 0, result.output
        assert "accuracy" in result.output
        rows = out_csv.read_text().splitlines()
        assert len(rows) == 3

    def test_aggregate_mean_std_format(self, runner, member_run_dirs, tmp_path):
        agg_dir = member_run_dirs[0].parent  # holds aggregate.json
        result = runner.invoke(main, ["report", str(agg_dir)])
        assert result.exit_code == 0, result.output
        assert "±" in result.output

    def test_empty_usage_error(self, runner):
        result = runner.invoke(main, ["report"])
        assert result.exit_code != 0
