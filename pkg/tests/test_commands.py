"""
命令行端到端测试：gen-data → train → eval / infer / report，以及退出码
"""
import json

import numpy as np
import pytest

from adaptparse import config
from adaptparse.engine.tensor_io import tensor_read, tensor_write
from adaptparse.commands.report import HEADER, summarize_by_mode
from adaptparse.main import main
from adaptparse.services.dataset_service import load_dataset, read_manifest


def path_args(root):
    return [
        "--paths.source_dir", str(root / "data" / "source"),
        "--paths.target_dir", str(root / "data" / "target_train"),
        "--paths.test_dir", str(root / "data" / "target_test"),
    ]


COUNTS = ["--n_source", "6", "--n_target_train", "6", "--n_target_test", "4"]
TRAIN = [
    "--iterations", "4", "--k_c", "2", "--batch_size", "2", "--eval_interval", "2",
    "--checkpoint_interval", "2", "--log_interval", "0", "--seed", "3",
]


@pytest.fixture(autouse=True)
def no_seed_env(monkeypatch):
    monkeypatch.delenv(config.SEED_ENV_VAR, raising=False)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """生成数据并训练两个运行（adapt / source_only）"""
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data"] + path_args(root) + COUNTS) == 0
    for mode in ("adapt", "source_only"):
        run_dir = root / "runs" / mode
        code = main(["train"] + path_args(root) + TRAIN + ["--mode", mode, "--paths.run_dir", str(run_dir)])
        assert code == 0
    return root


def final_checkpoint(root, mode="adapt"):
    return root / "runs" / mode / config.CHECKPOINT_DIR / config.FINAL_CHECKPOINT_NAME


class TestGenData:

    def test_counts_and_withheld_labels(self, workspace):
        data = workspace / "data"
        assert len(load_dataset(data / "source")) == 6
        assert len(load_dataset(data / "target_test")) == 4
        rows = read_manifest(data / "target_train")
        assert len(rows) == 6 and all(row[2] == "" for row in rows)
        assert len(list((data / "target_train" / config.HELDOUT_DIR).iterdir())) == 6

    def test_disjoint_scene_ids(self, workspace):
        data = workspace / "data"
        ids = [set(load_dataset(data / name).ids) for name in ("source", "target_test")]
        ids.append({row[0] for row in read_manifest(data / "target_train")})
        assert not (ids[0] & ids[1]) and not (ids[0] & ids[2]) and not (ids[1] & ids[2])

    def test_refuses_non_empty_without_force(self, workspace):
        assert main(["gen-data"] + path_args(workspace) + COUNTS) == 1

    def test_rerun_is_identical(self, tmp_path):
        args = ["gen-data"] + path_args(tmp_path) + ["--n_source", "2", "--n_target_train", "2", "--n_target_test", "2"]
        assert main(args) == 0
        first = (tmp_path / "data" / "source" / "images" / "00001.tsr").read_bytes()
        assert main(args + ["--force"]) == 0
        assert (tmp_path / "data" / "source" / "images" / "00001.tsr").read_bytes() == first


class TestTrain:

    def test_run_outputs(self, workspace):
        run_dir = workspace / "runs" / "adapt"
        assert final_checkpoint(workspace).exists()
        assert (run_dir / config.CHECKPOINT_DIR / "iter_000002.ckpt").exists()
        manifest = json.loads((run_dir / config.RUN_MANIFEST_NAME).read_text())
        assert [h["iter"] for h in manifest["metric_history"]] == [2, 4]
        assert manifest["config"]["train"]["mode"] == "adapt"
        lines = (run_dir / config.METRICS_CSV_NAME).read_text().splitlines()
        assert len(lines) == 3

    def test_audit_counts(self, workspace):
        lines = (workspace / "runs" / "adapt" / config.AUDIT_LOG_NAME).read_text().splitlines()
        steps = [line.split()[1] for line in lines]
        assert steps.count("step=P1") == 4 and steps.count("step=EQ4") == 2

    def test_identical_reruns(self, workspace, tmp_path):
        """同一配置与 seed 的两次训练：checkpoint 与指标 CSV 按位相同"""
        for name in ("a", "b"):
            args = ["train"] + path_args(workspace) + TRAIN + ["--paths.run_dir", str(tmp_path / name)]
            assert main(args) == 0
        for rel in (f"{config.CHECKPOINT_DIR}/{config.FINAL_CHECKPOINT_NAME}", config.METRICS_CSV_NAME):
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_resume(self, workspace, tmp_path):
        run_dir = tmp_path / "resumed"
        args = ["train"] + path_args(workspace) + TRAIN + ["--paths.run_dir", str(run_dir)]
        start = workspace / "runs" / "adapt" / config.CHECKPOINT_DIR / "iter_000002.ckpt"
        assert main(args + ["--resume", str(start)]) == 0
        rel = f"{config.CHECKPOINT_DIR}/{config.FINAL_CHECKPOINT_NAME}"
        assert (run_dir / rel).read_bytes() == final_checkpoint(workspace).read_bytes()

    def test_invalid_override(self, workspace, tmp_path):
        args = ["train"] + path_args(workspace) + ["--paths.run_dir", str(tmp_path / "x"), "--k_c", "0"]
        assert main(args) == 1

    def test_missing_data(self, tmp_path):
        assert main(["train"] + path_args(tmp_path) + ["--paths.run_dir", str(tmp_path / "r")]) == 3


class TestEvalAndInfer:

    def test_eval_writes_reports(self, workspace, tmp_path, capsys):
        code = main([
            "eval", "--checkpoint", str(final_checkpoint(workspace)),
            "--data", str(workspace / "data" / "target_test"), "--out", str(tmp_path / "report"),
        ])
        assert code == 0
        doc = json.loads((tmp_path / "report" / "report.json").read_text())
        assert len(doc) == 5 + 4
        assert 0.0 <= doc["avg_f1"] <= 1.0
        assert json.loads(capsys.readouterr().out) == doc
        assert (tmp_path / "report" / "report.csv").read_text().splitlines()[0] == ",".join(config.METRIC_CSV_HEADER)

    def test_eval_matches_last_training_eval(self, workspace, tmp_path):
        main([
            "eval", "--checkpoint", str(final_checkpoint(workspace)),
            "--data", str(workspace / "data" / "target_test"), "--out", str(tmp_path),
        ])
        doc = json.loads((tmp_path / "report.json").read_text())
        manifest = json.loads((workspace / "runs" / "adapt" / config.RUN_MANIFEST_NAME).read_text())
        assert doc == manifest["metric_history"][-1]["metrics"]

    def test_eval_unlabeled_rejected(self, workspace):
        code = main([
            "eval", "--checkpoint", str(final_checkpoint(workspace)),
            "--data", str(workspace / "data" / "target_train"),
        ])
        assert code == 1

    def test_infer_with_purity(self, workspace, tmp_path):
        image = load_dataset(workspace / "data" / "target_test").images[0]
        tensor_write(image, tmp_path / "image.tsr")
        code = main([
            "infer", "--checkpoint", str(final_checkpoint(workspace)), "--image", str(tmp_path / "image.tsr"),
            "--out", str(tmp_path / "labels.tsr"), "--vis", str(tmp_path / "labels.bmp"), "--assert-purity",
        ])
        assert code == 0
        labels = tensor_read(tmp_path / "labels.tsr").data
        assert labels.dtype == np.uint8 and labels.shape == (49, 25)
        assert labels.max() < 4
        assert (tmp_path / "labels.bmp").read_bytes()[:2] == b"BM"

    def test_repeated_eval_identical(self, workspace, tmp_path):
        for name in ("a", "b"):
            assert main([
                "eval", "--checkpoint", str(final_checkpoint(workspace)),
                "--data", str(workspace / "data" / "target_test"), "--out", str(tmp_path / name),
            ]) == 0
        for rel in ("report.json", "report.csv"):
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_repeated_infer_identical(self, workspace, tmp_path):
        tensor_write(load_dataset(workspace / "data" / "target_test").images[1], tmp_path / "image.tsr")
        for name in ("a", "b"):
            assert main([
                "infer", "--checkpoint", str(final_checkpoint(workspace)), "--image", str(tmp_path / "image.tsr"),
                "--out", str(tmp_path / f"{name}.tsr"), "--vis", str(tmp_path / f"{name}.bmp"),
            ]) == 0
        assert (tmp_path / "a.tsr").read_bytes() == (tmp_path / "b.tsr").read_bytes()
        assert (tmp_path / "a.bmp").read_bytes() == (tmp_path / "b.bmp").read_bytes()

    def test_infer_wrong_dims(self, workspace, tmp_path):
        tensor_write(np.zeros((3, 48, 25), np.float32), tmp_path / "image.tsr")
        code = main([
            "infer", "--checkpoint", str(final_checkpoint(workspace)),
            "--image", str(tmp_path / "image.tsr"), "--out", str(tmp_path / "labels.tsr"),
        ])
        assert code == 1

    def test_missing_checkpoint(self, tmp_path):
        code = main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--data", str(tmp_path)])
        assert code == 3

    def test_corrupt_checkpoint(self, workspace, tmp_path):
        data = final_checkpoint(workspace).read_bytes()
        (tmp_path / "bad.ckpt").write_bytes(data[:100])
        code = main(["eval", "--checkpoint", str(tmp_path / "bad.ckpt"), "--data", str(workspace / "data" / "target_test")])
        assert code == 3

    def test_extra_args_rejected(self, workspace):
        code = main([
            "eval", "--checkpoint", str(final_checkpoint(workspace)),
            "--data", str(workspace / "data" / "target_test"), "--iterations", "3",
        ])
        assert code == 1


class TestReport:

    def test_compare_runs(self, workspace, tmp_path, capsys):
        runs = [str(workspace / "runs" / m) for m in ("adapt", "source_only")]
        assert main(["report"] + runs + ["--out", str(tmp_path / "cmp.csv")]) == 0
        out = capsys.readouterr().out
        assert "source_only" in out and "avg_f1" in out
        rows = (tmp_path / "cmp.csv").read_text().splitlines()
        assert rows[0].startswith("run,mode,seed,iter")
        assert len(rows) == 3

    def test_mode_summary_printed(self, workspace, capsys):
        runs = [str(workspace / "runs" / m) for m in ("adapt", "source_only")]
        assert main(["report"] + runs) == 0
        out = capsys.readouterr().out
        assert "median_avg_f1" in out and "vs_source_only" in out

    def test_summarize_by_mode(self):
        def row(mode, seed, f1):
            return [f"runs/{mode}_{seed}", mode, str(seed), "600"] + ["0.5"] * 4 + [f1]
        rows = [
            row("adapt", 0, "0.6000"), row("adapt", 1, "0.7000"), row("adapt", 2, "0.6500"),
            row("source_only", 0, "0.5000"), row("source_only", 1, "0.6000"), row("source_only", 2, "0.5500"),
            row("feat_adapt", 0, ""),
        ]
        assert len(rows[0]) == len(HEADER)
        summary = summarize_by_mode(rows)
        assert [s[0] for s in summary] == ["source_only", "feat_adapt", "adapt"]
        assert summary[0] == ["source_only", "3", "0.5500", "+0.0000"]
        assert summary[1] == ["feat_adapt", "1", "", ""]
        assert summary[2] == ["adapt", "3", "0.6500", "+0.1000"]

    def test_summary_without_baseline(self):
        rows = [["r", "adapt", "0", "4", "", "", "", "", "0.4000"]]
        assert summarize_by_mode(rows) == [["adapt", "1", "0.4000", ""]]

    def test_missing_run(self, tmp_path):
        assert main(["report", str(tmp_path)]) == 3


class TestGradcheckCommand:

    def test_passes(self, capsys):
        assert main(["gradcheck", "--min-coords", "3"]) == 0
        assert "[A_l]" in capsys.readouterr().out

    def test_injected_fault_exit_code(self):
        assert main(["gradcheck", "--min-coords", "3", "--inject-fault"]) == 2


class TestUsageErrors:
    """argparse 的用法错误走退出码 1"""

    def test_missing_option_value(self):
        assert main(["train", "--resume"]) == 1

    def test_unknown_command(self):
        assert main(["bogus"]) == 1

    def test_no_command(self):
        assert main([]) == 1

    def test_missing_required_option(self):
        assert main(["infer", "--image", "x.tsr"]) == 1
