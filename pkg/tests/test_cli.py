import json
import subprocess
import sys

import pytest

from lpkd.cli import main
from lpkd.config import parse_config
from lpkd.trainer import RunRecord, read_embeddings

BLOBS = ["--set", "dataset=blobs", "--set", "teacher_arch=mlp-32",
         "--set", "student_arch=mlp-8-3", "--set", "blobs_dim=8", "--m", "32"]


@pytest.fixture(scope="module")
def teacher_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("teacher")
    assert main(["train-teacher", "--out", str(out), "--epochs", "4", *BLOBS]) == 0
    return out


def test_train_teacher_artifacts(teacher_dir):
    for name in ("teacher.ckpt", "run.jsonl", "config.resolved", "curves.png"):
        assert (teacher_dir / name).exists()
    rec = RunRecord.read_jsonl(teacher_dir / "run.jsonl")
    assert len(rec.epochs) == 4 and "test_acc" in rec.summary
    assert parse_config(teacher_dir / "config.resolved")["dataset"] == "blobs"


def _student(tmp_path, teacher_dir, *extra):
    return main(["train-student", "--out", str(tmp_path), "--epochs", "3",
                 "--teacher-ckpt", str(teacher_dir / "teacher.ckpt"), *BLOBS, *extra])


def test_train_student_operating_point(tmp_path, teacher_dir):
    code = _student(tmp_path, teacher_dir, "--strategy", "lp", "--k", "5", "--gamma", "1",
                    "--lambda", "2", "--tau", "0.5")
    assert code == 0
    cfg = parse_config(tmp_path / "config.resolved")
    assert (cfg["k"], cfg["gamma"], cfg["lambda"], cfg["tau"]) == (5, 1.0, 2.0, 0.5)
    assert (tmp_path / "student.ckpt").exists()
    assert RunRecord.read_jsonl(tmp_path / "run.jsonl").summary["adapter_params"] == 0


def test_fitnet_writes_adapter(tmp_path, teacher_dir):
    assert _student(tmp_path, teacher_dir, "--strategy", "fitnet") == 0
    assert (tmp_path / "adapter.npz").exists()


def test_resolved_snapshot_reproduces_run(tmp_path, teacher_dir):
    a, b = tmp_path / "a", tmp_path / "b"
    assert _student(a, teacher_dir, "--seed", "3") == 0
    assert main(["train-student", "--out", str(b), "--config", str(a / "config.resolved")]) == 0
    ra = RunRecord.read_jsonl(a / "run.jsonl")
    rb = RunRecord.read_jsonl(b / "run.jsonl")
    assert ra.step_losses == rb.step_losses
    assert (a / "student.ckpt").read_bytes() == (b / "student.ckpt").read_bytes()


def test_eval_and_export(tmp_path, teacher_dir):
    ckpt = str(teacher_dir / "teacher.ckpt")
    assert main(["eval", "--out", str(tmp_path), "--ckpt", ckpt, *BLOBS]) == 0
    result = json.loads((tmp_path / "eval.json").read_text())
    assert 0 <= result["accuracy"] <= 1 and len(result["per_class"]) == 4
    assert main(["export-embeddings", "--out", str(tmp_path), "--ckpt", ckpt, *BLOBS]) == 0
    ids, labels, feats = read_embeddings(tmp_path / "embeddings.csv")
    assert feats.shape == (160, 32)
    assert (tmp_path / "embeddings.png").exists()
    assert "one_nn_accuracy" in json.loads((tmp_path / "embeddings.json").read_text())


def test_sweep(tmp_path, teacher_dir):
    code = main(["sweep", "--out", str(tmp_path), "--epochs", "1", "--ks", "1,3",
                 "--gammas", "0,1", "--teacher-ckpt", str(teacher_dir / "teacher.ckpt"), *BLOBS])
    assert code == 0
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert lines[0] == "k,gamma,val_acc,final_loss" and len(lines) == 5
    assert (tmp_path / "sweep.png").exists()


def test_bench_reports_ratio(tmp_path, capsys):
    assert main(["bench", "--out", str(tmp_path), "--m", "128", "--dS", "5120", "--dT", "6912",
                 "--no-measure"]) == 0
    assert "22.98" in capsys.readouterr().out
    data = json.loads((tmp_path / "bench.json").read_text())
    assert round(data["ratio"]) == 23 and data["overhead"]["lp"] == 0
    assert main(["bench", "--out", str(tmp_path), "--m", "16", "--dS", "32", "--dT", "48",
                 "--scaling"]) == 0
    assert (tmp_path / "bench_scaling.png").exists()


def test_gradcheck_command(tmp_path):
    assert main(["gradcheck", "--out", str(tmp_path), "--instances", "1"]) == 0
    data = json.loads((tmp_path / "gradcheck.json").read_text())
    assert data["failures"] == {} and data["max_error"] <= 1e-3
    # an impossible tolerance must fail
    assert main(["gradcheck", "--out", str(tmp_path), "--instances", "1",
                 "--tolerance", "1e-30"]) == 2


def test_config_errors_exit_1(tmp_path, capsys):
    assert main(["train-teacher", "--out", str(tmp_path), "--tau", "0"]) == 1
    assert "tau" in capsys.readouterr().err
    assert main(["train-teacher", "--out", str(tmp_path), "--set", "colour=red"]) == 1
    assert "colour" in capsys.readouterr().err
    assert main(["train-student", "--out", str(tmp_path), *BLOBS]) == 1
    assert "teacher_ckpt" in capsys.readouterr().err
    assert main(["train-teacher", "--out", str(tmp_path), "--config",
                 str(tmp_path / "missing.cfg")]) == 1
    assert main(["no-such-command"]) == 1
    assert main(["train-teacher", "--k", "many"]) == 1


def test_runtime_errors_exit_2(tmp_path, capsys):
    code = main(["train-student", "--out", str(tmp_path), *BLOBS,
                 "--teacher-ckpt", str(tmp_path / "gone.ckpt")])
    assert code == 2
    assert "gone.ckpt" in capsys.readouterr().err
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"nope")
    assert main(["eval", "--out", str(tmp_path), "--ckpt", str(bad), *BLOBS]) == 2
    assert main(["train-teacher", "--out", str(tmp_path / "m"),
                 "--mnist-dir", str(tmp_path / "nodata")]) == 2


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "lpkd.cli", "bench", "--no-measure",
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0 and "analytic ratio" in proc.stdout
