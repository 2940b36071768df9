import csv

import pytest

from mhgd.cli import main
from mhgd.training import read_meta

from conftest import TINY_CONFIG


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.ini"
    cfg.write_text(TINY_CONFIG)
    out = root / "run"
    assert main(["run", "--config", str(cfg), "--out-dir", str(out)]) == 0
    return cfg, out


def test_run_writes_the_artifact_manifest(tiny_run):
    _, out = tiny_run
    for seed in (0, 1):
        base = out / f"seed_{seed}"
        assert (base / "teacher" / "teacher.ckpt").exists()
        assert (base / "mhan" / "mhan.ckpt").exists()
        for method in ("student", "mhgd"):
            assert (base / f"student_{method}" / "student.ckpt").exists()
            assert (base / f"student_{method}" / "metrics.csv").exists()
    with open(out / "summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["method"] for r in rows] == ["student", "mhgd"]
    assert all(r["runs"] == "2" for r in rows)


def test_every_artifact_carries_the_config_hash(tiny_run):
    _, out = tiny_run
    hashes = {read_meta(p)["config_hash"] for p in out.rglob("meta.txt")}
    assert len(hashes) == 1
    (h,) = hashes
    assert (out / "config.ini").read_text().startswith(f"# config_hash = {h}")
    assert h in (out / "summary.txt").read_text()


def test_rerun_reuses_artifacts(tiny_run, capsys):
    cfg, out = tiny_run
    ckpt = out / "seed_0" / "student_mhgd" / "student.ckpt"
    before = ckpt.read_bytes(), ckpt.stat().st_mtime_ns
    assert main(["run", "--config", str(cfg), "--out-dir", str(out)]) == 0
    assert (ckpt.read_bytes(), ckpt.stat().st_mtime_ns) == before
    assert "test_accuracy_mean" in capsys.readouterr().out


def test_other_config_in_same_directory_is_refused(tiny_run, tmp_path, capsys):
    _, out = tiny_run
    other = tmp_path / "other.ini"
    other.write_text(TINY_CONFIG.replace("heads = 2", "heads = 3"))
    assert main(["run", "--config", str(other), "--out-dir", str(out)]) == 2
    assert "another config" in capsys.readouterr().err


def test_report_from_run_directory(tiny_run, tmp_path, capsys):
    _, out = tiny_run
    assert main(["report", str(out), "--out-dir", str(tmp_path)]) == 0
    for name in ("report.txt", "report.csv", "report_accuracy.svg"):
        assert (tmp_path / name).exists()
    with open(tmp_path / "report.csv") as fh:
        methods = [r["method"] for r in csv.DictReader(fh)]
    assert methods == ["mhgd", "student", "teacher"]


def test_unknown_config_key_exits_2_naming_the_key(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[mhgd]\nhead_count = 4\n")
    assert main(["train-teacher", "--config", str(bad)]) == 2
    err = capsys.readouterr().err
    assert "head_count" in err and "bad.ini:2" in err


def test_missing_config_and_bad_arguments_exit_2(capsys):
    assert main(["run", "--config", "/nonexistent/x.ini"]) == 2
    assert main(["run", "--stage", "everything"]) == 2
    assert main(["ablate-heads", "--heads", "one,two"]) == 2
    assert main([]) == 2


def test_gradcheck_scopes(capsys):
    assert main(["gradcheck", "softmax_rows", "--trials", "3"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("PASS  softmax_rows") and "1/1 targets" in out
    assert main(["gradcheck", "bogus"]) == 2
    assert "unknown gradcheck scope" in capsys.readouterr().err


def test_report_without_metrics_exits_1(tmp_path, capsys):
    assert main(["report", str(tmp_path)]) == 1


def test_staged_commands_match_single_run(tiny_run, tmp_path):
    cfg, out = tiny_run
    staged = tmp_path / "staged"
    common = ["--config", str(cfg), "--out-dir", str(staged), "--seed", "0"]
    assert main(["train-teacher", *common]) == 0
    assert main(["train-mhan", *common]) == 0
    assert main(["train-student", *common, "--method", "mhgd"]) == 0
    for rel in ("teacher/teacher.ckpt", "mhan/mhan.ckpt", "student_mhgd/student.ckpt"):
        assert (staged / "seed_0" / rel).read_bytes() == (out / "seed_0" / rel).read_bytes()


def test_student_stage_builds_missing_prerequisites(tiny_config, tmp_path):
    out = tmp_path / "fresh"
    assert main(["train-student", "--config", str(tiny_config), "--out-dir", str(out),
                 "--seed", "0", "--method", "mhgd"]) == 0
    assert (out / "seed_0" / "teacher" / "teacher.ckpt").exists()
    assert (out / "seed_0" / "mhan" / "mhan.ckpt").exists()
    assert not (out / "seed_0" / "student_student").exists()


def test_ablate_heads_writes_one_row_per_count(tiny_config, tmp_path):
    out = tmp_path / "abl"
    assert main(["ablate-heads", "--config", str(tiny_config), "--out-dir", str(out),
                 "--heads", "1,2", "--seed", "0"]) == 0
    with open(out / "ablation_heads.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["heads"] for r in rows] == ["1", "2"]
    assert "Published full-scale reference" in (out / "ablation_heads.txt").read_text()
