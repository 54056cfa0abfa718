"""CLI tests: subcommand wiring and exit codes (0 success, 1 failure, 2 usage)."""

import json

import pytest

from xopd_lab.cli import main
from xopd_lab.corpus import save_dataset
from xopd_lab.model import save_model


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    from xopd_lab.corpus import SpeechCodec, build_dataset

    d = tmp_path_factory.mktemp("data")
    ds = build_dataset({f: (24, 8, 8) for f in ("REASONING", "INSTRUCTION", "ACOUSTIC")},
                       SpeechCodec(), seed=0)
    save_dataset(ds, d)
    return d


@pytest.fixture(scope="module")
def ckpts(tmp_path_factory, tiny_teacher, tiny_student):
    d = tmp_path_factory.mktemp("ckpts")
    save_model(tiny_teacher, d / "teacher.ckpt")
    save_model(tiny_student, d / "student.ckpt")
    return d


@pytest.fixture(scope="module")
def tiny_model_cfg_file(tmp_path_factory, tiny_config):
    from dataclasses import asdict

    d = tmp_path_factory.mktemp("cfg")
    path = d / "config.json"
    path.write_text(json.dumps({"model": asdict(tiny_config)}))
    return path


def test_gen_data_success(tmp_path, capsys):
    out = tmp_path / "data"
    code = main([
        "gen-data", "--out", str(out), "--seed", "1",
        "--set", 'sizes={"REASONING": [6, 2, 2]}',
    ])
    assert code == 0
    assert (out / "manifest.json").exists()
    assert (out / "train.jsonl").exists()
    printed = json.loads(capsys.readouterr().out)
    assert printed["seed"] == 1
    assert printed["counts"]["train"] == 6


def test_gen_data_invalid_noise_is_usage_error(tmp_path):
    code = main([
        "gen-data", "--out", str(tmp_path / "x"), "--set", "noise_rate=1.5",
        "--set", 'sizes={"REASONING": [2, 1, 1]}',
    ])
    assert code == 2


def test_train_missing_data_without_auto(tmp_path, capsys):
    code = main([
        "train", "--method", "sft", "--data", str(tmp_path / "nope"),
        "--out", str(tmp_path / "out"),
    ])
    assert code == 2
    assert "nope" in capsys.readouterr().err


def test_train_missing_teacher_without_auto(tmp_path, data_dir, capsys):
    code = main([
        "train", "--method", "sft", "--data", str(data_dir),
        "--teacher", str(tmp_path / "no-teacher.ckpt"),
        "--out", str(tmp_path / "out"),
    ])
    assert code == 2
    assert "no-teacher.ckpt" in capsys.readouterr().err


def test_train_unknown_method_is_usage_error(tmp_path, data_dir):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--method", "dagger", "--data", str(data_dir)])
    assert exc.value.code == 2


@pytest.mark.parametrize("method,extra", [
    ("sft", []),
    ("offline_kd", []),
    ("gkd", ["--steps", "2"]),
    ("xopd", ["--lambda", "0.5", "--steps", "2", "--rollouts", "2"]),
])
def test_train_each_method_smoke(method, extra, tmp_path, data_dir, ckpts, capsys):
    out = tmp_path / f"run-{method}"
    code = main([
        "train", "--method", method, "--data", str(data_dir),
        "--teacher", str(ckpts / "teacher.ckpt"),
        "--student", str(ckpts / "student.ckpt"),
        "--out", str(out),
        "--set", "train.batch_size=8", "--set", "train.max_new=5",
    ] + extra)
    assert code == 0, capsys.readouterr().err
    assert (out / "metrics.jsonl").exists()
    assert (out / "resolved_config.json").exists()


def test_eval_comparison_table(tmp_path, data_dir, ckpts, capsys):
    out = tmp_path / "eval"
    code = main([
        "eval", str(ckpts / "student.ckpt"),
        "--data", str(data_dir), "--base", str(ckpts / "teacher.ckpt"),
        "--out", str(out), "--n-eval", "4",
    ])
    assert code == 0
    table = (out / "comparison.csv").read_text()
    header = table.splitlines()[0]
    assert header.startswith("model,REASONING_S,REASONING_T")
    assert (out / "report_base.json").exists()


def test_eval_ablation_table(tmp_path, data_dir, ckpts):
    out = tmp_path / "abl"
    code = main([
        "eval", str(ckpts / "student.ckpt"), str(ckpts / "student.ckpt"),
        "--data", str(data_dir), "--out", str(out), "--n-eval", "2",
        "--ablation", "lambda=0,1",
    ])
    assert code == 0
    csv = (out / "ablation.csv").read_text()
    assert "lambda=0" in csv and "lambda=1" in csv


def test_eval_ablation_arity_mismatch(tmp_path, data_dir, ckpts):
    code = main([
        "eval", str(ckpts / "student.ckpt"),
        "--data", str(data_dir), "--out", str(tmp_path / "x"), "--n-eval", "2",
        "--ablation", "lambda=0,0.5,1",
    ])
    assert code == 2


def test_eval_missing_checkpoint(tmp_path, data_dir):
    code = main([
        "eval", str(tmp_path / "ghost.ckpt"), "--data", str(data_dir),
        "--out", str(tmp_path / "x"), "--n-eval", "2",
    ])
    assert code == 2


def test_config_file_and_overrides(tmp_path, data_dir, ckpts, tiny_model_cfg_file):
    out = tmp_path / "cfg-run"
    code = main([
        "train", "--method", "sft", "--config", str(tiny_model_cfg_file),
        "--data", str(data_dir),
        "--teacher", str(ckpts / "teacher.ckpt"),
        "--student", str(ckpts / "student.ckpt"),
        "--out", str(out), "--set", "train.batch_size=16",
    ])
    assert code == 0
    resolved = json.loads((out / "resolved_config.json").read_text())
    assert resolved["train"]["batch_size"] == 16


def test_missing_config_file_is_usage_error(tmp_path, data_dir):
    code = main([
        "gen-data", "--config", str(tmp_path / "absent.json"), "--out", str(tmp_path / "o"),
    ])
    assert code == 2


def test_malformed_override_is_usage_error(tmp_path):
    code = main(["gen-data", "--out", str(tmp_path / "o"), "--set", "justakey"])
    assert code == 2
