"""Unit tests for scoring, drop metrics, forgetting, and report emission."""

import json

import numpy as np
import pytest

from xopd_lab.errors import DataError, ModalityError
from xopd_lab.evaluation import (
    EvalReport,
    avg_drop,
    comparison_table_csv,
    curve_csv,
    curve_svg,
    evaluate_model,
    forgetting_eval,
    score_model,
    write_report,
)
from xopd_lab.rollout import SPEECH, TEXT


def _report(model_id, scores):
    return EvalReport(model_id=model_id, base_model_id=None, n_eval=10, seed=0, scores=scores)


def test_score_model_range_and_determinism(tiny_student, small_dataset):
    examples = small_dataset.split_family("test", "REASONING")[:10]
    a = score_model(tiny_student, examples, SPEECH, max_new=5)
    b = score_model(tiny_student, examples, SPEECH, max_new=5)
    assert a == b
    assert 0.0 <= a <= 1.0


def test_teacher_cannot_be_scored_on_speech(tiny_teacher, small_dataset):
    examples = small_dataset.split_family("test", "REASONING")[:4]
    with pytest.raises(ModalityError):
        score_model(tiny_teacher, examples, SPEECH)
    assert 0.0 <= score_model(tiny_teacher, examples, TEXT, max_new=5) <= 1.0


def test_evaluate_model_shape(tiny_student, small_dataset):
    report = evaluate_model(tiny_student, small_dataset, "student", seed=0, n_eval=6, max_new=5)
    assert set(report.scores) == {"REASONING", "INSTRUCTION", "ACOUSTIC"}
    for fam in report.scores:
        assert set(report.scores[fam]) == {SPEECH, TEXT}


def test_evaluate_teacher_skips_speech(tiny_teacher, small_dataset):
    report = evaluate_model(tiny_teacher, small_dataset, "teacher", seed=0, n_eval=4, max_new=5)
    for fam in report.scores:
        assert TEXT in report.scores[fam]
        assert SPEECH not in report.scores[fam]


def test_avg_drop_arithmetic():
    base = _report("base", {
        "REASONING": {TEXT: 0.8},
        "INSTRUCTION": {TEXT: 0.5},
    })
    model = _report("m", {
        "REASONING": {SPEECH: 0.4, TEXT: 0.8},
        "INSTRUCTION": {SPEECH: 0.5, TEXT: 0.6},
    })
    ds, dt = avg_drop(model, base)
    # Speech: (0.8-0.4)/0.8*100 = 50 and (0.5-0.5)/0.5*100 = 0 -> mean 25.
    assert ds == pytest.approx(25.0)
    # Text: 0 and (0.5-0.6)/0.5*100 = -20 -> mean -10 (improvement).
    assert dt == pytest.approx(-10.0)
    assert model.avg_drop_speech == ds
    assert model.base_model_id == "base"


def test_avg_drop_excludes_zero_base_families():
    base = _report("base", {"REASONING": {TEXT: 0.0}, "INSTRUCTION": {TEXT: 0.5}})
    model = _report("m", {
        "REASONING": {SPEECH: 0.1, TEXT: 0.1},
        "INSTRUCTION": {SPEECH: 0.25, TEXT: 0.5},
    })
    ds, dt = avg_drop(model, base)
    assert model.excluded_families == ["REASONING"]
    assert ds == pytest.approx(50.0)


def test_avg_drop_requires_families():
    base = _report("base", {"REASONING": {TEXT: 0.5}})
    model = _report("m", {"REASONING": {SPEECH: 0.5, TEXT: 0.5}})
    with pytest.raises(DataError):
        avg_drop(model, base)  # INSTRUCTION missing


def test_forgetting_eval():
    before = _report("base", {"ACOUSTIC": {SPEECH: 0.9}})
    after = _report("m", {"ACOUSTIC": {SPEECH: 0.8}})
    rec = forgetting_eval(after, before)
    assert rec["drop"] == pytest.approx(0.1)
    assert rec["exceeds_threshold"] is True
    rec2 = forgetting_eval(before, before)
    assert rec2["drop"] == 0.0 and rec2["exceeds_threshold"] is False
    with pytest.raises(DataError):
        forgetting_eval(_report("m", {}), before)


def test_comparison_table_csv_shape():
    base = _report("base", {"REASONING": {TEXT: 0.8}, "INSTRUCTION": {TEXT: 0.5}})
    model = _report("m", {
        "REASONING": {SPEECH: 0.4, TEXT: 0.8},
        "INSTRUCTION": {SPEECH: 0.5, TEXT: 0.6},
    })
    avg_drop(model, base)
    csv = comparison_table_csv([base, model])
    lines = csv.strip().splitlines()
    assert lines[0] == "model,REASONING_S,REASONING_T,INSTRUCTION_S,INSTRUCTION_T,avg_drop_S,avg_drop_T"
    assert len(lines) == 3
    assert lines[2].startswith("m,0.4000,0.8000,0.5000,0.6000,")


def test_write_report_round_trips(tmp_path):
    report = _report("m", {"REASONING": {TEXT: 0.5}})
    path = tmp_path / "report.json"
    write_report(report, path)
    data = json.loads(path.read_text())
    assert data["model_id"] == "m"
    assert data["scores"]["REASONING"][TEXT] == 0.5


def test_curve_outputs():
    rows = [{"step": 1, "loss": 0.5}, {"step": 2, "loss": 0.25}]
    csv = curve_csv(rows, ["step", "loss"])
    assert csv.splitlines()[0] == "step,loss"
    assert len(csv.strip().splitlines()) == 3
    svg = curve_svg({"loss": [(1, 0.5), (2, 0.25)]}, title="loss")
    assert svg.startswith("<svg") and "polyline" in svg and "</svg>" in svg
    assert curve_svg({}).startswith("<svg")
