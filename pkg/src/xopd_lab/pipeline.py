"""End-to-end experiment pipeline and the headline-trend reproduction.

One seed of the pipeline: generate the corpus, pretrain the text teacher,
construct the gapped base student, train every method variant from the same
base checkpoint, then evaluate speech/text accuracy per family, aggregate
drops versus the teacher, and acoustic-skill retention.

The trend report checks three directional claims on each seed:

* gap narrowing   - the dual-advantage method cuts the speech drop by at
                    least half versus the base student and beats SFT,
                    offline KD, and GKD, without sacrificing text.
* forgetting      - every lambda variant retains the speech-only acoustic
                    skill better than every baseline.
* baseline tax    - SFT's text drop worsens relative to the base student;
                    if this does not transfer to desk scale, the report
                    carries an explicit DEVIATION record instead of failing
                    silently.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

from .corpus import SpeechCodec, build_dataset, save_dataset, Dataset
from .errors import XopdError
from .evaluation import (
    EvalReport,
    avg_drop,
    comparison_table_csv,
    curve_csv,
    curve_svg,
    evaluate_model,
    forgetting_eval,
)
from .model import ModelConfig, StudentModel, TeacherModel, save_model
from .rollout import SPEECH, TEXT
from .trainer import (
    GapConfig,
    PretrainConfig,
    TrainConfig,
    build_gapped_student,
    clone_student,
    pretrain_teacher,
    run_method,
)

# REASONING's admissible prompt space at difficulty <= 2 is 800 unique
# prompts, so its quotas stay inside that budget; eval splits stay at 500.
DEFAULT_SIZES = {
    "REASONING": (150, 100, 500),
    "INSTRUCTION": (800, 150, 500),
    "ACOUSTIC": (800, 150, 500),
}

BASELINE_METHODS = ("sft", "offline_kd", "gkd")


@dataclass
class PipelineConfig:
    seeds: tuple[int, ...] = (0, 1, 2)
    sizes: dict = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_SIZES.items()})
    noise_rate: float = 0.08
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    gap: GapConfig = field(default_factory=GapConfig)
    xopd_steps: int = 150
    gkd_steps: int = 50
    lambda_grid: tuple[float, ...] = (0.0, 0.5, 1.0)
    learning_rate: float = 1e-3
    batch_size: int = 32
    n_rollouts: int = 4
    max_new: int = 12
    n_eval: int = 500
    forgetting_threshold: float = 0.05
    workers: int = 1


def _method_variants(cfg: PipelineConfig, seed: int) -> list[tuple[str, TrainConfig]]:
    variants = []
    for lam in cfg.lambda_grid:
        variants.append(
            (
                f"xopd_l{lam:g}",
                TrainConfig(
                    method="xopd", lam=lam, n_rollouts=cfg.n_rollouts,
                    learning_rate=cfg.learning_rate, batch_size=cfg.batch_size,
                    steps=cfg.xopd_steps, max_new=cfg.max_new, seed=seed, workers=cfg.workers,
                ),
            )
        )
    for method in BASELINE_METHODS:
        variants.append(
            (
                method,
                TrainConfig(
                    method=method, learning_rate=cfg.learning_rate, batch_size=cfg.batch_size,
                    steps=cfg.gkd_steps, epochs=1, max_new=cfg.max_new, seed=seed,
                    workers=cfg.workers,
                ),
            )
        )
    return variants


def run_seed(
    cfg: PipelineConfig,
    seed: int,
    out_dir: Path,
    teacher: TeacherModel | None = None,
    pretrain_report: dict | None = None,
) -> dict:
    """Run the full pipeline for one seed; returns the seed's result record.

    A pre-trained teacher may be shared across seeds (one fixed teacher, as
    at paper scale, where seeds vary data and rollouts but not the teacher);
    when omitted, the teacher is pretrained under this seed.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    codec = SpeechCodec(
        noise_rate=cfg.noise_rate,
        text_vocab_size=cfg.model.text_vocab_size,
        speech_vocab_size=cfg.model.speech_vocab_size,
        frames_per_token=cfg.model.frames_per_token,
    )
    sizes = {k: tuple(v) for k, v in cfg.sizes.items()}
    dataset = build_dataset(sizes, codec, seed=seed)
    save_dataset(dataset, out_dir / "data")

    if teacher is None:
        teacher, pretrain_report = pretrain_teacher(dataset, cfg.model, cfg.pretrain, seed)
    save_model(teacher, out_dir / "teacher.ckpt")
    teacher_report = evaluate_model(
        teacher, dataset, "teacher", seed, modalities=(TEXT,), n_eval=cfg.n_eval, max_new=cfg.max_new
    )

    base_student, gap_report = build_gapped_student(teacher, dataset, cfg.model, cfg.gap, seed)
    save_model(base_student, out_dir / "student_base.ckpt")
    base_report = evaluate_model(
        base_student, dataset, "base_student", seed, n_eval=cfg.n_eval, max_new=cfg.max_new
    )
    avg_drop(base_report, teacher_report)

    reports: dict[str, EvalReport] = {"teacher": teacher_report, "base_student": base_report}
    forgetting: dict[str, dict] = {}
    for name, tc in _method_variants(cfg, seed):
        student = clone_student(base_student)
        run_method(tc, student, teacher, dataset, out_dir=out_dir / "runs" / name)
        rep = evaluate_model(student, dataset, name, seed, n_eval=cfg.n_eval, max_new=cfg.max_new)
        avg_drop(rep, teacher_report)
        reports[name] = rep
        forgetting[name] = forgetting_eval(rep, base_report, threshold=cfg.forgetting_threshold)

    table = comparison_table_csv([r for r in reports.values() if r.model_id != "teacher"])
    (out_dir / "comparison.csv").write_text(table)
    result = {
        "seed": seed,
        "pretrain": {k: v for k, v in (pretrain_report or {}).items() if k != "history"},
        "gap_construction": gap_report,
        "reports": {k: r.to_dict() for k, r in reports.items()},
        "forgetting": forgetting,
    }
    (out_dir / "seed_result.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    return result


def _trend_checks(result: dict, lambda_grid: tuple[float, ...]) -> dict:
    reps = result["reports"]
    xopd_name = "xopd_l0.5"
    base_ds = reps["base_student"]["avg_drop_speech"]
    base_dt = reps["base_student"]["avg_drop_text"]
    x_ds = reps[xopd_name]["avg_drop_speech"]
    x_dt = reps[xopd_name]["avg_drop_text"]
    baseline_ds = {m: reps[m]["avg_drop_speech"] for m in BASELINE_METHODS}

    gap_narrowing = (
        x_ds <= 0.5 * base_ds
        and all(x_ds < d for d in baseline_ds.values())
        and x_dt <= base_dt + 2.0
    )
    xopd_drops = [result["forgetting"][f"xopd_l{lam:g}"]["drop"] for lam in lambda_grid]
    baseline_drops = [result["forgetting"][m]["drop"] for m in BASELINE_METHODS]
    forgetting_ok = all(xd < bd for xd in xopd_drops for bd in baseline_drops)
    sft_text_worsens = reps["sft"]["avg_drop_text"] > base_dt
    return {
        "gap_narrowing": gap_narrowing,
        "forgetting": forgetting_ok,
        "sft_text_worsens": sft_text_worsens,
        "numbers": {
            "base_drop_speech": base_ds,
            "base_drop_text": base_dt,
            "xopd_drop_speech": x_ds,
            "xopd_drop_text": x_dt,
            "baseline_drop_speech": baseline_ds,
            "sft_drop_text": reps["sft"]["avg_drop_text"],
            "xopd_acoustic_drops": xopd_drops,
            "baseline_acoustic_drops": baseline_drops,
        },
    }


def reproduce_paper_trends(cfg: PipelineConfig, out_root: str | Path) -> dict:
    """Run every seed and aggregate the three directional criteria."""
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    (out_root / "pipeline_config.json").write_text(
        json.dumps(asdict(cfg), indent=2, sort_keys=True, default=list)
    )
    # One fixed teacher across seeds (as at paper scale, where the teacher
    # is a single pretrained model and seeds vary data and rollouts).
    codec = SpeechCodec(
        noise_rate=cfg.noise_rate,
        text_vocab_size=cfg.model.text_vocab_size,
        speech_vocab_size=cfg.model.speech_vocab_size,
        frames_per_token=cfg.model.frames_per_token,
    )
    teacher_seed = cfg.seeds[0]
    teacher_data = build_dataset(
        {k: tuple(v) for k, v in cfg.sizes.items()}, codec, seed=teacher_seed
    )
    teacher, pretrain_report = pretrain_teacher(
        teacher_data, cfg.model, cfg.pretrain, teacher_seed
    )
    seed_results = []
    checks = []
    for seed in cfg.seeds:
        result = run_seed(
            cfg, seed, out_root / f"seed-{seed}", teacher=teacher, pretrain_report=pretrain_report
        )
        seed_results.append(result)
        checks.append(_trend_checks(result, cfg.lambda_grid))

    n = len(checks)
    need = 2 if n >= 3 else n
    gap_count = sum(c["gap_narrowing"] for c in checks)
    forget_count = sum(c["forgetting"] for c in checks)
    sft_count = sum(c["sft_text_worsens"] for c in checks)
    deviations = []
    if sft_count < need:
        deviations.append(
            {
                "type": "DEVIATION",
                "criterion": "baseline_text_degradation",
                "detail": (
                    f"SFT text drop worsened on only {sft_count}/{n} seeds; the "
                    "paper-scale degradation did not fully transfer to desk scale."
                ),
            }
        )
    report = {
        "seeds": list(cfg.seeds),
        "per_seed_checks": checks,
        "criteria": {
            "gap_narrowing": {"passes": gap_count, "of": n, "ok": gap_count >= need},
            "forgetting": {"passes": forget_count, "of": n, "ok": forget_count >= need},
            "sft_text_worsens": {
                "passes": sft_count,
                "of": n,
                "ok": sft_count >= need or bool(deviations),
            },
        },
        "deviations": deviations,
    }
    (out_root / "trends_report.json").write_text(json.dumps(report, indent=2, sort_keys=True))

    # Lambda-ablation curve over the first seed's reports.
    first = seed_results[0]["reports"]
    series = {
        "drop_speech": [
            (lam, first[f"xopd_l{lam:g}"]["avg_drop_speech"]) for lam in cfg.lambda_grid
        ],
        "drop_text": [
            (lam, first[f"xopd_l{lam:g}"]["avg_drop_text"]) for lam in cfg.lambda_grid
        ],
    }
    (out_root / "lambda_ablation.svg").write_text(curve_svg(series, title="avg drop vs lambda"))
    rows = [
        {
            "lambda": lam,
            "drop_speech": first[f"xopd_l{lam:g}"]["avg_drop_speech"],
            "drop_text": first[f"xopd_l{lam:g}"]["avg_drop_text"],
        }
        for lam in cfg.lambda_grid
    ]
    (out_root / "lambda_ablation.csv").write_text(
        curve_csv(rows, ["lambda", "drop_speech", "drop_text"])
    )
    return report


@dataclass
class AblationGrid:
    lambda_values: list[float]
    # teacher variant id -> {lambda label -> EvalReport dict or error record}
    cells: dict[str, dict[str, dict]] = field(default_factory=dict)


def run_ablation(
    teachers: dict[str, TeacherModel],
    lambda_grid: tuple[float, ...],
    cfg: PipelineConfig,
    dataset: Dataset,
    base_student: StudentModel,
    base_teacher_id: str,
    seed: int,
    out_dir: Path,
) -> AblationGrid:
    """Full (teacher variant x lambda) grid with shared seeds and data.

    Individual run failures are recorded in the grid and do not stop it."""
    out_dir.mkdir(parents=True, exist_ok=True)
    grid = AblationGrid(lambda_values=list(lambda_grid))
    reference = evaluate_model(
        teachers[base_teacher_id], dataset, base_teacher_id, seed,
        modalities=(TEXT,), n_eval=cfg.n_eval, max_new=cfg.max_new,
    )
    for teacher_id, teacher in teachers.items():
        grid.cells[teacher_id] = {}
        for lam in lambda_grid:
            name = f"{teacher_id}_l{lam:g}"
            tc = TrainConfig(
                method="xopd", lam=lam, n_rollouts=cfg.n_rollouts,
                learning_rate=cfg.learning_rate, batch_size=cfg.batch_size,
                steps=cfg.xopd_steps, max_new=cfg.max_new, seed=seed, workers=cfg.workers,
            )
            try:
                student = clone_student(base_student)
                run_method(tc, student, teacher, dataset, out_dir=out_dir / name)
                rep = evaluate_model(student, dataset, name, seed, n_eval=cfg.n_eval, max_new=cfg.max_new)
                avg_drop(rep, reference)
                grid.cells[teacher_id][f"l{lam:g}"] = rep.to_dict()
            except XopdError as e:
                grid.cells[teacher_id][f"l{lam:g}"] = {"error": str(e)}
    (out_dir / "ablation_grid.json").write_text(json.dumps(asdict(grid), indent=2, sort_keys=True))
    rows = []
    for teacher_id, cells in grid.cells.items():
        for label, rep in cells.items():
            if "error" in rep:
                continue
            rows.append({"teacher": teacher_id, "lambda": label, **{
                "drop_speech": rep["avg_drop_speech"], "drop_text": rep["avg_drop_text"]}})
    fmt = lambda x: "" if x is None else f"{x:.4f}"
    lines = ["teacher,lambda,drop_speech,drop_text"]
    for r in rows:
        lines.append(f'{r["teacher"]},{r["lambda"]},{fmt(r["drop_speech"])},{fmt(r["drop_text"])}')
    (out_dir / "ablation.csv").write_text("\n".join(lines) + "\n")
    return grid
