"""Canonical experiment definitions shared by scripts, CLI, and tests.

Runs are cached by config hash: a run directory holding final.bin and
metrics.json is trusted and reused, so studies resume for free and every
consumer (scripts, the ablate command, the acceptance suite) sees the same
numbers for the same config.
"""

from __future__ import annotations

import json
from pathlib import Path

from .checkpoint import load_checkpoint
from .config import config_hash, run_dir_for
from .evaluation import evaluate, write_eval_outputs
from .metrics import MetricReport
from .prompts import TASK_ORDER, PromptVariant, Task, parse_variant
from .trainer import TrainConfig, train_run

# Default study scale: small enough for a laptop core, large enough for the
# prompt variants to separate on held-out data.
STUDY_STEPS = 360
STUDY_TRAIN = 96
STUDY_VAL = 64
STUDY_SEEDS = (0, 1, 2)
STUDY_MAX_LEN = 1100
STUDY_N_PER_TASK = 2

TASK_COUNT_LADDER: dict[int, tuple[Task, ...]] = {
    1: (Task.GROUNDING,),
    3: (Task.CAPTION, Task.GROUNDING, Task.ENTAILMENT),
    5: (Task.CAPTION, Task.GROUNDING, Task.ENTAILMENT, Task.DETECTION, Task.VQA),
    7: TASK_ORDER,
}


def study_config(variant: PromptVariant, seed: int,
                 tasks: tuple[Task, ...] = TASK_ORDER,
                 train_overrides: tuple[tuple[Task, int], ...] = ()) -> TrainConfig:
    return TrainConfig(
        tasks=tasks,
        variant=variant,
        seed=seed,
        total_steps=STUDY_STEPS,
        n_per_task=STUDY_N_PER_TASK,
        n_train=STUDY_TRAIN,
        n_val=STUDY_VAL,
        max_len=STUDY_MAX_LEN,
        train_overrides=train_overrides,
    )


def run_and_eval(config: TrainConfig, run_root: Path | str,
                 eval_tasks: tuple[Task, ...] | None = None,
                 reuse: bool = True, quiet: bool = True) -> tuple[Path, MetricReport]:
    """Train (or reuse) one run and evaluate it on the validation split."""
    run_dir = run_dir_for(config, run_root)
    eval_tasks = eval_tasks or config.tasks
    metrics_path = run_dir / "metrics.json"
    ckpt_path = run_dir / "final.bin"

    params = None
    if not (reuse and ckpt_path.exists()):
        params = train_run(config, run_dir, quiet=quiet)

    if reuse and metrics_path.exists():
        report = MetricReport.from_json(metrics_path.read_text())
        if all(t.value in report.per_task for t in eval_tasks):
            return run_dir, report

    if params is None:
        params, _ = load_checkpoint(ckpt_path, expect_vocab=config.vocab())
    fingerprint = f"{config_hash(config)}-s{config.seed}-val-{config.variant.label}"
    report, dumps = evaluate(params, eval_tasks, config.variant, "val",
                             config.n_val, config.max_len, fingerprint)
    write_eval_outputs(run_dir, report, dumps, config.variant.label, config.seed)
    return run_dir, report


def prompt_comparison_cells(seeds=STUDY_SEEDS):
    """(variant label, seed, config) grid for the main prompt study."""
    cells = []
    for label in ("onehot", "base", "structured"):
        for seed in seeds:
            cells.append((label, seed, study_config(parse_variant(label), seed)))
    return cells


def task_count_cells(seeds=STUDY_SEEDS, counts=(3, 7)):
    """(count, seed, config) grid; per-task sample counts stay fixed."""
    cells = []
    for count in counts:
        for seed in seeds:
            cells.append((count, seed,
                          study_config(parse_variant("structured"), seed,
                                       tasks=TASK_COUNT_LADDER[count])))
    return cells


def run_prompt_comparison(run_root: Path | str, reuse: bool = True, quiet: bool = True):
    """All variant x seed runs; returns {variant: {seed: MetricReport}}."""
    results: dict[str, dict[int, MetricReport]] = {}
    for label, seed, config in prompt_comparison_cells():
        _, report = run_and_eval(config, run_root, reuse=reuse, quiet=quiet)
        results.setdefault(label, {})[seed] = report
    return results


def run_task_count_study(run_root: Path | str, reuse: bool = True, quiet: bool = True):
    """TEP-variant runs across the task ladder; returns {count: {seed: report}}."""
    results: dict[int, dict[int, MetricReport]] = {}
    for count, seed, config in task_count_cells():
        _, report = run_and_eval(config, run_root, reuse=reuse, quiet=quiet)
        results.setdefault(count, {})[seed] = report
    return results


def mean_metric(reports: dict[int, MetricReport], task: Task, metric: str) -> float:
    vals = [r.per_task[task.value][metric] for r in reports.values()]
    return sum(vals) / len(vals)


def load_structured_checkpoint(run_root: Path | str, seed: int):
    """Trained params of the structured-prompt 7-task run for one seed."""
    config = study_config(parse_variant("structured"), seed)
    ckpt = run_dir_for(config, run_root) / "final.bin"
    params, _ = load_checkpoint(ckpt, expect_vocab=config.vocab())
    return params


def comparison_summary_rows(results) -> list[str]:
    """Flat CSV rows (variant, seed, task, metric, value) for a study result."""
    rows = ["variant,seed,task,metric,value"]
    for label, by_seed in sorted(results.items()):
        for seed, report in sorted(by_seed.items()):
            for task, metrics_ in sorted(report.per_task.items()):
                for name, value in sorted(metrics_.items()):
                    rows.append(f"{label},{seed},{task},{name},{value:.6f}")
    return rows


def write_study_summary(path: Path | str, results) -> None:
    Path(path).write_text("\n".join(comparison_summary_rows(results)) + "\n")
