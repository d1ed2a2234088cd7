"""Checkpoint evaluation: constrained decoding plus per-task metrics.

Closed-set tasks decode under their label trie, grounding under the
single-box constraint, detection under the box/class grammar; caption and
summarization decode freely. Every sample's prediction is dumped so
reported metrics can be recounted independently.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from . import metrics
from .decode import BoxConstraint, DetectionConstraint, LabelTrie, generate
from .metrics import MetricReport
from .model import ModelParams
from .prompts import PromptVariant, Task, render_prompt
from .synth import CLOSED_SETS, assemble_encoder_input, build_split, parse_detections
from .vocab import UnifiedVocab

GEN_LIMITS = {
    Task.GROUNDING: 5,
    Task.DETECTION: 96,
    Task.CLASSIFICATION: 16,
    Task.ENTAILMENT: 8,
    Task.VQA: 8,
    Task.CAPTION: 96,
    Task.SUMMARIZATION: 96,
}

PRIMARY_METRIC = {
    Task.GROUNDING: "acc",
    Task.ENTAILMENT: "acc",
    Task.VQA: "acc",
    Task.CLASSIFICATION: "acc",
    Task.CAPTION: "bleu4",
    Task.SUMMARIZATION: "rougeL",
    Task.DETECTION: "map",
}


def constraint_for(task: Task, vocab: UnifiedVocab):
    if task is Task.GROUNDING:
        return BoxConstraint(vocab)
    if task is Task.DETECTION:
        return DetectionConstraint(CLOSED_SETS["classes"], vocab)
    if task in (Task.CLASSIFICATION, Task.ENTAILMENT, Task.VQA):
        name = {"classification": "classes", "entailment": "entailment",
                "vqa": "colors"}[task.value]
        return LabelTrie(CLOSED_SETS[name], vocab)
    return None


def _lenient_text(tokens: list[int], vocab: UnifiedVocab) -> str:
    """Decode a free generation; any non-text token renders it invalid."""
    if not tokens or not all(vocab.is_text(t) for t in tokens):
        return ""
    return vocab.decode_text(tokens)


@dataclass
class TaskEval:
    task: Task
    values: dict[str, float]
    dumps: list[dict]


def evaluate_task(params: ModelParams, task: Task, variant: PromptVariant,
                  split: str, n: int, max_len: int) -> TaskEval:
    vocab = params.vocab
    samples = build_split(task, split, n, vocab, params.hyper.d_model)
    constraint = constraint_for(task, vocab)
    preds: list[list[int]] = []
    dumps: list[dict] = []
    for s in samples:
        prompt = render_prompt(variant, task, s.prompt_instance, vocab)
        enc = assemble_encoder_input(prompt, s.patches, max_len)
        result = generate(params, enc, constraint, GEN_LIMITS[task])
        preds.append(result.tokens)
        dumps.append({
            "task": task.value,
            "seed": s.seed,
            "prediction": result.tokens,
            "ended": result.ended,
            "allowed_sizes": result.allowed_sizes,
            "gold": s.meta.get("text") or s.meta.get("box") or s.meta.get("objects"),
        })

    if task is Task.GROUNDING:
        golds = [s.meta["box"] for s in samples]
        values = {"acc": metrics.grounding_accuracy(preds, golds, vocab)}
    elif task is Task.DETECTION:
        pred_dets = [parse_detections(p, vocab) or [] for p in preds]
        gold_dets = [s.meta["objects"] for s in samples]
        m, r = metrics.map_lite(pred_dets, gold_dets)
        values = {"map": m, "mar": r}
    elif task in (Task.CLASSIFICATION, Task.ENTAILMENT, Task.VQA):
        texts = [_lenient_text(p, vocab) for p in preds]
        golds = [s.meta["text"] for s in samples]
        values = {"acc": metrics.exact_match_accuracy(texts, golds)}
    elif task is Task.CAPTION:
        texts = [_lenient_text(p, vocab) for p in preds]
        golds = [s.meta["text"] for s in samples]
        values = {
            "bleu4": sum(metrics.bleu4(t, [g]) for t, g in zip(texts, golds)) / len(texts),
            "cider": metrics.cider_lite(texts, [[g] for g in golds]),
        }
    else:  # summarization
        texts = [_lenient_text(p, vocab) for p in preds]
        golds = [s.meta["text"] for s in samples]
        values = {
            "rouge1": sum(metrics.rouge_n(t, g, 1) for t, g in zip(texts, golds)) / len(texts),
            "rouge2": sum(metrics.rouge_n(t, g, 2) for t, g in zip(texts, golds)) / len(texts),
            "rougeL": sum(metrics.rouge_l(t, g) for t, g in zip(texts, golds)) / len(texts),
        }
    for d, p in zip(dumps, preds):
        d["decoded"] = _lenient_text(p, vocab)
    return TaskEval(task=task, values=values, dumps=dumps)


def evaluate(params: ModelParams, tasks, variant: PromptVariant, split: str,
             n: int, max_len: int, fingerprint: str = "") -> tuple[MetricReport, list[dict]]:
    report = MetricReport(fingerprint=fingerprint)
    dumps: list[dict] = []
    for task in tasks:
        te = evaluate_task(params, task, variant, split, n, max_len)
        report.per_task[task.value] = te.values
        report.counts[task.value] = n
        dumps.extend(te.dumps)
    return report, dumps


def write_eval_outputs(run_dir, report: MetricReport, dumps: list[dict],
                       variant_label: str, seed: int, prefix: str = "metrics") -> None:
    from pathlib import Path

    run_dir = Path(run_dir)
    (run_dir / f"{prefix}.json").write_text(report.to_json())
    rows = ["task,variant,seed,metric,value"] + report.csv_rows(variant_label, seed)
    (run_dir / f"{prefix}.csv").write_text("\n".join(rows) + "\n")
    with open(run_dir / f"{prefix}_predictions.jsonl", "w") as f:
        for d in dumps:
            f.write(json.dumps(d) + "\n")
