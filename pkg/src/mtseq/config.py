"""Flat key-value config files with dotted sections.

Lines are ``section.key = value``; blank lines and ``#`` comments are
skipped. Every key must appear in the schema (unknown keys are errors so
stale configs fail loudly), and defaults mirror the training
hyperparameters built into TrainConfig.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from .errors import ConfigError, UnknownTask
from .prompts import TASK_ORDER, Task, parse_variant
from .trainer import TrainConfig

_UNSET = object()


def _parse_int(s):
    return int(s)


def _parse_float(s):
    return float(s)


def _parse_str(s):
    return s


def _parse_tasks(s):
    names = [p.strip() for p in s.split(",") if p.strip()]
    return tuple(Task.parse(n) for n in names)


def _parse_variant(s):
    return parse_variant(s)


def _parse_intlist(s):
    return tuple(int(p.strip()) for p in s.split(",") if p.strip())


def _parse_strlist(s):
    return tuple(p.strip() for p in s.split(",") if p.strip())


# key -> (parser, default). Defaults marked _UNSET are optional-and-absent.
SCHEMA = {
    "train.tasks": (_parse_tasks, TASK_ORDER),
    "train.variant": (_parse_variant, parse_variant("structured")),
    "train.steps": (_parse_int, 400),
    "train.samples_per_task": (_parse_int, 2),
    "train.seed": (_parse_int, 0),
    "train.peak_lr": (_parse_float, 1e-4),
    "train.warmup_ratio": (_parse_float, 0.01),
    "train.beta1": (_parse_float, 0.9),
    "train.beta2": (_parse_float, 0.999),
    "train.adam_eps": (_parse_float, 1e-8),
    "train.weight_decay": (_parse_float, 0.01),
    "train.dropout": (_parse_float, 0.1),
    "train.label_smoothing": (_parse_float, 0.1),
    "train.grad_clip": (_parse_float, 1.0),
    "train.aggregate": (_parse_str, "mean"),
    "train.checkpoint_every": (_parse_int, 0),
    "model.d_model": (_parse_int, 64),
    "model.n_heads": (_parse_int, 4),
    "model.n_enc": (_parse_int, 2),
    "model.n_dec": (_parse_int, 2),
    "model.d_ff": (_parse_int, 256),
    "model.max_len": (_parse_int, 512),
    "data.bins": (_parse_int, 100),
    "data.train_per_task": (_parse_int, 128),
    "data.val_per_task": (_parse_int, 64),
    "data.test_per_task": (_parse_int, 64),
    "data.fewshot_task": (_parse_str, ""),
    "data.fewshot_n": (_parse_int, -1),
    "run.root": (_parse_str, "runs"),
    # Ablation grids (cmd_ablate only).
    "ablate.variants": (_parse_strlist, ("onehot", "base", "structured")),
    "ablate.task_counts": (_parse_intlist, ()),
    "ablate.seeds": (_parse_intlist, (0, 1, 2)),
    "ablate.fewshot_ns": (_parse_intlist, ()),
}


def parse_config_file(path: Path | str) -> dict:
    """Read and validate a config file; returns typed values for all keys."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key in raw:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key}")
        raw[key] = value
    return resolve_config(raw, source=str(path))


def resolve_config(raw: dict[str, str], source: str = "<dict>") -> dict:
    values = {}
    for key, value in raw.items():
        if key not in SCHEMA:
            raise ConfigError(f"{source}: unknown key {key!r}")
        parser, _ = SCHEMA[key]
        try:
            values[key] = parser(value)
        except (ValueError, UnknownTask) as e:
            raise ConfigError(f"{source}: {key}: {e}") from None
    for key, (_, default) in SCHEMA.items():
        values.setdefault(key, default)
    return values


def build_train_config(values: dict) -> TrainConfig:
    """TrainConfig from resolved values; a zero-sample few-shot task is
    excluded from training (zero-shot protocol) but stays evaluable."""
    tasks = values["train.tasks"]
    overrides: tuple[tuple[Task, int], ...] = ()
    fewshot = values["data.fewshot_task"]
    if fewshot:
        try:
            ftask = Task.parse(fewshot)
        except UnknownTask as e:
            raise ConfigError(f"data.fewshot_task: {e}") from None
        n = values["data.fewshot_n"]
        if n < 0:
            raise ConfigError("data.fewshot_n must be set when data.fewshot_task is")
        if n == 0:
            tasks = tuple(t for t in tasks if t is not ftask)
        else:
            overrides = ((ftask, n),)
    config = TrainConfig(
        tasks=tasks,
        variant=values["train.variant"],
        n_per_task=values["train.samples_per_task"],
        total_steps=values["train.steps"],
        peak_lr=values["train.peak_lr"],
        warmup_ratio=values["train.warmup_ratio"],
        beta1=values["train.beta1"],
        beta2=values["train.beta2"],
        eps_opt=values["train.adam_eps"],
        weight_decay=values["train.weight_decay"],
        dropout=values["train.dropout"],
        label_smoothing=values["train.label_smoothing"],
        grad_clip=values["train.grad_clip"],
        aggregate=values["train.aggregate"],
        seed=values["train.seed"],
        checkpoint_every=values["train.checkpoint_every"],
        d_model=values["model.d_model"],
        n_heads=values["model.n_heads"],
        n_enc=values["model.n_enc"],
        n_dec=values["model.n_dec"],
        d_ff=values["model.d_ff"],
        max_len=values["model.max_len"],
        bins=values["data.bins"],
        n_train=values["data.train_per_task"],
        n_val=values["data.val_per_task"],
        n_test=values["data.test_per_task"],
        train_overrides=overrides,
    )
    try:
        config.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return config


def config_hash(config: TrainConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


def run_dir_for(config: TrainConfig, run_root: Path | str) -> Path:
    return Path(run_root) / f"{config_hash(config)}-s{config.seed}"
