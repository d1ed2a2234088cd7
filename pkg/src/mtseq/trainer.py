"""Balanced multi-task training loop.

Every step draws exactly ``n_per_task`` samples from each active task
(without replacement within a per-task epoch), runs one forward/backward
per task, aggregates the per-task gradients by their mean in a fixed task
order, and applies a single AdamW update under a linear warmup/decay
schedule. Identical configs (seed included) reproduce runs bitwise.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .errors import EmptyDataset, NonFiniteLoss
from .model import Hyper, ModelParams, init_params, loss_and_grads, teacher_forcing
from .prompts import TASK_ORDER, PromptVariant, STRUCTURED, Task, render_prompt
from .synth import TaskSample, assemble_encoder_input, build_split
from .vocab import PAD, UnifiedVocab


@dataclass(frozen=True)
class TrainConfig:
    tasks: tuple[Task, ...] = TASK_ORDER
    variant: PromptVariant = STRUCTURED
    n_per_task: int = 2
    total_steps: int = 400
    peak_lr: float = 1e-4
    warmup_ratio: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    weight_decay: float = 0.01
    dropout: float = 0.1
    label_smoothing: float = 0.1
    grad_clip: float = 1.0  # 0 disables clipping
    aggregate: str = "mean"  # "mean" | "sum"
    seed: int = 0
    checkpoint_every: int = 0  # 0: only the final checkpoint
    d_model: int = 64
    n_heads: int = 4
    n_enc: int = 2
    n_dec: int = 2
    d_ff: int = 256
    max_len: int = 512
    bins: int = 100
    n_train: int = 128
    n_val: int = 64
    n_test: int = 64
    # Few-shot overrides: (task, n) pairs shrinking one task's train split.
    train_overrides: tuple[tuple[Task, int], ...] = ()

    def validate(self) -> None:
        if not self.tasks:
            raise ValueError("tasks must be non-empty")
        if len(set(self.tasks)) != len(self.tasks):
            raise ValueError("duplicate tasks")
        if not 0.0 < self.warmup_ratio < 1.0:
            raise ValueError("warmup_ratio must lie in (0, 1)")
        for name in ("peak_lr", "n_per_task", "total_steps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.aggregate not in ("mean", "sum"):
            raise ValueError("aggregate must be 'mean' or 'sum'")
        self.hyper().validate()

    def hyper(self) -> Hyper:
        return Hyper(d_model=self.d_model, n_heads=self.n_heads, n_enc=self.n_enc,
                     n_dec=self.n_dec, d_ff=self.d_ff, max_len=self.max_len,
                     dropout=self.dropout)

    def vocab(self) -> UnifiedVocab:
        return UnifiedVocab(n_loc=self.bins)

    def train_size(self, task: Task) -> int:
        for t, n in self.train_overrides:
            if t is task:
                return n
        return self.n_train

    def to_dict(self) -> dict:
        return {
            "tasks": [t.value for t in self.tasks],
            "variant": self.variant.label,
            "n_per_task": self.n_per_task,
            "total_steps": self.total_steps,
            "peak_lr": self.peak_lr,
            "warmup_ratio": self.warmup_ratio,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps_opt": self.eps_opt,
            "weight_decay": self.weight_decay,
            "dropout": self.dropout,
            "label_smoothing": self.label_smoothing,
            "grad_clip": self.grad_clip,
            "aggregate": self.aggregate,
            "seed": self.seed,
            "checkpoint_every": self.checkpoint_every,
            "model": self.hyper().to_dict(),
            "bins": self.bins,
            "splits": {
                "train": {t.value: self.train_size(t) for t in self.tasks},
                "val": self.n_val,
                "test": self.n_test,
                "seed_bases": {"train": 0, "val": 10_000_000, "test": 20_000_000},
            },
        }


class BalancedSampler:
    """Equal per-task draws each iteration; per-task epochs without replacement."""

    def __init__(self, datasets: dict[Task, list[TaskSample]], n_per_task: int,
                 rng: np.random.Generator):
        for task, data in datasets.items():
            if not data:
                raise EmptyDataset(f"{task.value} has no training samples")
        self.datasets = datasets
        self.n_per_task = n_per_task
        self.rng = rng
        self._queues = {task: [] for task in datasets}

    def _draw_index(self, task: Task) -> int:
        queue = self._queues[task]
        if not queue:
            order = self.rng.permutation(len(self.datasets[task]))
            queue.extend(int(i) for i in order)
        return queue.pop()

    def next_batch(self) -> dict[Task, list[TaskSample]]:
        return {
            task: [self.datasets[task][self._draw_index(task)]
                   for _ in range(self.n_per_task)]
            for task in self.datasets
        }


def lr_at(step: int, total_steps: int, warmup_ratio: float, peak: float) -> float:
    """Linear 0 -> peak over ceil(ratio * total) steps, then linear peak -> 0."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = max(1, math.ceil(warmup_ratio * total_steps))
    if step <= warmup:
        return peak * step / warmup
    return peak * (total_steps - step) / (total_steps - warmup)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: ModelParams) -> "OptimizerState":
        return cls(
            m={n: np.zeros_like(params[n].data) for n in params.names()},
            v={n: np.zeros_like(params[n].data) for n in params.names()},
        )


def optimizer_step(params: ModelParams, grads: dict[str, np.ndarray],
                   opt_state: OptimizerState, config: TrainConfig, lr: float) -> None:
    """One AdamW update in place: bias-corrected moments plus decoupled decay.

    The PAD row of the embedding table is excluded from weight decay.
    """
    t = opt_state.step + 1
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name in params.names():
        g = grads[name]
        p = params[name].data
        if g.shape != p.shape:
            from .errors import ShapeMismatch
            raise ShapeMismatch(f"gradient shape {g.shape} != param shape {p.shape} for {name}")
        m = opt_state.m[name]
        v = opt_state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + config.eps_opt)
        if config.weight_decay > 0.0:
            decay = lr * config.weight_decay * p
            if name == "embed":
                decay[PAD] = 0.0
            p -= decay
        p -= update
    opt_state.step = t


def prepare_task_batch(samples: list[TaskSample], variant: PromptVariant,
                       vocab: UnifiedVocab, max_len: int):
    """Render prompts and pack teacher-forcing arrays for one task's batch."""
    enc_inputs = [
        assemble_encoder_input(
            render_prompt(variant, s.task, s.prompt_instance, vocab),
            s.patches, max_len)
        for s in samples
    ]
    width = max(len(s.target) for s in samples)
    dec = np.empty((len(samples), width), dtype=np.int64)
    tgt = np.empty((len(samples), width), dtype=np.int64)
    mask = np.empty((len(samples), width), dtype=bool)
    for i, s in enumerate(samples):
        dec[i], tgt[i], mask[i] = teacher_forcing(s.target, width)
    return enc_inputs, dec, tgt, mask


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads.values()))


def train_step(params: ModelParams, opt_state: OptimizerState,
               batch: dict[Task, list[TaskSample]], config: TrainConfig,
               step: int, rng: np.random.Generator):
    """One balanced update; returns (per-task losses, lr, pre-clip grad norm)."""
    vocab = params.vocab
    losses: dict[Task, float] = {}
    agg: dict[str, np.ndarray] | None = None
    for task in config.tasks:
        enc_inputs, dec, tgt, mask = prepare_task_batch(
            batch[task], config.variant, vocab, config.max_len)
        loss, grads = loss_and_grads(params, enc_inputs, dec, tgt, mask,
                                     config.label_smoothing, train=True, rng=rng)
        if not math.isfinite(loss):
            raise NonFiniteLoss(f"{task.value} loss is {loss} at step {step}")
        losses[task] = loss
        if agg is None:
            agg = grads
        else:
            for name in agg:
                agg[name] += grads[name]
    if config.aggregate == "mean":
        inv = 1.0 / len(config.tasks)
        for name in agg:
            agg[name] *= inv
    norm = global_grad_norm(agg)
    if config.grad_clip > 0.0 and norm > config.grad_clip:
        scale = config.grad_clip / norm
        for name in agg:
            agg[name] *= scale
    lr = lr_at(step, config.total_steps, config.warmup_ratio, config.peak_lr)
    optimizer_step(params, agg, opt_state, config, lr)
    return losses, lr, norm


def build_datasets(config: TrainConfig, split: str = "train") -> dict[Task, list[TaskSample]]:
    vocab = config.vocab()
    sizes = {t: config.train_size(t) if split == "train" else
             (config.n_val if split == "val" else config.n_test) for t in config.tasks}
    return {t: build_split(t, split, sizes[t], vocab, config.d_model)
            for t in config.tasks}


def train_run(config: TrainConfig, run_dir: Path | str, log_every: int = 50,
              quiet: bool = False) -> ModelParams:
    """Full training run: config snapshot, CSV log, checkpoints, trained params."""
    config.validate()
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(
        json.dumps(config.to_dict(), indent=2, sort_keys=True))

    vocab = config.vocab()
    datasets = build_datasets(config, "train")
    params = init_params(config.hyper(), vocab, config.seed)
    opt_state = OptimizerState.for_params(params)
    sampler = BalancedSampler(datasets, config.n_per_task,
                              np.random.default_rng(config.seed + 1))
    drop_rng = np.random.default_rng(config.seed + 2)

    task_cols = ",".join(f"loss_{t.value}" for t in config.tasks)
    log_path = run_dir / "train_log.csv"
    start = time.time()
    with open(log_path, "w") as log:
        log.write(f"step,lr,{task_cols},aggregate_loss,wall_time\n")
        for step in range(config.total_steps):
            batch = sampler.next_batch()
            try:
                losses, lr, _ = train_step(params, opt_state, batch, config, step, drop_rng)
            except NonFiniteLoss:
                dump = {"step": step, "config": config.to_dict()}
                (run_dir / "nonfinite_dump.json").write_text(json.dumps(dump, indent=2))
                raise
            aggregate = sum(losses.values()) / len(losses)
            per_task = ",".join(f"{losses[t]:.6f}" for t in config.tasks)
            log.write(f"{step},{lr:.8g},{per_task},{aggregate:.6f},{time.time() - start:.3f}\n")
            if not quiet and (step % log_every == 0 or step == config.total_steps - 1):
                print(f"[{run_dir.name}] step {step} lr {lr:.2e} loss {aggregate:.4f}",
                      flush=True)
            if config.checkpoint_every and (step + 1) % config.checkpoint_every == 0 \
                    and (step + 1) < config.total_steps:
                save_checkpoint(run_dir / f"ckpt_{step + 1:06d}.bin", params, step + 1,
                                config.seed)
    save_checkpoint(run_dir / "final.bin", params, config.total_steps, config.seed)
    return params
