"""Synthetic seven-task suite over grid scenes.

Every sample is expressed in the unified token space: grounding and
detection emit location tokens, the text tasks emit byte tokens, and
closed-set tasks (classification, entailment, VQA) carry a label-set id
for constrained decoding. (task, seed) fully determines a sample.

Entailment truth rules: a premise asserting objects ("there is a red
square.") is yes iff every asserted object is in the scene and no
otherwise; a hedge premise about an unmodeled attribute ("the red square
looks shiny.") is maybe when the object exists and no when it does not.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

import numpy as np

from .errors import SequenceTooLong, UnknownTask
from .prompts import IMAGE_TASKS, TEXT_TASKS, Task
from .scenes import CLASS_NAMES, COLORS, GRID, SHAPES, Scene, gen_scene, render_patches
from .vocab import BOS, EOS, SEP, UnifiedVocab

ENTAILMENT_LABELS = ("yes", "no", "maybe")
HEDGE_ADJECTIVES = ("shiny", "soft", "warm")
SIZE_ADJECTIVES = ("small", "big", "tall", "wide")

CLOSED_SETS: dict[str, tuple[str, ...]] = {
    "classes": CLASS_NAMES,
    "entailment": ENTAILMENT_LABELS,
    "colors": COLORS,
}

TASK_CLOSED_SET = {
    Task.CLASSIFICATION: "classes",
    Task.ENTAILMENT: "entailment",
    Task.VQA: "colors",
}

# Disjoint seed ranges per split; recorded in every resolved config.
SPLIT_SEED_BASE = {"train": 0, "val": 10_000_000, "test": 20_000_000}


@dataclass
class TaskSample:
    task: Task
    seed: int
    prompt_instance: str | None
    patches: np.ndarray | None  # (n_patches, d_model) or None
    target: list[int]  # ends with EOS
    closed_set: str | None
    meta: dict = field(default_factory=dict)


def _join_names(names: list[str]) -> str:
    items = [f"a {n}" for n in names]
    if len(items) == 1:
        return items[0]
    return ", ".join(items[:-1]) + " and " + items[-1]


def caption_sentence(scene: Scene) -> str:
    return "there is " + _join_names([o.name for o in scene.scan_order()]) + "."


def summary_sentence(names: list[str]) -> str:
    return "the text describes " + _join_names(names) + "."


def entailment_label(scene: Scene, premise: str) -> str:
    """Truth value of a premise under the rules in the module docstring."""
    premise = premise.strip()
    if premise.startswith("the ") and " looks " in premise:
        body = premise.removeprefix("the ").removesuffix(".")
        name, _, adjective = body.partition(" looks ")
        if adjective not in HEDGE_ADJECTIVES:
            raise ValueError(f"unknown hedge premise {premise!r}")
        color, _, shape = name.partition(" ")
        return "maybe" if scene.find(color, shape) else "no"
    if premise.startswith("there is "):
        body = premise.removeprefix("there is ").removesuffix(".")
        names = [p.removeprefix("a ") for part in body.split(" and ")
                 for p in part.split(", ")]
        for name in names:
            color, _, shape = name.partition(" ")
            if not scene.find(color, shape):
                return "no"
        return "yes"
    raise ValueError(f"premise {premise!r} not in the generator grammar")


def _box_tokens(obj, vocab: UnifiedVocab) -> list[int]:
    return [vocab.quantize_coord(v) for v in (obj.x0, obj.y0, obj.x1, obj.y1)]


def make_sample(task: Task, seed: int, vocab: UnifiedVocab, d_model: int) -> TaskSample:
    """Build one sample; deterministic in (task, seed)."""
    if not isinstance(task, Task):
        raise UnknownTask(f"unknown task {task!r}")
    rng = random.Random((seed * 7 + task.index) * 2654435761 % (2 ** 31))
    scene = gen_scene(seed * 7 + task.index) if task in IMAGE_TASKS else None
    patches = render_patches(scene, d_model) if scene is not None else None

    instance: str | None = None
    meta: dict = {}

    if task is Task.GROUNDING:
        obj = rng.choice(scene.objects)
        matches = scene.find(obj.color, obj.shape)
        assert len(matches) == 1, "referent must be unique"
        instance = f"the {obj.name}"
        target = _box_tokens(obj, vocab)
        meta["box"] = (obj.x0, obj.y0, obj.x1, obj.y1)
    elif task is Task.DETECTION:
        target = []
        gold = []
        for obj in scene.scan_order():
            target.extend(_box_tokens(obj, vocab))
            target.extend(vocab.encode_text(obj.name))
            gold.append(((obj.x0, obj.y0, obj.x1, obj.y1), obj.name))
        meta["objects"] = gold
    elif task is Task.CLASSIFICATION:
        largest = max(scene.objects, key=lambda o: o.area)
        target = vocab.encode_text(largest.name)
        meta["text"] = largest.name
    elif task is Task.CAPTION:
        text = caption_sentence(scene)
        target = vocab.encode_text(text)
        meta["text"] = text
    elif task is Task.ENTAILMENT:
        label = rng.choice(ENTAILMENT_LABELS)
        if label == "yes":
            obj = rng.choice(scene.objects)
            instance = f"there is a {obj.name}."
        elif label == "no":
            absent = [(c, s) for s in {o.shape for o in scene.objects}
                      for c in COLORS if not scene.find(c, s)]
            color, shape = rng.choice(sorted(absent))
            instance = f"there is a {color} {shape}."
        else:
            obj = rng.choice(scene.objects)
            adjective = rng.choice(HEDGE_ADJECTIVES)
            instance = f"the {obj.name} looks {adjective}."
        assert entailment_label(scene, instance) == label
        target = vocab.encode_text(label)
        meta["text"] = label
    elif task is Task.VQA:
        shapes = [o.shape for o in scene.objects]
        unique = sorted(s for s in set(shapes) if shapes.count(s) == 1)
        shape = rng.choice(unique)
        (obj,) = [o for o in scene.objects if o.shape == shape]
        instance = f"what color is the {shape}?"
        target = vocab.encode_text(obj.color)
        meta["text"] = obj.color
    elif task is Task.SUMMARIZATION:
        k = rng.randint(2, 4)
        combos = rng.sample([(s, c) for s in SHAPES for c in COLORS], k)
        names = [f"{c} {s}" for s, c in combos]
        sentences = []
        for name in names:
            size = rng.choice(SIZE_ADJECTIVES)
            sentences.append(f"there is a {name}. the {name} is {size}.")
        instance = " ".join(sentences)
        text = summary_sentence(names)
        target = vocab.encode_text(text)
        meta["text"] = text
    else:  # pragma: no cover
        raise UnknownTask(f"unknown task {task!r}")

    return TaskSample(
        task=task,
        seed=seed,
        prompt_instance=instance,
        patches=patches,
        target=target + [EOS],
        closed_set=TASK_CLOSED_SET.get(task),
        meta=meta,
    )


@dataclass
class EncoderInput:
    """Token/patch slot sequence: [BOS] prompt [SEP] patches [EOS].

    ``ids`` uses -1 at patch slots; ``patches`` carries the raw vectors
    for those slots in order.
    """

    ids: np.ndarray  # (L,) int64, -1 marks patch slots
    patches: np.ndarray | None  # (n_patches, d_model)

    def __len__(self) -> int:
        return len(self.ids)


PATCH_SLOT = -1


def assemble_encoder_input(
    prompt_tokens: list[int],
    patches: np.ndarray | None,
    max_len: int = 512,
) -> EncoderInput:
    """Concatenate prompt tokens and patch vectors into one input sequence."""
    n_patches = 0 if patches is None else len(patches)
    total = len(prompt_tokens) + n_patches + 3
    if total > max_len:
        raise SequenceTooLong(f"sequence length {total} exceeds max {max_len}")
    ids = np.concatenate([
        [BOS],
        np.asarray(prompt_tokens, dtype=np.int64),
        [SEP],
        np.full(n_patches, PATCH_SLOT, dtype=np.int64),
        [EOS],
    ]).astype(np.int64)
    return EncoderInput(ids=ids, patches=patches)


def parse_box(tokens: list[int], vocab: UnifiedVocab) -> tuple[float, float, float, float] | None:
    """Dequantize a 4-location-token sequence; None when malformed."""
    body = [t for t in tokens if t != EOS]
    if len(body) != 4 or not all(vocab.is_location(t) for t in body):
        return None
    x0, y0, x1, y1 = (vocab.dequantize_coord(t) for t in body)
    if not (x0 < x1 and y0 < y1):
        return None
    return (x0, y0, x1, y1)


def parse_detections(tokens: list[int], vocab: UnifiedVocab):
    """Split a detection sequence into (box, label) pairs; None when malformed."""
    body = [t for t in tokens if t != EOS]
    out = []
    i = 0
    while i < len(body):
        box = body[i:i + 4]
        if len(box) != 4 or not all(vocab.is_location(t) for t in box):
            return None
        i += 4
        text = []
        while i < len(body) and vocab.is_text(body[i]):
            text.append(body[i])
            i += 1
        if not text:
            return None
        parsed = parse_box(box, vocab)
        if parsed is None:
            return None
        out.append((parsed, vocab.decode_text(text)))
    return out if out else None


def build_split(task: Task, split: str, n: int, vocab: UnifiedVocab, d_model: int,
                offset: int = 0) -> list[TaskSample]:
    """Samples for a split; seed ranges are disjoint across splits."""
    base = SPLIT_SEED_BASE[split] + offset
    return [make_sample(task, base + i, vocab, d_model) for i in range(n)]
