"""Task prompt templates and rendering.

Each task carries a five-part structured prompt (data description, input
format, output format, output description, instance prompt) loaded from
plain-text assets. ``render_prompt`` compiles a (variant, task, instance
text) triple into token ids; the structured variant joins the five parts
with SEP, the base variant is the instance prompt alone, the one-hot
variant is a single task token, and the structured-one-hot variant keeps
the SEP skeleton but swaps each descriptive part for a per-format-group
control token. Everything here is a pure function of its arguments.
"""

from __future__ import annotations

import enum
import string
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources

from ..errors import MissingInstanceText, UnexpectedInstanceText, UnknownTask
from ..vocab import SEP, UnifiedVocab


class Task(enum.Enum):
    """The seven supported tasks, in canonical iteration order."""

    CAPTION = "caption"
    GROUNDING = "grounding"
    ENTAILMENT = "entailment"
    VQA = "vqa"
    CLASSIFICATION = "classification"
    SUMMARIZATION = "summarization"
    DETECTION = "detection"

    @property
    def index(self) -> int:
        return TASK_ORDER.index(self)

    @classmethod
    def parse(cls, name: str) -> "Task":
        try:
            return cls(name.strip().lower())
        except ValueError:
            raise UnknownTask(f"unknown task {name!r}") from None


TASK_ORDER: tuple[Task, ...] = tuple(Task)

# Tasks whose encoder input carries instance text.
TEXT_TASKS = frozenset({Task.GROUNDING, Task.ENTAILMENT, Task.VQA, Task.SUMMARIZATION})
# Tasks whose encoder input carries an image (patch grid).
IMAGE_TASKS = frozenset(Task) - {Task.SUMMARIZATION}


class SubpromptKind(enum.Enum):
    DATA_DESCRIPTION = "data_description"
    INPUT_FORMAT = "input_format"
    OUTPUT_FORMAT = "output_format"
    OUTPUT_DESCRIPTION = "output_description"
    INSTANCE_PROMPT = "instance_prompt"


SUBPROMPT_ORDER: tuple[SubpromptKind, ...] = tuple(SubpromptKind)


class DropUnit(enum.Enum):
    """Ablatable prompt units; input and output format ablate together."""

    DATA_DESCRIPTION = "data_description"
    IO_FORMAT = "io_format"
    OUTPUT_DESCRIPTION = "output_description"
    INSTANCE_PROMPT = "instance_prompt"


_DROP_TO_KINDS = {
    DropUnit.DATA_DESCRIPTION: (SubpromptKind.DATA_DESCRIPTION,),
    DropUnit.IO_FORMAT: (SubpromptKind.INPUT_FORMAT, SubpromptKind.OUTPUT_FORMAT),
    DropUnit.OUTPUT_DESCRIPTION: (SubpromptKind.OUTPUT_DESCRIPTION,),
    DropUnit.INSTANCE_PROMPT: (SubpromptKind.INSTANCE_PROMPT,),
}


@dataclass(frozen=True)
class PromptTemplate:
    task: Task
    data_description: str
    input_format: str
    output_format: str
    output_description: str
    instance_prompt: str

    def part(self, kind: SubpromptKind) -> str:
        return getattr(self, kind.value)


class VariantKind(enum.Enum):
    STRUCTURED = "structured"
    BASE = "base"
    ONE_HOT = "onehot"
    STRUCTURED_ONE_HOT = "structured-onehot"
    ABLATED = "ablated"


@dataclass(frozen=True)
class PromptVariant:
    kind: VariantKind
    drop: frozenset[DropUnit] = field(default_factory=frozenset)

    def __post_init__(self):
        if self.kind is not VariantKind.ABLATED and self.drop:
            raise ValueError("drop set only applies to the ablated variant")
        if self.kind is VariantKind.ABLATED and len(self.drop) >= len(DropUnit):
            raise ValueError("ablation must keep at least one subprompt")

    @property
    def label(self) -> str:
        if self.kind is VariantKind.ABLATED:
            dropped = ",".join(sorted(u.value for u in self.drop))
            return f"ablated[-{dropped}]"
        return self.kind.value


STRUCTURED = PromptVariant(VariantKind.STRUCTURED)
BASE = PromptVariant(VariantKind.BASE)
ONE_HOT = PromptVariant(VariantKind.ONE_HOT)
STRUCTURED_ONE_HOT = PromptVariant(VariantKind.STRUCTURED_ONE_HOT)


def ablated(*units: DropUnit) -> PromptVariant:
    return PromptVariant(VariantKind.ABLATED, frozenset(units))


def parse_variant(spec: str) -> PromptVariant:
    """Parse a CLI variant spec, e.g. 'structured' or 'ablated:-io_format,-instance_prompt'."""
    spec = spec.strip().lower()
    if spec.startswith("ablated"):
        _, _, rest = spec.partition(":")
        units = []
        for piece in filter(None, (p.strip() for p in rest.split(","))):
            units.append(DropUnit(piece.lstrip("-").replace("-", "_")))
        return ablated(*units)
    for kind in VariantKind:
        if kind.value == spec:
            if kind is VariantKind.ABLATED:
                break
            return PromptVariant(kind)
    raise ValueError(f"unknown prompt variant {spec!r}")


@lru_cache(maxsize=None)
def _load_asset(name: str) -> str:
    ref = resources.files(__package__).joinpath("assets", name)
    return ref.read_text(encoding="utf-8").rstrip("\n")


@lru_cache(maxsize=None)
def template_for(task: Task) -> PromptTemplate:
    """The embedded five-part template for a task."""
    if not isinstance(task, Task):
        raise UnknownTask(f"unknown task {task!r}")
    parts = {k.value: _load_asset(f"{task.value}.{k.value}.txt") for k in SubpromptKind}
    return PromptTemplate(task=task, **parts)


def instance_prompt_text(task: Task, instance_text: str | None) -> str:
    """Instance prompt with the instance text substituted into its slot."""
    template = template_for(task).instance_prompt
    has_slot = any(f[1] == "text" for f in string.Formatter().parse(template))
    if task in TEXT_TASKS:
        if instance_text is None:
            raise MissingInstanceText(f"{task.value} requires instance text")
        assert has_slot, f"{task.value} instance prompt asset lacks a {{text}} slot"
        return template.format(text=instance_text)
    if instance_text is not None:
        raise UnexpectedInstanceText(f"{task.value} does not take instance text")
    return template


def shared_format_groups() -> tuple[frozenset[Task], ...]:
    """Partition of tasks by output-format homogeneity.

    Detection and grounding both emit coordinate sequences; every other
    task emits free text.
    """
    boxes = frozenset({Task.DETECTION, Task.GROUNDING})
    return (boxes, frozenset(Task) - boxes)


def _input_format_groups() -> tuple[frozenset[Task], ...]:
    # Grouped by input signature: image only / text + image / text only.
    return (
        frozenset({Task.CAPTION, Task.CLASSIFICATION, Task.DETECTION}),
        frozenset({Task.GROUNDING, Task.ENTAILMENT, Task.VQA}),
        frozenset({Task.SUMMARIZATION}),
    )


def subprompt_groups(kind: SubpromptKind) -> tuple[frozenset[Task], ...]:
    """Format-sharing groups per subprompt kind (one control token per group)."""
    if kind is SubpromptKind.OUTPUT_FORMAT:
        return shared_format_groups()
    if kind is SubpromptKind.INPUT_FORMAT:
        return _input_format_groups()
    # Data and output descriptions are dataset-specific: one group per task.
    return tuple(frozenset({t}) for t in TASK_ORDER)


@lru_cache(maxsize=None)
def _group_token_index(kind: SubpromptKind, task: Task) -> int:
    """Stable index of the (kind, group) control token within the reserved block."""
    offset = 0
    for k in (SubpromptKind.DATA_DESCRIPTION, SubpromptKind.INPUT_FORMAT,
              SubpromptKind.OUTPUT_FORMAT, SubpromptKind.OUTPUT_DESCRIPTION):
        groups = subprompt_groups(k)
        if k is kind:
            for gi, group in enumerate(groups):
                if task in group:
                    return offset + gi
            raise AssertionError("groups do not cover all tasks")
        offset += len(groups)
    raise ValueError(f"{kind} has no group token")


def render_prompt(
    variant: PromptVariant,
    task: Task,
    instance_text: str | None,
    vocab: UnifiedVocab,
) -> list[int]:
    """Compile (variant, task, instance text) into prompt token ids."""
    if not isinstance(task, Task):
        raise UnknownTask(f"unknown task {task!r}")
    template = template_for(task)

    if variant.kind is VariantKind.ONE_HOT:
        if task in TEXT_TASKS and instance_text is None:
            raise MissingInstanceText(f"{task.value} requires instance text")
        if task not in TEXT_TASKS and instance_text is not None:
            raise UnexpectedInstanceText(f"{task.value} does not take instance text")
        tokens = [vocab.task_token(task.index)]
        if instance_text is not None:
            tokens.extend(vocab.encode_text(instance_text))
        return tokens

    ip_tokens = vocab.encode_text(instance_prompt_text(task, instance_text))

    if variant.kind is VariantKind.BASE:
        return ip_tokens

    dropped_kinds: set[SubpromptKind] = set()
    for unit in variant.drop:
        dropped_kinds.update(_DROP_TO_KINDS[unit])

    pieces: list[list[int]] = []
    for kind in SUBPROMPT_ORDER:
        if kind in dropped_kinds:
            continue
        if kind is SubpromptKind.INSTANCE_PROMPT:
            pieces.append(ip_tokens)
        elif variant.kind is VariantKind.STRUCTURED_ONE_HOT:
            pieces.append([vocab.group_token(_group_token_index(kind, task))])
        else:
            pieces.append(vocab.encode_text(template.part(kind)))

    tokens: list[int] = []
    for i, piece in enumerate(pieces):
        if i:
            tokens.append(SEP)
        tokens.extend(piece)
    return tokens
