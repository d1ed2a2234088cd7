"""Unified token space shared by every task.

One contiguous id range per token kind: control tokens first, then one
token per byte value, then one token per location bin. Text is encoded
at the byte level (UTF-8), coordinates are quantized into ``n_loc`` bins
over [0, 1]. The layout is immutable and serialized into checkpoint
manifests so decoding stays checkpoint-stable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import NonLocationToken, NonTextToken, OutOfRange

# Control ids. The 7 task tokens make the one-hot prompt a single symbol;
# the 19 group tokens back the structured-one-hot prompt variant
# (one id per (subprompt kind, format group), mapping owned by `prompts`).
PAD = 0
BOS = 1
EOS = 2
SEP = 3
TASK_TOKEN_BASE = 4
N_TASKS = 7
GROUP_TOKEN_BASE = TASK_TOKEN_BASE + N_TASKS  # 11
N_GROUP_TOKENS = 19
N_CONTROL = GROUP_TOKEN_BASE + N_GROUP_TOKENS  # 30

N_TEXT = 256


@dataclass(frozen=True)
class UnifiedVocab:
    """Layout of the shared token space. Immutable after construction."""

    n_loc: int = 100

    @property
    def n_control(self) -> int:
        return N_CONTROL

    @property
    def n_text(self) -> int:
        return N_TEXT

    @property
    def text_base(self) -> int:
        return N_CONTROL

    @property
    def loc_base(self) -> int:
        return N_CONTROL + N_TEXT

    @property
    def total_size(self) -> int:
        return N_CONTROL + N_TEXT + self.n_loc

    def task_token(self, task_index: int) -> int:
        if not 0 <= task_index < N_TASKS:
            raise IndexError(f"task index {task_index} out of range")
        return TASK_TOKEN_BASE + task_index

    def group_token(self, group_index: int) -> int:
        if not 0 <= group_index < N_GROUP_TOKENS:
            raise IndexError(f"group token index {group_index} out of range")
        return GROUP_TOKEN_BASE + group_index

    def encode_text(self, s: str) -> list[int]:
        """One token per byte of the UTF-8 encoding."""
        base = self.text_base
        return [base + b for b in s.encode("utf-8")]

    def decode_text(self, tokens: list[int]) -> str:
        """Inverse of encode_text; invalid UTF-8 runs become U+FFFD."""
        base = self.text_base
        out = bytearray()
        for t in tokens:
            if not base <= t < base + N_TEXT:
                raise NonTextToken(f"token {t} outside text range")
            out.append(t - base)
        return out.decode("utf-8", errors="replace")

    def quantize_coord(self, v: float) -> int:
        """Map a normalized coordinate to a location token (1.0 clamps into the top bin)."""
        if not 0.0 <= v <= 1.0:
            raise OutOfRange(f"coordinate {v} outside [0, 1]")
        return self.loc_base + min(math.floor(v * self.n_loc), self.n_loc - 1)

    def dequantize_coord(self, t: int) -> float:
        """Bin center of a location token."""
        if not self.loc_base <= t < self.total_size:
            raise NonLocationToken(f"token {t} outside location range")
        return (t - self.loc_base + 0.5) / self.n_loc

    def is_text(self, t: int) -> bool:
        return self.text_base <= t < self.loc_base

    def is_location(self, t: int) -> bool:
        return self.loc_base <= t < self.total_size

    def classify(self, t: int) -> tuple[str, int]:
        """Map a token id to its unique (kind, value) pair."""
        if 0 <= t < N_CONTROL:
            return ("control", t)
        if t < self.loc_base:
            return ("text", t - self.text_base)
        if t < self.total_size:
            return ("location", t - self.loc_base)
        raise IndexError(f"token {t} outside vocabulary of size {self.total_size}")

    def describe(self, t: int) -> str:
        """Human-readable form of a token, for CLI inspection."""
        kind, value = self.classify(t)
        if kind == "text":
            ch = chr(value)
            return repr(ch) if ch.isprintable() else f"byte:{value:#04x}"
        if kind == "location":
            return f"loc:{value}"
        names = {PAD: "PAD", BOS: "BOS", EOS: "EOS", SEP: "SEP"}
        if t in names:
            return names[t]
        if TASK_TOKEN_BASE <= t < GROUP_TOKEN_BASE:
            return f"task:{t - TASK_TOKEN_BASE}"
        return f"group:{t - GROUP_TOKEN_BASE}"

    def layout(self) -> dict:
        """Range boundaries for checkpoint manifests."""
        return {
            "n_control": N_CONTROL,
            "n_text": N_TEXT,
            "n_loc": self.n_loc,
            "total_size": self.total_size,
        }
