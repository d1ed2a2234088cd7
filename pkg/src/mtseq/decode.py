"""Greedy autoregressive generation with optional constrained decoding.

Closed-set tasks decode under a prefix trie over the tokenized label set:
at every step the logits are masked to the trie children of the current
prefix (EOS allowed exactly when the prefix completes a label), so the
output is a set member by construction. Grounding and detection use
coordinate-position constraints built from the same interface.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyLabelSet, InvalidPrefix
from .model import InferenceSession, ModelParams
from .synth import EncoderInput
from .vocab import BOS, EOS, UnifiedVocab


class _Node:
    __slots__ = ("children", "terminal")

    def __init__(self):
        self.children: dict[int, _Node] = {}
        self.terminal = False


class LabelTrie:
    """Prefix tree over tokenized labels; EOS is the terminal edge."""

    def __init__(self, labels, vocab: UnifiedVocab):
        labels = list(labels)
        if not labels:
            raise EmptyLabelSet("label set is empty")
        self.root = _Node()
        self.n_labels = len(labels)
        for label in labels:
            tokens = vocab.encode_text(label)
            if not tokens:
                raise EmptyLabelSet(f"label {label!r} tokenizes to nothing")
            node = self.root
            for t in tokens:
                node = node.children.setdefault(t, _Node())
            node.terminal = True

    def _walk(self, prefix) -> _Node:
        node = self.root
        for t in prefix:
            node = node.children.get(t)
            if node is None:
                raise InvalidPrefix(f"token {t} leaves the trie")
        return node

    def allowed_next(self, prefix) -> frozenset[int]:
        """Token ids that may follow the prefix; includes EOS at completed labels."""
        node = self._walk(prefix)
        allowed = set(node.children)
        if node.terminal:
            allowed.add(EOS)
        return frozenset(allowed)

    def accepts(self, tokens) -> bool:
        """True iff tokens spell exactly one label (no trailing EOS expected)."""
        try:
            return self._walk(tokens).terminal
        except InvalidPrefix:
            return False


def build_trie(labels, vocab: UnifiedVocab) -> LabelTrie:
    return LabelTrie(labels, vocab)


def allowed_next(trie: LabelTrie, prefix) -> frozenset[int]:
    return trie.allowed_next(prefix)


class BoxConstraint:
    """Exactly one box: four location tokens, then EOS."""

    def __init__(self, vocab: UnifiedVocab):
        self.loc_range = frozenset(range(vocab.loc_base, vocab.total_size))

    def allowed_next(self, prefix) -> frozenset[int]:
        if len(prefix) > 4 or any(t not in self.loc_range for t in prefix):
            raise InvalidPrefix("prefix is not a partial box")
        return self.loc_range if len(prefix) < 4 else frozenset({EOS})


class DetectionConstraint:
    """Repeated (four location tokens + class name) groups, then EOS."""

    def __init__(self, labels, vocab: UnifiedVocab):
        if not labels:
            raise EmptyLabelSet("label set is empty")
        self.loc_range = frozenset(range(vocab.loc_base, vocab.total_size))
        self.root = _Node()
        for label in labels:
            node = self.root
            for t in vocab.encode_text(label):
                node = node.children.setdefault(t, _Node())
            node.terminal = True

    def allowed_next(self, prefix) -> frozenset[int]:
        in_box, state = True, 0
        node = self.root
        for t in prefix:
            if in_box:
                if t not in self.loc_range:
                    raise InvalidPrefix("expected a location token")
                state += 1
                if state == 4:
                    in_box, node = False, self.root
            else:
                if t in node.children:
                    node = node.children[t]
                elif node.terminal and t in self.loc_range:
                    in_box, state = True, 1
                else:
                    raise InvalidPrefix(f"token {t} breaks the detection grammar")
        if in_box:
            return self.loc_range
        allowed = set(node.children)
        if node.terminal:
            allowed.add(EOS)
            allowed |= self.loc_range
        return frozenset(allowed)


@dataclass
class GenerationResult:
    tokens: list[int]          # body, EOS excluded
    ended: bool                # False when truncated at max_len
    allowed_sizes: list[int] | None = None  # per-step allowed-set sizes (constrained only)


def generate(params: ModelParams, enc_input: EncoderInput, constraint=None,
             max_len: int = 64) -> GenerationResult:
    """Greedy decode; ties break toward the lowest token id."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    session = InferenceSession(params, enc_input)
    logits = session.step(BOS)
    tokens: list[int] = []
    sizes: list[int] | None = [] if constraint is not None else None
    for _ in range(max_len):
        if constraint is not None:
            allowed = sorted(constraint.allowed_next(tuple(tokens)))
            sizes.append(len(allowed))
            masked = np.full_like(logits, -np.inf)
            masked[allowed] = logits[allowed]
            nxt = int(np.argmax(masked))
        else:
            nxt = int(np.argmax(logits))
        if nxt == EOS:
            return GenerationResult(tokens, ended=True, allowed_sizes=sizes)
        tokens.append(nxt)
        logits = session.step(nxt)
    return GenerationResult(tokens, ended=False, allowed_sizes=sizes)
