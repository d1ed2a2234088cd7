"""Task metrics with exactly specified, fixture-pinned formulas.

Text metrics lowercase and whitespace-tokenize. BLEU@4 smooths an n-gram
order only when the candidate has no n-grams of that order (precision
(0+1)/(0+1)); ROUGE F1 uses beta = 1; CIDEr-lite scores 10 x the mean
cosine similarity of TF-IDF n-gram vectors (n = 1..4) with IDF taken over
the evaluation reference corpus and no length penalty. Malformed
generations score zero rather than raising.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field

from .errors import DegenerateBox, EmptyCorpus
from .synth import parse_box
from .vocab import UnifiedVocab

Box = tuple[float, float, float, float]


def _check_box(b: Box) -> None:
    x0, y0, x1, y1 = b
    if not (0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0):
        raise DegenerateBox(f"invalid box {b}")


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 for disjoint boxes."""
    _check_box(a)
    _check_box(b)
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def grounding_accuracy(predictions: list[list[int]], gold_boxes: list[Box],
                       vocab: UnifiedVocab, threshold: float = 0.5) -> float:
    """Fraction of predictions decoding to a box with IoU >= threshold.

    Malformed predictions (wrong arity, non-location tokens, inverted
    corners) count as wrong.
    """
    assert len(predictions) == len(gold_boxes)
    if not predictions:
        return 0.0
    correct = 0
    for tokens, gold in zip(predictions, gold_boxes):
        box = parse_box(tokens, vocab)
        if box is not None and iou(box, gold) >= threshold:
            correct += 1
    return correct / len(predictions)


def exact_match_accuracy(predictions: list[str], golds: list[str]) -> float:
    assert len(predictions) == len(golds)
    if not predictions:
        return 0.0
    return sum(p == g for p, g in zip(predictions, golds)) / len(predictions)


def _tokens(s: str) -> list[str]:
    return s.lower().split()


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu4(candidate: str, references: list[str]) -> float:
    """Smoothed BLEU@4 against one or more references."""
    cand = _tokens(candidate)
    refs = [_tokens(r) for r in references if r.strip()]
    if not cand or not refs:
        return 0.0
    c = len(cand)
    r = min((abs(len(t) - c), len(t)) for t in refs)[1]
    log_sum = 0.0
    for n in range(1, 5):
        counts = _ngrams(cand, n)
        total = sum(counts.values())
        if total == 0:
            continue  # no n-grams of this order: smoothed precision (0+1)/(0+1) = 1
        max_ref = Counter()
        for t in refs:
            for gram, cnt in _ngrams(t, n).items():
                max_ref[gram] = max(max_ref[gram], cnt)
        clipped = sum(min(cnt, max_ref[gram]) for gram, cnt in counts.items())
        if clipped == 0:
            return 0.0
        log_sum += math.log(clipped / total)
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return bp * math.exp(log_sum / 4.0)


def _f1(precision: float, recall: float) -> float:
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def rouge_n(candidate: str, reference: str, n: int) -> float:
    """ROUGE-N F1 (clipped n-gram overlap)."""
    cand = _ngrams(_tokens(candidate), n)
    ref = _ngrams(_tokens(reference), n)
    total_c, total_r = sum(cand.values()), sum(ref.values())
    if total_c == 0 or total_r == 0:
        return 0.0
    overlap = sum(min(cnt, ref[gram]) for gram, cnt in cand.items())
    return _f1(overlap / total_c, overlap / total_r)


def _lcs_len(a: list[str], b: list[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[-1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, reference: str) -> float:
    """ROUGE-L F1 via longest common subsequence."""
    cand, ref = _tokens(candidate), _tokens(reference)
    if not cand or not ref:
        return 0.0
    lcs = _lcs_len(cand, ref)
    return _f1(lcs / len(cand), lcs / len(ref))


def _tfidf_vecs(tokens: list[str], idf: list[dict], max_n: int = 4):
    vecs = []
    for n in range(1, max_n + 1):
        counts = _ngrams(tokens, n)
        vecs.append({g: cnt * idf[n - 1].get(g, idf[n - 1]["__unseen__"])
                     for g, cnt in counts.items()})
    return vecs


def _cosine(u: dict, v: dict) -> float:
    nu = math.sqrt(sum(x * x for x in u.values()))
    nv = math.sqrt(sum(x * x for x in v.values()))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    dot = sum(x * v[g] for g, x in u.items() if g in v)
    return dot / (nu * nv)


def cider_lite(candidates: list[str], references: list[list[str]],
               corpus: list[str] | None = None) -> float:
    """Corpus-mean CIDEr-lite; IDF computed over the evaluation reference set."""
    if corpus is None:
        corpus = [r for refs in references for r in refs]
    if not corpus:
        raise EmptyCorpus("CIDEr IDF corpus is empty")
    n_docs = len(corpus)
    idf = []
    for n in range(1, 5):
        df = Counter()
        for doc in corpus:
            df.update(set(_ngrams(_tokens(doc), n)))
        table = {g: math.log(n_docs / max(1, d)) for g, d in df.items()}
        table["__unseen__"] = math.log(n_docs / 1.0)
        idf.append(table)
    scores = []
    for cand, refs in zip(candidates, references):
        cv = _tfidf_vecs(_tokens(cand), idf)
        per_ref = []
        for ref in refs:
            rv = _tfidf_vecs(_tokens(ref), idf)
            per_ref.append(sum(_cosine(cv[n], rv[n]) for n in range(4)) / 4.0)
        scores.append(10.0 * sum(per_ref) / len(per_ref))
    return sum(scores) / len(scores) if scores else 0.0


Detection = tuple[Box, str]


def map_lite(predicted: list[list[Detection]], gold: list[list[Detection]],
             threshold: float = 0.5) -> tuple[float, float]:
    """(mAP, mAR) at one IoU threshold with greedy matching.

    Prediction order within a scene is the generation order and doubles as
    the confidence ranking. Classes are those present in the gold set.
    """
    assert len(predicted) == len(gold)
    classes = sorted({label for scene in gold for _, label in scene})
    if not classes:
        return (0.0, 0.0)
    aps, recalls = [], []
    for cls in classes:
        n_gold = sum(label == cls for scene in gold for _, label in scene)
        matched_flags = []
        used = [set() for _ in gold]
        for si, scene in enumerate(predicted):
            for box, label in scene:
                if label != cls:
                    continue
                best_iou, best_j = 0.0, None
                for j, (gbox, glabel) in enumerate(gold[si]):
                    if glabel != cls or j in used[si]:
                        continue
                    ov = iou(box, gbox)
                    if ov >= threshold and ov > best_iou:
                        best_iou, best_j = ov, j
                if best_j is not None:
                    used[si].add(best_j)
                    matched_flags.append(True)
                else:
                    matched_flags.append(False)
        tp = 0
        ap = 0.0
        for k, hit in enumerate(matched_flags, start=1):
            if hit:
                tp += 1
                ap += tp / k
        aps.append(ap / n_gold)
        recalls.append(tp / n_gold)
    return (sum(aps) / len(aps), sum(recalls) / len(recalls))


@dataclass
class MetricReport:
    """Per-task metric values plus the run fingerprint they came from."""

    per_task: dict[str, dict[str, float]] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    fingerprint: str = ""

    def to_json(self) -> str:
        return json.dumps({
            "fingerprint": self.fingerprint,
            "counts": self.counts,
            "metrics": self.per_task,
        }, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        raw = json.loads(text)
        return cls(per_task=raw["metrics"], counts=raw["counts"],
                   fingerprint=raw["fingerprint"])

    def csv_rows(self, variant: str, seed: int) -> list[str]:
        rows = []
        for task in sorted(self.per_task):
            for name in sorted(self.per_task[task]):
                rows.append(f"{task},{variant},{seed},{name},{self.per_task[task][name]:.6f}")
        return rows
