"""Cross-task similarity of prompt parts under a trained encoder.

Each subprompt text is pushed through the model's own encoder; the mean
final-layer state over its positions is the text's embedding, and tasks
are compared by cosine similarity, one 7x7 matrix per subprompt kind.
"""

from __future__ import annotations

import numpy as np

from .errors import ZeroVector
from .model import ModelParams, _encode
from .prompts import SUBPROMPT_ORDER, TASK_ORDER, SubpromptKind, Task, template_for
from .synth import assemble_encoder_input


def embed_subprompt(params: ModelParams, text: str) -> np.ndarray:
    """Mean final-layer encoder state over the text's positions (eval mode)."""
    vocab = params.vocab
    enc = assemble_encoder_input(vocab.encode_text(text), None, params.hyper.max_len)
    states, _ = _encode(params, [enc], train=False, rng=None)
    return np.asarray(states[0]).mean(axis=0)


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ZeroVector("degenerate embedding")
    return float(u @ v / (nu * nv))


def similarity_matrix(params: ModelParams, kind: SubpromptKind,
                      tasks: tuple[Task, ...] = TASK_ORDER) -> np.ndarray:
    """Entry (i, j): cosine similarity of tasks i and j's embedded subprompts."""
    embeds = [embed_subprompt(params, template_for(t).part(kind)) for t in tasks]
    n = len(tasks)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i, n):
            out[i, j] = out[j, i] = cosine(embeds[i], embeds[j])
    return out


def all_similarity_matrices(params: ModelParams) -> dict[SubpromptKind, np.ndarray]:
    return {kind: similarity_matrix(params, kind) for kind in SUBPROMPT_ORDER}


def matrix_csv(matrix: np.ndarray, tasks: tuple[Task, ...] = TASK_ORDER) -> str:
    """8x8 CSV including a header row and column of task names."""
    names = [t.value for t in tasks]
    lines = ["task," + ",".join(names)]
    for name, row in zip(names, matrix):
        lines.append(name + "," + ",".join(f"{v:.9f}" for v in row))
    return "\n".join(lines) + "\n"
