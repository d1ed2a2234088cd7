"""Encoder-decoder transformer over the unified token space.

Pre-norm blocks; self-attention adds a learned per-head relative-position
bias (clipped at a fixed distance) to the content scores and scales each
head's output by a learned scalar before the output projection. Decoder
blocks add cross-attention (no positional term). The output head is tied
to the token embedding and scaled by 1/sqrt(d_model). All math is float64.

Two execution paths share the same weights: the taped ``forward`` used for
training/eval logits, and ``InferenceSession`` which decodes greedily with
cached encoder states and decoder KV. A test pins them together.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import InvalidHyper, SequenceTooLong, ShapeMismatch
from .synth import PATCH_SLOT, EncoderInput
from .vocab import BOS, PAD, UnifiedVocab

NEG = -1e30


@dataclass(frozen=True)
class Hyper:
    d_model: int = 64
    n_heads: int = 4
    n_enc: int = 2
    n_dec: int = 2
    d_ff: int = 256
    rel_clip: int = 32
    max_len: int = 512
    dropout: float = 0.1

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def validate(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise InvalidHyper(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if min(self.d_model, self.n_heads, self.n_enc, self.n_dec, self.d_ff) < 1:
            raise InvalidHyper("all dimensions must be positive")
        if self.max_len < 4:
            raise InvalidHyper("max_len too small")

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model, "n_heads": self.n_heads,
            "n_enc": self.n_enc, "n_dec": self.n_dec, "d_ff": self.d_ff,
            "rel_clip": self.rel_clip, "max_len": self.max_len,
            "dropout": self.dropout,
        }


class ModelParams:
    """Named parameter tensors in a fixed, checkpoint-stable order."""

    def __init__(self, hyper: Hyper, vocab: UnifiedVocab, tensors: dict[str, Tensor]):
        self.hyper = hyper
        self.vocab = vocab
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors.keys())

    def n_scalars(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def collect_grads(self) -> dict[str, np.ndarray]:
        """Gradients accumulated by backward; zero for untouched params. Resets."""
        out = {}
        for name, t in self.tensors.items():
            out[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
            t.grad = None
        return out


def init_params(hyper: Hyper, vocab: UnifiedVocab, seed: int) -> ModelParams:
    """Xavier-uniform matrices, unit norm gains, zero biases/position tables."""
    hyper.validate()
    rng = np.random.default_rng(seed)
    d, ff, h = hyper.d_model, hyper.d_ff, hyper.n_heads
    tensors: dict[str, Tensor] = {}

    def mat(name, fan_in, fan_out, shape=None):
        a = math.sqrt(6.0 / (fan_in + fan_out))
        tensors[name] = Tensor(rng.uniform(-a, a, shape or (fan_in, fan_out)))

    def vec(name, size, value=0.0):
        tensors[name] = Tensor(np.full(size, value))

    def ln(prefix):
        vec(f"{prefix}.g", d, 1.0)
        vec(f"{prefix}.b", d, 0.0)

    def attn(prefix, positional):
        for w in ("wq", "wk", "wv", "wo"):
            mat(f"{prefix}.{w}", d, d)
        for b in ("bq", "bk", "bv", "bo"):
            vec(f"{prefix}.{b}", d)
        vec(f"{prefix}.scale", h, 1.0)
        if positional:
            vec(f"{prefix}.rel", (h, 2 * hyper.rel_clip + 1), 0.0)

    mat("embed", vocab.total_size, d, (vocab.total_size, d))
    mat("patch_w", d, d)
    vec("patch_b", d)
    for i in range(hyper.n_enc):
        ln(f"enc{i}.ln1")
        attn(f"enc{i}.attn", positional=True)
        ln(f"enc{i}.ln2")
        mat(f"enc{i}.ffn.w1", d, ff)
        vec(f"enc{i}.ffn.b1", ff)
        mat(f"enc{i}.ffn.w2", ff, d)
        vec(f"enc{i}.ffn.b2", d)
    for i in range(hyper.n_dec):
        ln(f"dec{i}.ln1")
        attn(f"dec{i}.self", positional=True)
        ln(f"dec{i}.ln2")
        attn(f"dec{i}.cross", positional=False)
        ln(f"dec{i}.ln3")
        mat(f"dec{i}.ffn.w1", d, ff)
        vec(f"dec{i}.ffn.b1", ff)
        mat(f"dec{i}.ffn.w2", ff, d)
        vec(f"dec{i}.ffn.b2", d)
    ln("enc_ln")
    ln("dec_ln")
    return ModelParams(hyper, vocab, tensors)


@lru_cache(maxsize=64)
def _rel_idx(tq: int, tk: int, clip: int) -> np.ndarray:
    rel = np.arange(tk)[None, :] - np.arange(tq)[:, None]
    return (np.clip(rel, -clip, clip) + clip).astype(np.int64)


@lru_cache(maxsize=16)
def _causal_mask(t: int) -> np.ndarray:
    m = np.zeros((t, t))
    m[np.triu_indices(t, k=1)] = NEG
    return m


def attention_core(q, k, v, pos_scores, mask, head_scale=None):
    """softmax(q kT / sqrt(d_head) + pos + mask) v, optionally head-scaled.

    q, k, v: (B, H, T, d_head). pos_scores broadcasts over batch, mask over
    heads. Returns (B, H, Tq, d_head).
    """
    d_head = ad.data_of(q).shape[-1]
    qs = ad.scale(q, 1.0 / math.sqrt(d_head))
    qk = ad.matmul(qs, ad.transpose_last(k))
    if pos_scores is None and mask is None:
        scores = qk
    elif pos_scores is None:
        scores = ad.add(qk, mask)
    elif mask is None:
        scores = ad.add(qk, pos_scores)
    else:
        scores = ad.add3(qk, pos_scores, mask)
    probs = ad.softmax(scores)
    ctx = ad.matmul(probs, v)
    if head_scale is not None:
        n_heads = ad.data_of(head_scale).shape[0]
        ctx = ad.mul(ctx, ad.reshape(head_scale, (1, n_heads, 1, 1)))
    return ctx


def _dropout(x, p: float, train: bool, rng):
    if not train or p <= 0.0:
        return x
    keep = (rng.random(ad.data_of(x).shape) >= p) / (1.0 - p)
    return ad.mul(x, keep)


def _heads(x, b, t, h, dh):
    return ad.swapaxes(ad.reshape(x, (b, t, h, dh)), 1, 2)


def _attn_sublayer(params, prefix, x_q, x_kv, pos_bias, mask, train, rng):
    hy = params.hyper
    h, dh = hy.n_heads, hy.d_head
    bsz, tq = ad.data_of(x_q).shape[:2]
    tk = ad.data_of(x_kv).shape[1]
    q = _heads(ad.add(ad.matmul(x_q, params[f"{prefix}.wq"]), params[f"{prefix}.bq"]), bsz, tq, h, dh)
    k = _heads(ad.add(ad.matmul(x_kv, params[f"{prefix}.wk"]), params[f"{prefix}.bk"]), bsz, tk, h, dh)
    v = _heads(ad.add(ad.matmul(x_kv, params[f"{prefix}.wv"]), params[f"{prefix}.bv"]), bsz, tk, h, dh)
    ctx = attention_core(q, k, v, pos_bias, mask, head_scale=params[f"{prefix}.scale"])
    merged = ad.reshape(ad.swapaxes(ctx, 1, 2), (bsz, tq, hy.d_model))
    out = ad.add(ad.matmul(merged, params[f"{prefix}.wo"]), params[f"{prefix}.bo"])
    return _dropout(out, hy.dropout, train, rng)


def _ffn_sublayer(params, prefix, x, train, rng):
    hy = params.hyper
    inner = ad.gelu(ad.add(ad.matmul(x, params[f"{prefix}.w1"]), params[f"{prefix}.b1"]))
    out = ad.add(ad.matmul(inner, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])
    return _dropout(out, hy.dropout, train, rng)


def pad_encoder_batch(enc_inputs: list[EncoderInput]):
    """Right-pad a batch of encoder inputs.

    Returns (ids, tok_mask, key_mask, patches, patch_rows); patch counts
    must be uniform across the batch (one task per batch).
    """
    bsz = len(enc_inputs)
    t = max(len(e) for e in enc_inputs)
    ids = np.full((bsz, t), PAD, dtype=np.int64)
    tok_mask = np.zeros((bsz, t, 1))
    key_mask = np.full((bsz, 1, 1, t), NEG)
    counts = {0 if e.patches is None else len(e.patches) for e in enc_inputs}
    if len(counts) != 1:
        raise ShapeMismatch("batch mixes patch counts")
    n_patches = counts.pop()
    patches = np.zeros((bsz, n_patches, enc_inputs[0].patches.shape[1])) if n_patches else None
    rows = np.zeros((bsz, n_patches), dtype=np.int64)
    for b, e in enumerate(enc_inputs):
        length = len(e.ids)
        token_pos = e.ids >= 0
        ids[b, :length][token_pos] = e.ids[token_pos]
        tok_mask[b, :length, 0] = token_pos
        key_mask[b, 0, 0, :length] = 0.0
        if n_patches:
            rows[b] = np.nonzero(e.ids == PATCH_SLOT)[0]
            patches[b] = e.patches
    return ids, tok_mask, key_mask, patches, rows


def _embed_encoder(params, enc_inputs, train, rng):
    ids, tok_mask, key_mask, patches, rows = pad_encoder_batch(enc_inputs)
    x = ad.mul(ad.embedding(params["embed"], ids), tok_mask)
    if patches is not None:
        proj = ad.add(ad.matmul(patches, params["patch_w"]), params["patch_b"])
        x = ad.add(x, ad.scatter_rows(proj, rows, ids.shape[1]))
    x = _dropout(x, params.hyper.dropout, train, rng)
    return x, key_mask


def _encode(params, enc_inputs, train, rng):
    hy = params.hyper
    x, key_mask = _embed_encoder(params, enc_inputs, train, rng)
    t = ad.data_of(x).shape[1]
    if t > hy.max_len:
        raise SequenceTooLong(f"encoder length {t} exceeds max {hy.max_len}")
    idx = _rel_idx(t, t, hy.rel_clip)
    for i in range(hy.n_enc):
        pos = ad.rel_gather(params[f"enc{i}.attn.rel"], idx)
        h = ad.layer_norm(x, params[f"enc{i}.ln1.g"], params[f"enc{i}.ln1.b"])
        x = ad.add(x, _attn_sublayer(params, f"enc{i}.attn", h, h, pos, key_mask, train, rng))
        h = ad.layer_norm(x, params[f"enc{i}.ln2.g"], params[f"enc{i}.ln2.b"])
        x = ad.add(x, _ffn_sublayer(params, f"enc{i}.ffn", h, train, rng))
    x = ad.layer_norm(x, params["enc_ln.g"], params["enc_ln.b"])
    return x, key_mask


def _decode_stack(params, enc_out, enc_key_mask, dec_ids, train, rng):
    hy = params.hyper
    t = dec_ids.shape[1]
    if t > hy.max_len:
        raise SequenceTooLong(f"decoder length {t} exceeds max {hy.max_len}")
    x = ad.embedding(params["embed"], dec_ids)
    x = _dropout(x, hy.dropout, train, rng)
    causal = _causal_mask(t)
    idx = _rel_idx(t, t, hy.rel_clip)
    for i in range(hy.n_dec):
        pos = ad.rel_gather(params[f"dec{i}.self.rel"], idx)
        h = ad.layer_norm(x, params[f"dec{i}.ln1.g"], params[f"dec{i}.ln1.b"])
        x = ad.add(x, _attn_sublayer(params, f"dec{i}.self", h, h, pos, causal, train, rng))
        h = ad.layer_norm(x, params[f"dec{i}.ln2.g"], params[f"dec{i}.ln2.b"])
        x = ad.add(x, _attn_sublayer(params, f"dec{i}.cross", h, enc_out, None, enc_key_mask, train, rng))
        h = ad.layer_norm(x, params[f"dec{i}.ln3.g"], params[f"dec{i}.ln3.b"])
        x = ad.add(x, _ffn_sublayer(params, f"dec{i}.ffn", h, train, rng))
    x = ad.layer_norm(x, params["dec_ln.g"], params["dec_ln.b"])
    logits = ad.scale(ad.matmul(x, ad.transpose_last(params["embed"])),
                      1.0 / math.sqrt(hy.d_model))
    return logits


def forward_batch(params, enc_inputs: list[EncoderInput], dec_ids: np.ndarray,
                  train: bool = False, rng=None, record: bool = True):
    """Batched forward pass. Returns (logits (B, Td, V), tape or None).

    Decoder inputs must start with BOS and be right-padded with PAD.
    """
    dec_ids = np.asarray(dec_ids, dtype=np.int64)
    if dec_ids.ndim != 2 or len(enc_inputs) != dec_ids.shape[0]:
        raise ShapeMismatch("decoder batch must be (B, T) matching encoder batch")
    if not (dec_ids[:, 0] == BOS).all():
        raise ShapeMismatch("decoder input must begin with BOS")
    if train and rng is None:
        raise ValueError("training forward needs a dropout rng")

    def run():
        enc_out, enc_key_mask = _encode(params, enc_inputs, train, rng)
        return _decode_stack(params, enc_out, enc_key_mask, dec_ids, train, rng)

    if record:
        tape = Tape()
        with tape.recording():
            logits = run()
        return logits, tape
    return run(), None


def forward(params, enc_input: EncoderInput, dec_ids, train: bool = False,
            rng=None, record: bool = True):
    """Single-sample forward; logits shaped (Td, total_size)."""
    dec = np.asarray(dec_ids, dtype=np.int64)[None, :]
    if record:
        tape = Tape()
        with tape.recording():
            enc_out, enc_key_mask = _encode(params, [enc_input], train, rng)
            logits = _decode_stack(params, enc_out, enc_key_mask, dec, train, rng)
            logits = ad.reshape(logits, (dec.shape[1], params.vocab.total_size))
        return logits, tape
    logits, _ = forward_batch(params, [enc_input], dec, train, rng, record=False)
    return logits[0], None


def teacher_forcing(target: list[int], width: int):
    """(decoder input, target, mask) rows for one target sequence."""
    dec = np.full(width, PAD, dtype=np.int64)
    tgt = np.full(width, PAD, dtype=np.int64)
    mask = np.zeros(width, dtype=bool)
    dec[0] = BOS
    dec[1:len(target)] = target[:-1]
    tgt[:len(target)] = target
    mask[:len(target)] = True
    return dec, tgt, mask


def batch_loss(params, enc_inputs, dec_ids, targets, mask, smoothing: float,
               train: bool = False, rng=None, record: bool = True):
    """Mean label-smoothed cross entropy over non-PAD positions; returns (loss, tape)."""
    if record:
        tape = Tape()
        with tape.recording():
            enc_out, enc_key_mask = _encode(params, enc_inputs, train, rng)
            logits = _decode_stack(params, enc_out, enc_key_mask, dec_ids, train, rng)
            flat = ad.reshape(logits, (-1, params.vocab.total_size))
            loss = ad.cross_entropy_smoothed(flat, targets.reshape(-1), mask.reshape(-1),
                                             smoothing, params.vocab.total_size)
        return loss, tape
    logits, _ = forward_batch(params, enc_inputs, dec_ids, train, rng, record=False)
    flat = logits.reshape(-1, params.vocab.total_size)
    loss = ad.cross_entropy_smoothed(flat, targets.reshape(-1), mask.reshape(-1),
                                     smoothing, params.vocab.total_size)
    return float(loss), None


def loss_and_grads(params, enc_inputs, dec_ids, targets, mask, smoothing: float,
                   train: bool = False, rng=None):
    loss, tape = batch_loss(params, enc_inputs, dec_ids, targets, mask, smoothing,
                            train=train, rng=rng, record=True)
    ad.backward(tape, loss)
    return float(loss.data), params.collect_grads()


def grad_check(params, enc_inputs, dec_ids, targets, mask, smoothing: float = 0.1,
               h: float = 1e-5, n_checks: int = 200, seed: int = 0,
               grads: dict | None = None) -> float:
    """Max relative error of reverse-mode grads vs central finite differences.

    Relative error uses a 1e-3 denominator floor so finite-difference noise
    on near-zero gradients does not dominate. ``grads`` can inject
    externally computed (e.g. corrupted) gradients for negative controls.
    """
    if grads is None:
        _, grads = loss_and_grads(params, enc_inputs, dec_ids, targets, mask, smoothing)
    coords = []
    for name, t in params.tensors.items():
        coords.extend((name, i) for i in range(t.data.size))
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(coords), size=min(n_checks, len(coords)), replace=False)

    def eval_loss():
        loss, _ = batch_loss(params, enc_inputs, dec_ids, targets, mask, smoothing,
                             record=False)
        return loss

    worst = 0.0
    for pick in picks:
        name, flat = coords[pick]
        buf = params[name].data.reshape(-1)
        orig = buf[flat]
        buf[flat] = orig + h
        up = eval_loss()
        buf[flat] = orig - h
        down = eval_loss()
        buf[flat] = orig
        fd = (up - down) / (2.0 * h)
        g = grads[name].reshape(-1)[flat]
        err = abs(g - fd) / max(abs(g), abs(fd), 1e-3)
        worst = max(worst, err)
    return worst


class InferenceSession:
    """Greedy decoding with cached encoder states and decoder KV.

    Pure numpy eval path over the same weights as ``forward``; a test pins
    the two paths to agree.
    """

    def __init__(self, params: ModelParams, enc_input: EncoderInput):
        self.params = params
        hy = params.hyper
        enc_out, _ = _encode(params, [enc_input], train=False, rng=None)
        self.enc_out = np.asarray(enc_out[0])  # (Te, d)
        h, dh = hy.n_heads, hy.d_head
        self.cross_k = []
        self.cross_v = []
        for i in range(hy.n_dec):
            k = self.enc_out @ params[f"dec{i}.cross.wk"].data + params[f"dec{i}.cross.bk"].data
            v = self.enc_out @ params[f"dec{i}.cross.wv"].data + params[f"dec{i}.cross.bv"].data
            te = k.shape[0]
            self.cross_k.append(np.ascontiguousarray(k.reshape(te, h, dh).transpose(1, 0, 2)))
            self.cross_v.append(np.ascontiguousarray(v.reshape(te, h, dh).transpose(1, 0, 2)))
        self.self_k = [[] for _ in range(hy.n_dec)]
        self.self_v = [[] for _ in range(hy.n_dec)]
        self.pos = 0

    def step(self, token: int) -> np.ndarray:
        """Feed one decoder token; returns next-token logits (total_size,)."""
        p = self.params
        hy = p.hyper
        h, dh, d = hy.n_heads, hy.d_head, hy.d_model
        if self.pos >= hy.max_len:
            raise SequenceTooLong(f"decoder length {self.pos + 1} exceeds max {hy.max_len}")
        t = self.pos
        x = p["embed"].data[token]
        inv_sqrt = 1.0 / math.sqrt(dh)
        for i in range(hy.n_dec):
            hcur = _ln_np(x, p[f"dec{i}.ln1.g"].data, p[f"dec{i}.ln1.b"].data)
            q = (hcur @ p[f"dec{i}.self.wq"].data + p[f"dec{i}.self.bq"].data).reshape(h, dh)
            self.self_k[i].append(
                (hcur @ p[f"dec{i}.self.wk"].data + p[f"dec{i}.self.bk"].data).reshape(h, dh))
            self.self_v[i].append(
                (hcur @ p[f"dec{i}.self.wv"].data + p[f"dec{i}.self.bv"].data).reshape(h, dh))
            keys = np.stack(self.self_k[i], axis=1)    # (h, t+1, dh)
            vals = np.stack(self.self_v[i], axis=1)
            offs = np.clip(np.arange(t + 1) - t, -hy.rel_clip, hy.rel_clip) + hy.rel_clip
            scores = (q[:, None, :] * keys).sum(-1) * inv_sqrt + p[f"dec{i}.self.rel"].data[:, offs]
            probs = _softmax_np(scores)
            ctx = (probs[:, :, None] * vals).sum(axis=1) * p[f"dec{i}.self.scale"].data[:, None]
            x = x + ctx.reshape(d) @ p[f"dec{i}.self.wo"].data + p[f"dec{i}.self.bo"].data

            hcur = _ln_np(x, p[f"dec{i}.ln2.g"].data, p[f"dec{i}.ln2.b"].data)
            q = (hcur @ p[f"dec{i}.cross.wq"].data + p[f"dec{i}.cross.bq"].data).reshape(h, dh)
            scores = (q[:, None, :] * self.cross_k[i]).sum(-1) * inv_sqrt
            probs = _softmax_np(scores)
            ctx = (probs[:, :, None] * self.cross_v[i]).sum(axis=1) * p[f"dec{i}.cross.scale"].data[:, None]
            x = x + ctx.reshape(d) @ p[f"dec{i}.cross.wo"].data + p[f"dec{i}.cross.bo"].data

            hcur = _ln_np(x, p[f"dec{i}.ln3.g"].data, p[f"dec{i}.ln3.b"].data)
            inner = _gelu_np(hcur @ p[f"dec{i}.ffn.w1"].data + p[f"dec{i}.ffn.b1"].data)
            x = x + inner @ p[f"dec{i}.ffn.w2"].data + p[f"dec{i}.ffn.b2"].data

        hfin = _ln_np(x, p["dec_ln.g"].data, p["dec_ln.b"].data)
        self.pos += 1
        return (p["embed"].data @ hfin) / math.sqrt(d)


def _ln_np(x, g, b, eps=1e-6):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc ** 2).mean(axis=-1, keepdims=True) + eps)
    return xc * inv * g + b


def _softmax_np(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _gelu_np(x):
    c = math.sqrt(2.0 / math.pi)
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x ** 3)))
