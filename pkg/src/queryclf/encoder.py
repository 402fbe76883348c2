"""Shared text encoder: mean-pooled token embeddings followed by a tanh MLP.

The same parameters encode queries, label name + side information, and
knowledge texts. Forward and backward passes are written out by hand so every
gradient can be checked against finite differences.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, fields
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

PAD = "<pad>"
UNK = "<unk>"
LABEL_SEP = "|"

_CJK = "㐀-䶿一-鿿豈-﫿"
_SEPARATORS = r"\s|"
_TOKEN_RE = {
    "char": re.compile(rf"[^{_SEPARATORS}]"),
    "word": re.compile(rf"[^{_SEPARATORS}]+"),
    # CJK characters stand alone, everything else groups into words
    "mixed": re.compile(rf"[{_CJK}]|[^{_SEPARATORS}{_CJK}]+"),
}


class Vocab:
    def __init__(self, tokens: Sequence[str], mode: str = "mixed"):
        if list(tokens[:2]) != [PAD, UNK]:
            raise ValueError("vocab must start with the pad and unk tokens")
        if mode not in _TOKEN_RE:
            raise ValueError(f"unknown tokenizer mode {mode!r}")
        self.tokens = list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.tokens)}
        if len(self.token_to_id) != len(self.tokens):
            raise ValueError("duplicate tokens in vocab")
        self.pad_id = 0
        self.unk_id = 1
        self.mode = mode

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.tokens == other.tokens and self.mode == other.mode

    @classmethod
    def build(cls, texts: Iterable[str], mode: str = "mixed") -> "Vocab":
        """Every token seen at least once, in first-seen order."""
        seen: dict[str, None] = {}
        for text in texts:
            for tok in split_tokens(text, mode):
                seen.setdefault(tok, None)
        seen.pop(PAD, None)
        seen.pop(UNK, None)
        return cls([PAD, UNK, *seen], mode)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i, tok in enumerate(self.tokens):
                fh.write(json.dumps({"token": tok, "id": i}, ensure_ascii=False) + "\n")

    @classmethod
    def load(cls, path, mode: str = "mixed") -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            rows = [json.loads(line) for line in fh if line.strip()]
        rows.sort(key=lambda r: r["id"])
        if [r["id"] for r in rows] != list(range(len(rows))):
            raise ValueError(f"{path}: vocab ids are not dense")
        return cls([r["token"] for r in rows], mode)


def split_tokens(text: str, mode: str = "mixed") -> list[str]:
    return _TOKEN_RE[mode].findall(text)


def tokenize(text: str, vocab: Vocab, max_len: int) -> np.ndarray:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    toks = split_tokens(text, vocab.mode)[:max_len]
    return np.array([vocab.token_to_id.get(t, vocab.unk_id) for t in toks], dtype=np.int64)


def build_label_sequence(node) -> str:
    return LABEL_SEP.join([node.name, *node.side_info])


@dataclass
class EncoderParams:
    embedding_table: np.ndarray  # vocab_size x d_emb
    proj1_weight: np.ndarray  # d_emb x d_hidden
    proj1_bias: np.ndarray
    proj2_weight: np.ndarray  # d_hidden x d
    proj2_bias: np.ndarray

    @property
    def vocab_size(self) -> int:
        return self.embedding_table.shape[0]

    @property
    def dim(self) -> int:
        return self.proj2_weight.shape[1]

    def named(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def copy(self) -> "EncoderParams":
        return EncoderParams(**{k: v.copy() for k, v in self.named().items()})

    @classmethod
    def zeros_like(cls, other: "EncoderParams") -> "EncoderParams":
        return cls(**{k: np.zeros_like(v) for k, v in other.named().items()})

    def __add__(self, other: "EncoderParams") -> "EncoderParams":
        a, b = self.named(), other.named()
        return EncoderParams(**{k: a[k] + b[k] for k in a})


def init_encoder(vocab_size: int, d_emb: int, d_hidden: int, d: int, rng: np.random.Generator) -> EncoderParams:
    """Unit-scale embeddings, Glorot-uniform projections, zero biases."""
    lim1 = np.sqrt(6.0 / (d_emb + d_hidden))
    lim2 = np.sqrt(6.0 / (d_hidden + d))
    return EncoderParams(
        embedding_table=rng.uniform(-1.0, 1.0, (vocab_size, d_emb)),
        proj1_weight=rng.uniform(-lim1, lim1, (d_emb, d_hidden)),
        proj1_bias=np.zeros(d_hidden),
        proj2_weight=rng.uniform(-lim2, lim2, (d_hidden, d)),
        proj2_bias=np.zeros(d),
    )


@dataclass
class EncodeCache:
    pool: sp.csr_matrix  # B x V mean-pooling operator
    pooled: np.ndarray
    hidden: np.ndarray  # tanh activations


def pooling_matrix(seqs: Sequence[np.ndarray], vocab_size: int) -> sp.csr_matrix:
    rows, cols, vals = [], [], []
    for b, ids in enumerate(seqs):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
            raise IndexError(f"token id out of range [0, {vocab_size}) in sequence {b}")
        rows.append(np.full(ids.size, b))
        cols.append(ids)
        vals.append(np.full(ids.size, 1.0 / max(ids.size, 1)))
    if seqs:
        rows, cols, vals = np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
    # repeated ids are summed on conversion to CSR
    return sp.coo_matrix((vals, (rows, cols)), shape=(len(seqs), vocab_size)).tocsr()


def encode_batch(seqs: Sequence[np.ndarray], params: EncoderParams) -> tuple[np.ndarray, EncodeCache]:
    pool = pooling_matrix(seqs, params.vocab_size)
    pooled = np.asarray(pool @ params.embedding_table)
    hidden = np.tanh(pooled @ params.proj1_weight + params.proj1_bias)
    out = hidden @ params.proj2_weight + params.proj2_bias
    return out, EncodeCache(pool, pooled, hidden)


def encode_batch_backward(cache: EncodeCache, params: EncoderParams, upstream: np.ndarray) -> EncoderParams:
    """Gradients of ``sum(upstream * encode_batch(...))`` w.r.t. every encoder tensor."""
    upstream = np.asarray(upstream, dtype=float)
    if upstream.shape != (cache.hidden.shape[0], params.dim):
        raise ValueError(f"upstream gradient has shape {upstream.shape}, expected {(cache.hidden.shape[0], params.dim)}")
    g_w2 = cache.hidden.T @ upstream
    g_b2 = upstream.sum(axis=0)
    g_hidden = upstream @ params.proj2_weight.T
    g_pre = g_hidden * (1.0 - cache.hidden**2)
    g_w1 = cache.pooled.T @ g_pre
    g_b1 = g_pre.sum(axis=0)
    g_pooled = g_pre @ params.proj1_weight.T
    g_emb = np.asarray(cache.pool.T @ g_pooled)
    return EncoderParams(g_emb, g_w1, g_b1, g_w2, g_b2)


def encode(ids: np.ndarray, params: EncoderParams) -> np.ndarray:
    out, _ = encode_batch([ids], params)
    return out[0]


def encode_backward(ids: np.ndarray, params: EncoderParams, upstream_grad: np.ndarray) -> EncoderParams:
    upstream_grad = np.asarray(upstream_grad, dtype=float)
    if upstream_grad.shape != (params.dim,):
        raise ValueError(f"upstream gradient has shape {upstream_grad.shape}, expected ({params.dim},)")
    _, cache = encode_batch([ids], params)
    return encode_batch_backward(cache, params, upstream_grad[None, :])
