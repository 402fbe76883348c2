"""Serving from cached leaf embeddings.

The graph convolution runs once at export time. Online scoring needs only the
encoder, one matrix product with the cached ``H_l`` and a sigmoid.
"""

from __future__ import annotations

import json
import logging
import socketserver
import threading
from dataclasses import dataclass
from typing import IO

import numpy as np

from .data import Taxonomy
from .encoder import EncoderParams, Vocab, encode_batch, tokenize
from .graph import GraphBundle
from .metrics import binarize
from .tensorfile import read_tensor_file, write_tensor_file
from .trainer import ModelState, Workspace, leaf_representations, predict_scores

log = logging.getLogger(__name__)

CACHE_MAGIC = b"QCLFLEAF"
CACHE_VERSION = 1


@dataclass(frozen=True)
class LeafCache:
    version: int
    d: int
    leaf_ids: tuple[int, ...]
    leaf_names: tuple[str, ...]
    h_leaf: np.ndarray
    bias: np.ndarray
    encoder: EncoderParams
    vocab: Vocab
    max_query_len: int
    threshold: float

    def __post_init__(self):
        n = len(self.leaf_ids)
        if self.h_leaf.shape != (n, self.d) or self.bias.shape != (n,):
            raise ValueError("cache tensors disagree with the leaf list")
        for arr in (self.h_leaf, self.bias, *self.encoder.named().values()):
            arr.setflags(write=False)


def export_cache(model: ModelState, graph: GraphBundle | None, taxonomy: Taxonomy, path=None) -> LeafCache:
    if list(taxonomy.leaf_index) != list(model.leaf_ids):
        raise ValueError("taxonomy leaves do not match the model")
    ws = Workspace.build(taxonomy, model.vocab, model.config, graph=graph)
    if model.config.use_structure and ws.a_hat is None:
        raise ValueError("model uses the structure module; a graph bundle is required")
    h_leaf, _ = leaf_representations(model, ws)
    cache = LeafCache(
        version=CACHE_VERSION,
        d=h_leaf.shape[1],
        leaf_ids=tuple(model.leaf_ids),
        leaf_names=tuple(taxonomy.by_id[lid].name for lid in model.leaf_ids),
        h_leaf=np.array(h_leaf),
        bias=np.array(model.bias),
        encoder=model.encoder.copy(),
        vocab=model.vocab,
        max_query_len=model.config.max_query_len,
        threshold=model.config.decision_threshold,
    )
    if path is not None:
        save_cache(cache, path)
    return cache


def save_cache(cache: LeafCache, path) -> None:
    tensors = {"h_leaf": cache.h_leaf, "bias": cache.bias}
    tensors.update({f"encoder.{k}": v for k, v in cache.encoder.named().items()})
    header = {
        "d": cache.d,
        "leaf_ids": list(cache.leaf_ids),
        "leaf_names": list(cache.leaf_names),
        "vocab": {"tokens": cache.vocab.tokens, "mode": cache.vocab.mode},
        "max_query_len": cache.max_query_len,
        "threshold": cache.threshold,
        "tensors": [[k, list(v.shape)] for k, v in tensors.items()],
    }
    write_tensor_file(path, CACHE_MAGIC, cache.version, header, tensors)


def load_cache(path) -> LeafCache:
    header, t = read_tensor_file(path, CACHE_MAGIC, CACHE_VERSION)
    enc = EncoderParams(**{k[len("encoder.") :]: v for k, v in t.items() if k.startswith("encoder.")})
    return LeafCache(
        version=CACHE_VERSION,
        d=header["d"],
        leaf_ids=tuple(header["leaf_ids"]),
        leaf_names=tuple(header["leaf_names"]),
        h_leaf=t["h_leaf"],
        bias=t["bias"],
        encoder=enc,
        vocab=Vocab(header["vocab"]["tokens"], header["vocab"]["mode"]),
        max_query_len=header["max_query_len"],
        threshold=header["threshold"],
    )


def cache_scores(cache: LeafCache, queries) -> np.ndarray:
    """Scores for one query (vector) or a list of queries (matrix)."""
    single = isinstance(queries, str)
    texts = [queries] if single else list(queries)
    seqs = [tokenize(t, cache.vocab, cache.max_query_len) for t in texts]
    q, _ = encode_batch(seqs, cache.encoder)
    scores = predict_scores(q, cache.h_leaf, cache.bias)
    return scores[0] if single else scores


def predict_from_cache(query_text: str, cache: LeafCache, threshold: float | None = None) -> list[tuple[int, float]]:
    """Predicted labels as ``(label_id, score)``, highest score first."""
    threshold = cache.threshold if threshold is None else threshold
    scores = cache_scores(cache, query_text)
    picked = binarize(scores, threshold, cache.leaf_ids)
    pos = {lid: k for k, lid in enumerate(cache.leaf_ids)}
    out = [(lid, float(scores[pos[lid]])) for lid in picked]
    out.sort(key=lambda p: (-p[1], p[0]))
    return out


def handle_request(cache: LeafCache, line: str) -> dict:
    """One line-delimited JSON request to one response object; never raises."""
    try:
        req = json.loads(line)
    except json.JSONDecodeError as exc:
        return {"error": {"code": "bad_request", "message": f"invalid JSON: {exc.msg}"}}
    if not isinstance(req, dict) or not isinstance(req.get("query"), str):
        return {"error": {"code": "bad_request", "message": 'expected {"query": str, "threshold"?: number}'}}
    threshold = req.get("threshold", cache.threshold)
    if isinstance(threshold, bool) or not isinstance(threshold, (int, float)) or not 0 < threshold < 1:
        return {"error": {"code": "bad_request", "message": "threshold must be a number in (0, 1)"}}
    names = dict(zip(cache.leaf_ids, cache.leaf_names))
    labels = predict_from_cache(req["query"], cache, float(threshold))
    return {"labels": [{"id": lid, "name": names[lid], "score": s} for lid, s in labels]}


def serve_stream(cache: LeafCache, infile: IO[str], outfile: IO[str]) -> int:
    """Answer requests read from ``infile`` until EOF; returns the number handled."""
    n = 0
    for line in infile:
        if not line.strip():
            continue
        outfile.write(json.dumps(handle_request(cache, line)) + "\n")
        outfile.flush()
        n += 1
    return n


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        for raw in self.rfile:
            line = raw.decode("utf-8", errors="replace")
            if not line.strip():
                continue
            resp = handle_request(self.server.cache, line)
            self.wfile.write((json.dumps(resp) + "\n").encode("utf-8"))
            self.wfile.flush()


class CacheServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, cache: LeafCache, address=("127.0.0.1", 0)):
        super().__init__(address, _Handler)
        self.cache = cache

    def start_background(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, daemon=True)
        t.start()
        return t


def batch_predict(in_path, cache: LeafCache, out_path, threshold: float | None = None) -> int:
    names = dict(zip(cache.leaf_ids, cache.leaf_names))
    queries = []
    with open(in_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict) or not isinstance(obj.get("query"), str):
                    raise ValueError
            except ValueError:
                raise ValueError(f"{in_path}:{lineno}: expected a JSON object with a string 'query'") from None
            queries.append(obj["query"])
    with open(out_path, "w", encoding="utf-8") as fh:
        for q in queries:
            labels = predict_from_cache(q, cache, threshold)
            rec = {"query": q, "labels": [{"id": lid, "name": names[lid], "score": s} for lid, s in labels]}
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
    return len(queries)
