"""Label relation graphs and the two-layer graph convolution over them.

Three graphs are built: conditional co-occurrence between leaves, cosine
similarity between leaf embeddings, and parent-to-child hierarchy edges. They
are fused into one ``|C'| x |C'|`` matrix and symmetrically normalized.
Matrices are dense float64 arrays; taxonomies at this scale have at most a few
thousand nodes.
"""

from __future__ import annotations

import itertools
import json
from collections import Counter
from dataclasses import dataclass, fields
from typing import Iterable

import numpy as np

from .data import ClickSample, Taxonomy
from .semi import snap_cosine

GRAPH_FORMAT_VERSION = 1


@dataclass
class CooccurrenceCounts:
    leaf_ids: list[int]
    pair_counts: Counter  # (i, j) -> N(c_i, c_j), stored under both orders
    label_counts: Counter  # i -> N(c_i)

    def pair(self, i: int, j: int) -> int:
        return self.pair_counts.get((i, j), 0)


def count_cooccurrence(samples: Iterable[ClickSample], taxonomy: Taxonomy) -> CooccurrenceCounts:
    pairs: Counter = Counter()
    labels: Counter = Counter()
    for s in samples:
        ids = sorted(s.clicked_leaf_ids)
        labels.update(ids)
        for a, b in itertools.combinations(ids, 2):
            pairs[(a, b)] += 1
            pairs[(b, a)] += 1
    return CooccurrenceCounts(list(taxonomy.leaf_index), pairs, labels)


def build_cooccurrence(counts: CooccurrenceCounts, alpha_threshold: float) -> np.ndarray:
    """Row-conditional probabilities N(i, j) / N(i), zeroed below the threshold."""
    _check_unit("alpha_threshold", alpha_threshold)
    n = len(counts.leaf_ids)
    pos = {lid: k for k, lid in enumerate(counts.leaf_ids)}
    a = np.zeros((n, n))
    for (i, j), nij in counts.pair_counts.items():
        a[pos[i], pos[j]] = nij / counts.label_counts[i]
    a[a < alpha_threshold] = 0.0
    np.fill_diagonal(a, 0.0)
    return a


def build_similarity(label_embeddings: np.ndarray, beta_threshold: float, leaf_ids=None) -> np.ndarray:
    _check_unit("beta_threshold", beta_threshold)
    emb = np.asarray(label_embeddings, dtype=float)
    norms = np.linalg.norm(emb, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        name = leaf_ids[zero[0]] if leaf_ids is not None else int(zero[0])
        raise ValueError(f"label {name} has a zero-norm embedding; cosine similarity is undefined")
    unit = emb / norms[:, None]
    a = unit @ unit.T
    # the product is symmetric up to rounding; make it exactly so
    a = snap_cosine(0.5 * (a + a.T))
    a[a < beta_threshold] = 0.0
    np.fill_diagonal(a, 0.0)
    return a


def subtree_clicks(taxonomy: Taxonomy, click_counts: dict[int, int]) -> dict[int, float]:
    """Leaf clicks as given; an internal node's count is the sum over its descendant leaves."""
    total: dict[int, float] = {}

    def visit(nid: int) -> float:
        if nid not in total:
            kids = taxonomy.children[nid]
            total[nid] = float(click_counts.get(nid, 0)) if not kids else sum(visit(c) for c in kids)
        return total[nid]

    for node in taxonomy.nodes:
        visit(node.id)
    return total


def build_hierarchy(taxonomy: Taxonomy, click_counts: dict[int, int]) -> np.ndarray:
    m = subtree_clicks(taxonomy, click_counts)
    a = np.zeros((taxonomy.num_nodes, taxonomy.num_nodes))
    for k, kids in taxonomy.children.items():
        if not kids:
            continue
        uniform = 1.0 / len(kids)
        denom = sum(m[c] for c in kids)
        for c in kids:
            share = m[c] / denom if denom > 0 else 0.0
            a[taxonomy.row_of[k], taxonomy.row_of[c]] = max(uniform, share)
    return a


def fuse_graphs(a_coo, a_sim, a_hier, taxonomy: Taxonomy) -> np.ndarray:
    """Write the leaf-leaf relation graphs into the hierarchy matrix, then symmetrize by max.

    Either of ``a_coo``/``a_sim`` may be None (dropped); the leaf block is the
    mean of whichever remain, or zero if both are dropped.
    """
    nl, nn = taxonomy.num_leaves, taxonomy.num_nodes
    if a_hier is None:
        a_hier = np.zeros((nn, nn))
    if a_hier.shape != (nn, nn):
        raise ValueError(f"hierarchy matrix is {a_hier.shape}, expected {(nn, nn)}")
    leaf_graphs = [g for g in (a_coo, a_sim) if g is not None]
    for g in leaf_graphs:
        if g.shape != (nl, nl):
            raise ValueError(f"leaf graph is {g.shape}, expected {(nl, nl)}")
    a = np.array(a_hier, dtype=float)
    s = taxonomy.num_internal
    a[s:, s:] = sum(leaf_graphs) / len(leaf_graphs) if leaf_graphs else 0.0
    return np.maximum(a, a.T)


def normalize_adjacency(a: np.ndarray) -> np.ndarray:
    a_tilde = a + np.eye(a.shape[0])
    d_inv_sqrt = 1.0 / np.sqrt(a_tilde.sum(axis=1))
    # one product per entry from a symmetric outer matrix keeps the result exactly symmetric
    return a_tilde * np.outer(d_inv_sqrt, d_inv_sqrt)


# ---------------------------------------------------------------------------
# graph convolution


@dataclass
class GcnParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def named(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def copy(self) -> "GcnParams":
        return GcnParams(**{k: v.copy() for k, v in self.named().items()})


def init_gcn(d: int, d_g: int, rng: np.random.Generator) -> GcnParams:
    """Glorot-uniform weights, zero biases."""
    lim1 = np.sqrt(6.0 / (d + d_g))
    lim2 = np.sqrt(6.0 / (d_g + d))
    return GcnParams(
        w1=rng.uniform(-lim1, lim1, (d, d_g)),
        b1=np.zeros(d_g),
        w2=rng.uniform(-lim2, lim2, (d_g, d)),
        b2=np.zeros(d),
    )


@dataclass
class GcnCache:
    ax: np.ndarray  # A_hat X
    pre1: np.ndarray
    ar: np.ndarray  # A_hat relu(pre1)


def gcn_forward(a_hat: np.ndarray, x: np.ndarray, params: GcnParams) -> tuple[np.ndarray, GcnCache]:
    """H = A_hat relu(A_hat X W1 + b1) W2 + b2."""
    n = a_hat.shape[0]
    if a_hat.shape != (n, n) or x.shape[0] != n or x.shape[1] != params.w1.shape[0]:
        raise ValueError(f"shape mismatch: A_hat {a_hat.shape}, X {x.shape}, W1 {params.w1.shape}")
    ax = a_hat @ x
    pre1 = ax @ params.w1 + params.b1
    ar = a_hat @ np.maximum(pre1, 0.0)
    h = ar @ params.w2 + params.b2
    return h, GcnCache(ax, pre1, ar)


def gcn_backward(a_hat: np.ndarray, cache: GcnCache, params: GcnParams, upstream: np.ndarray):
    """Return ``(GcnParams of gradients, gradient w.r.t. X)``. A_hat is treated as a constant."""
    if upstream.shape != (a_hat.shape[0], params.w2.shape[1]):
        raise ValueError(f"upstream gradient has shape {upstream.shape}")
    g_w2 = cache.ar.T @ upstream
    g_b2 = upstream.sum(axis=0)
    g_r = a_hat.T @ (upstream @ params.w2.T)
    g_pre1 = g_r * (cache.pre1 > 0)
    g_w1 = cache.ax.T @ g_pre1
    g_b1 = g_pre1.sum(axis=0)
    g_x = a_hat.T @ (g_pre1 @ params.w1.T)
    return GcnParams(g_w1, g_b1, g_w2, g_b2), g_x


def extract_leaf(h: np.ndarray, taxonomy: Taxonomy) -> np.ndarray:
    return h[taxonomy.num_internal :]


# ---------------------------------------------------------------------------
# bundle + file format


@dataclass
class GraphBundle:
    alpha: float
    beta: float
    num_leaves: int
    num_nodes: int
    a_coo: np.ndarray
    a_sim: np.ndarray
    a_hier: np.ndarray
    a_fused: np.ndarray
    a_hat: np.ndarray

    MATRICES = ("a_coo", "a_sim", "a_hier", "a_fused", "a_hat")

    def save(self, path) -> None:
        header = {
            "version": GRAPH_FORMAT_VERSION,
            "num_leaves": self.num_leaves,
            "num_nodes": self.num_nodes,
            "alpha": self.alpha,
            "beta": self.beta,
        }
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            for name in self.MATRICES:
                m = getattr(self, name)
                rows, cols = np.nonzero(m)  # row-major, so already sorted by (row, col)
                fh.write(f"# {name} {m.shape[0]} {m.shape[1]} {rows.size}\n")
                for r, c in zip(rows.tolist(), cols.tolist()):
                    fh.write(f"{r} {c} {float(m[r, c])!r}\n")

    @classmethod
    def load(cls, path) -> "GraphBundle":
        with open(path, encoding="utf-8") as fh:
            header = json.loads(fh.readline())
            if header.get("version") != GRAPH_FORMAT_VERSION:
                raise ValueError(f"{path}: unsupported graph format version {header.get('version')}")
            mats = {}
            for _ in cls.MATRICES:
                _, name, nr, nc, nnz = fh.readline().split()
                m = np.zeros((int(nr), int(nc)))
                for _ in range(int(nnz)):
                    r, c, v = fh.readline().split()
                    m[int(r), int(c)] = float(v)
                mats[name] = m
        return cls(
            alpha=header["alpha"],
            beta=header["beta"],
            num_leaves=header["num_leaves"],
            num_nodes=header["num_nodes"],
            **mats,
        )


def build_graph_bundle(
    taxonomy: Taxonomy,
    samples: Iterable[ClickSample],
    leaf_embeddings: np.ndarray,
    alpha: float = 0.5,
    beta: float = 0.5,
    use_coo: bool = True,
    use_sim: bool = True,
    use_hier: bool = True,
) -> GraphBundle:
    """Build all graphs from a training split; dropped graphs are stored as zeros."""
    samples = list(samples)
    nl, nn = taxonomy.num_leaves, taxonomy.num_nodes
    counts = count_cooccurrence(samples, taxonomy)
    a_coo = build_cooccurrence(counts, alpha) if use_coo else np.zeros((nl, nl))
    a_sim = build_similarity(leaf_embeddings, beta, taxonomy.leaf_index) if use_sim else np.zeros((nl, nl))
    a_hier = build_hierarchy(taxonomy, dict(counts.label_counts)) if use_hier else np.zeros((nn, nn))
    a_fused = fuse_graphs(a_coo if use_coo else None, a_sim if use_sim else None, a_hier, taxonomy)
    return GraphBundle(alpha, beta, nl, nn, a_coo, a_sim, a_hier, a_fused, normalize_adjacency(a_fused))


def _check_unit(key: str, value: float) -> None:
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{key} must lie in [0, 1], got {value}")
