"""Corpus types, JSONL loaders, dataset statistics and the synthetic corpus generator."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class CorpusError(ValueError):
    """Base class for problems with corpus files or values."""


class ParseError(CorpusError):
    def __init__(self, path, lineno: int, msg: str):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.path = path
        self.lineno = lineno


class StructureError(CorpusError):
    def __init__(self, node_id, msg: str):
        super().__init__(f"node {node_id}: {msg}")
        self.node_id = node_id


class ValidationError(CorpusError):
    pass


class ConfigError(ValueError):
    """A configuration value is out of its allowed range."""

    def __init__(self, key: str, msg: str):
        super().__init__(f"{key}: {msg}")
        self.key = key


@dataclass(frozen=True)
class LabelNode:
    id: int
    name: str
    side_info: tuple[str, ...] = ()
    parent_id: int | None = None
    level: int = 1
    is_leaf: bool = True

    def __post_init__(self):
        if not self.name:
            raise StructureError(self.id, "empty label name")
        if (self.parent_id is None) != (self.level == 1):
            raise StructureError(self.id, "parent_id must be absent exactly for level-1 nodes")


@dataclass(frozen=True)
class KnowledgeRecord:
    id: int
    text: str
    kind: str = "world"

    def __post_init__(self):
        if not self.text:
            raise ValidationError(f"knowledge record {self.id}: empty text")
        if self.kind not in ("posterior", "world"):
            raise ValidationError(f"knowledge record {self.id}: unknown kind {self.kind!r}")


@dataclass(frozen=True)
class ClickSample:
    query_text: str
    clicked_leaf_ids: frozenset[int]
    knowledge_ids: tuple[int, ...] = ()


@dataclass(frozen=True)
class DatasetStats:
    num_queries: int
    avg_chars: float
    total_labels: int
    avg_labels: float
    min_labels: int
    max_labels: int

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=False)


class Taxonomy:
    """A label forest with fixed row orders.

    ``all_index`` lists internal nodes (ascending id) followed by the leaves
    (ascending id), so the leaf rows of any ``|C'| x d`` matrix are the
    trailing block ``[num_internal:]``.
    """

    def __init__(self, nodes: Iterable[LabelNode]):
        self.nodes: list[LabelNode] = sorted(nodes, key=lambda n: n.id)
        self.by_id: dict[int, LabelNode] = {n.id: n for n in self.nodes}
        self.leaf_index: list[int] = [n.id for n in self.nodes if n.is_leaf]
        internal = [n.id for n in self.nodes if not n.is_leaf]
        self.all_index: list[int] = internal + self.leaf_index
        self.num_internal = len(internal)
        self.row_of: dict[int, int] = {nid: i for i, nid in enumerate(self.all_index)}
        self.leaf_pos: dict[int, int] = {nid: i for i, nid in enumerate(self.leaf_index)}
        self.children: dict[int, list[int]] = {n.id: [] for n in self.nodes}
        for n in self.nodes:
            if n.parent_id is not None:
                self.children[n.parent_id].append(n.id)

    @property
    def num_leaves(self) -> int:
        return len(self.leaf_index)

    @property
    def num_nodes(self) -> int:
        return len(self.all_index)

    def __eq__(self, other):
        return isinstance(other, Taxonomy) and self.nodes == other.nodes

    def __repr__(self):
        return f"Taxonomy(|C'|={self.num_nodes}, |C|={self.num_leaves})"

    @classmethod
    def from_records(cls, records: Sequence[dict]) -> "Taxonomy":
        """Validate raw ``{id, name, parent_id, side_info}`` records and derive level/is_leaf."""
        parent: dict[int, int | None] = {}
        for rec in records:
            nid = rec["id"]
            if nid in parent:
                raise StructureError(nid, "duplicate id")
            parent[nid] = rec.get("parent_id")
        for nid, pid in parent.items():
            if pid is None:
                continue
            if pid == nid:
                raise StructureError(nid, "node is its own parent")
            if pid not in parent:
                raise StructureError(nid, f"dangling parent {pid}")

        levels: dict[int, int] = {}
        for nid in parent:
            chain = []
            cur = nid
            while cur not in levels and parent[cur] is not None:
                if cur in chain:
                    raise StructureError(nid, "cycle in parent links")
                chain.append(cur)
                cur = parent[cur]
            base = levels.get(cur, 1)
            levels.setdefault(cur, base)
            for depth, c in enumerate(reversed(chain), start=1):
                levels[c] = base + depth

        has_child = {pid for pid in parent.values() if pid is not None}
        nodes = [
            LabelNode(
                id=rec["id"],
                name=rec["name"],
                side_info=tuple(rec.get("side_info") or ()),
                parent_id=rec.get("parent_id"),
                level=levels[rec["id"]],
                is_leaf=rec["id"] not in has_child,
            )
            for rec in records
        ]
        return cls(nodes)

    def to_records(self) -> list[dict]:
        return [
            {"id": n.id, "name": n.name, "parent_id": n.parent_id, "side_info": list(n.side_info)}
            for n in self.nodes
        ]


def _read_jsonl(path) -> list[tuple[int, dict]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(path, lineno, f"invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise ParseError(path, lineno, "expected a JSON object")
            rows.append((lineno, obj))
    return rows


def _write_jsonl(path, objs: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for obj in objs:
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


def load_taxonomy(path) -> Taxonomy:
    records = []
    for lineno, obj in _read_jsonl(path):
        try:
            nid = obj["id"]
            name = obj["name"]
        except KeyError as exc:
            raise ParseError(path, lineno, f"missing field {exc.args[0]!r}") from None
        pid = obj.get("parent_id")
        side = obj.get("side_info", [])
        if not isinstance(nid, int) or (pid is not None and not isinstance(pid, int)):
            raise ParseError(path, lineno, "id and parent_id must be integers")
        if not isinstance(name, str) or not isinstance(side, list):
            raise ParseError(path, lineno, "name must be a string and side_info a list")
        records.append({"id": nid, "name": name, "parent_id": pid, "side_info": side})
    return Taxonomy.from_records(records)


def save_taxonomy(taxonomy: Taxonomy, path) -> None:
    _write_jsonl(path, taxonomy.to_records())


def load_knowledge(path) -> dict[int, KnowledgeRecord]:
    out: dict[int, KnowledgeRecord] = {}
    for lineno, obj in _read_jsonl(path):
        try:
            rec = KnowledgeRecord(id=obj["id"], text=obj["text"], kind=obj.get("kind", "world"))
        except KeyError as exc:
            raise ParseError(path, lineno, f"missing field {exc.args[0]!r}") from None
        except ValidationError as exc:
            raise ParseError(path, lineno, str(exc)) from None
        if rec.id in out:
            raise ParseError(path, lineno, f"duplicate knowledge id {rec.id}")
        out[rec.id] = rec
    return out


def save_knowledge(knowledge: dict[int, KnowledgeRecord], path) -> None:
    _write_jsonl(path, ({"id": r.id, "text": r.text, "kind": r.kind} for r in knowledge.values()))


def validate_sample(sample: ClickSample, taxonomy: Taxonomy | None, knowledge=None) -> None:
    if not sample.clicked_leaf_ids:
        raise ValidationError(f"query {sample.query_text!r}: empty clicked label set")
    if taxonomy is None:
        return
    for lid in sample.clicked_leaf_ids:
        if lid not in taxonomy.leaf_pos:
            raise ValidationError(f"query {sample.query_text!r}: label {lid} is not a taxonomy leaf")
    if knowledge is not None:
        for kid in sample.knowledge_ids:
            if kid not in knowledge:
                raise ValidationError(f"query {sample.query_text!r}: unknown knowledge id {kid}")


def load_clicks(path, taxonomy: Taxonomy | None, knowledge=None) -> list[ClickSample]:
    """Load a click log. Samples are kept in file order; repeated queries are not merged.

    With ``taxonomy=None`` only the non-empty label set is checked.
    """
    samples = []
    for lineno, obj in _read_jsonl(path):
        try:
            sample = ClickSample(
                query_text=obj["query"],
                clicked_leaf_ids=frozenset(obj["clicked_label_ids"]),
                knowledge_ids=tuple(obj.get("knowledge_ids") or ()),
            )
        except KeyError as exc:
            raise ParseError(path, lineno, f"missing field {exc.args[0]!r}") from None
        try:
            validate_sample(sample, taxonomy, knowledge)
        except ValidationError as exc:
            raise ValidationError(f"{path}:{lineno}: {exc}") from None
        samples.append(sample)
    return samples


def save_clicks(samples: Iterable[ClickSample], path) -> None:
    _write_jsonl(
        path,
        (
            {
                "query": s.query_text,
                "clicked_label_ids": sorted(s.clicked_leaf_ids),
                "knowledge_ids": list(s.knowledge_ids),
            }
            for s in samples
        ),
    )


def compute_stats(samples: Sequence[ClickSample]) -> DatasetStats:
    if not samples:
        raise ValidationError("cannot compute statistics of an empty sample list")
    # len() of a str counts code points, i.e. characters rather than bytes
    chars = [len(s.query_text) for s in samples]
    labels = [len(s.clicked_leaf_ids) for s in samples]
    n = len(samples)
    return DatasetStats(
        num_queries=n,
        avg_chars=sum(chars) / n,
        total_labels=len(set().union(*(s.clicked_leaf_ids for s in samples))),
        avg_labels=sum(labels) / n,
        min_labels=min(labels),
        max_labels=max(labels),
    )


def split_dataset(samples: Sequence, ratios=(0.8, 0.1, 0.1), seed: int = 0):
    """Shuffle with ``seed``, then cut: floor the train and val sizes, test takes the rest."""
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ConfigError("split_ratios", "expected three non-negative ratios")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError("split_ratios", f"ratios sum to {sum(ratios)!r}, expected 1.0")
    n = len(samples)
    order = np.random.default_rng(seed).permutation(n)
    n_train = math.floor(ratios[0] * n + 1e-9)
    n_val = min(math.floor(ratios[1] * n + 1e-9), n - n_train)
    shuffled = [samples[i] for i in order]
    return shuffled[:n_train], shuffled[n_train : n_train + n_val], shuffled[n_train + n_val :]


def leaf_click_counts(samples: Iterable[ClickSample], taxonomy: Taxonomy) -> dict[int, int]:
    counts = {lid: 0 for lid in taxonomy.leaf_index}
    for s in samples:
        for lid in s.clicked_leaf_ids:
            counts[lid] += 1
    return counts


# ---------------------------------------------------------------------------
# synthetic corpus

NOISE_WORDS = tuple(f"n{i:02d}" for i in range(30))


def _leaf_words(node: LabelNode) -> list[str]:
    return [node.name, *node.side_info]


def _compose_query(rng: np.random.Generator, nodes: Sequence[LabelNode]) -> str:
    tokens = []
    for node in nodes:
        tokens.append(node.name)
        if node.side_info and rng.random() < 0.5:
            tokens.append(node.side_info[int(rng.integers(len(node.side_info)))])
    for _ in range(int(rng.integers(1, 3))):
        tokens.append(NOISE_WORDS[int(rng.integers(len(NOISE_WORDS)))])
    rng.shuffle(tokens)
    return " ".join(tokens)


def _compose_tail_query(rng: np.random.Generator, node: LabelNode) -> str:
    tokens = [node.name, node.side_info[int(rng.integers(len(node.side_info)))]]
    for _ in range(int(rng.integers(1, 3))):
        tokens.append(NOISE_WORDS[int(rng.integers(len(NOISE_WORDS)))])
    rng.shuffle(tokens)
    return " ".join(tokens)


def tail_leaf_count(num_labels: int, tail_fraction: float) -> int:
    return math.floor(round(tail_fraction * num_labels, 9))


@dataclass
class SyntheticLayout:
    """Bookkeeping shared by the click generator and the probe generator."""

    taxonomy: Taxonomy
    tail_leaves: list[int]
    head_sibling: dict[int, int] = field(default_factory=dict)
    record_of: dict[int, int] = field(default_factory=dict)


def _synthetic_layout(num_labels: int, tail_fraction: float, rng) -> SyntheticLayout:
    num_parents = max(1, math.ceil(num_labels / 5))
    parent_ids = list(range(1, num_parents + 1))
    first_leaf = 1000
    records = [{"id": p, "name": f"group{p:02d}", "parent_id": None, "side_info": [f"g{p:02d}"]} for p in parent_ids]
    parent_of = {}
    for j in range(num_labels):
        lid = first_leaf + j
        pid = parent_ids[j % num_parents]
        parent_of[lid] = pid
        records.append(
            {"id": lid, "name": f"s{j:03d}", "parent_id": pid, "side_info": [f"a{j:03d}", f"b{j:03d}"]}
        )
    taxonomy = Taxonomy.from_records(records)

    n_tail = tail_leaf_count(num_labels, tail_fraction)
    if n_tail > num_labels - num_parents:
        raise ValueError("tail_fraction too large: every group needs a clicked leaf")
    # every group keeps at least one clicked leaf so a tail leaf has a popular sibling
    tail: list[int] = []
    head_left = {p: len(taxonomy.children[p]) for p in parent_ids}
    for lid in rng.permutation(taxonomy.leaf_index).tolist():
        if len(tail) == n_tail:
            break
        if head_left[parent_of[lid]] > 1:
            tail.append(lid)
            head_left[parent_of[lid]] -= 1
    tail.sort()
    tail_set = set(tail)
    sibling = {}
    for lid in tail:
        heads = [c for c in taxonomy.children[parent_of[lid]] if c not in tail_set]
        sibling[lid] = heads[0]
    record_of = {lid: k for k, lid in enumerate(taxonomy.leaf_index, start=1)}
    return SyntheticLayout(taxonomy, tail, sibling, record_of)


def generate_synthetic(num_labels: int, num_queries: int, tail_fraction: float = 0.0, seed: int = 0):
    """Build a two-level synthetic corpus.

    Each leaf ``j`` is named by a signature token ``sNNN`` with two side words.
    A query carries its gold labels' signature tokens plus noise words. Tail
    leaves are never clicked: queries about them are logged as clicks on a
    popular sibling, and only their knowledge record (which repeats the tail
    label's words) points at the true label.

    Returns ``(taxonomy, samples, knowledge)``.
    """
    if num_labels < 2:
        raise ValueError("num_labels must be >= 2")
    if num_queries < num_labels:
        raise ValueError("num_queries must be >= num_labels so every leaf can be covered")
    rng = np.random.default_rng(seed)
    layout = _synthetic_layout(num_labels, tail_fraction, rng)
    tax = layout.taxonomy
    knowledge = {
        kid: KnowledgeRecord(kid, " ".join(_leaf_words(tax.by_id[lid])), "world")
        for lid, kid in layout.record_of.items()
    }

    tail_set = set(layout.tail_leaves)
    head = [lid for lid in tax.leaf_index if lid not in tail_set]
    n_tail_queries = round(num_queries * len(tail_set) / num_labels)
    kinds = ["tail"] * n_tail_queries + ["head"] * (num_queries - n_tail_queries)
    # cover each leaf once before sampling at random
    head_cover = list(head)
    tail_cover = list(layout.tail_leaves)
    samples = []
    for kind in kinds:
        if kind == "tail":
            lid = tail_cover.pop(0) if tail_cover else layout.tail_leaves[int(rng.integers(len(tail_set)))]
            text = _compose_tail_query(rng, tax.by_id[lid])
            samples.append(ClickSample(text, frozenset({layout.head_sibling[lid]}), (layout.record_of[lid],)))
            continue
        primary = head_cover.pop(0) if head_cover else head[int(rng.integers(len(head)))]
        gold = [primary]
        siblings = [c for c in tax.children[tax.by_id[primary].parent_id] if c not in tail_set and c != primary]
        for p in (0.3, 0.1):
            if siblings and rng.random() < p:
                gold.append(siblings.pop(int(rng.integers(len(siblings)))))
        text = _compose_query(rng, [tax.by_id[g] for g in gold])
        samples.append(ClickSample(text, frozenset(gold), (layout.record_of[primary],)))
    order = rng.permutation(len(samples))
    samples = [samples[i] for i in order]
    return tax, samples, knowledge


def generate_probes(num_labels: int, num_queries: int, tail_fraction: float = 0.0, seed: int = 0, probe_seed: int = 1):
    """Held-out queries labelled with their true intent, for a corpus from ``generate_synthetic``.

    Unlike the click log, a query about a tail leaf is labelled with the tail
    leaf itself. ``num_labels``, ``tail_fraction`` and ``seed`` must match the
    generator call so the same tail leaves are chosen.
    """
    layout = _synthetic_layout(num_labels, tail_fraction, np.random.default_rng(seed))
    tax = layout.taxonomy
    rng = np.random.default_rng([seed, probe_seed])
    tail_set = set(layout.tail_leaves)
    probes = []
    for _ in range(num_queries):
        lid = tax.leaf_index[int(rng.integers(len(tax.leaf_index)))]
        node = tax.by_id[lid]
        if lid in tail_set:
            text = _compose_tail_query(rng, node)
        else:
            text = _compose_query(rng, [node])
        probes.append(ClickSample(text, frozenset({lid}), (layout.record_of[lid],)))
    return probes


def write_corpus(out_dir, taxonomy: Taxonomy, samples, knowledge) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "taxonomy": out / "taxonomy.jsonl",
        "clicks": out / "clicks.jsonl",
        "knowledge": out / "knowledge.jsonl",
    }
    save_taxonomy(taxonomy, paths["taxonomy"])
    save_clicks(samples, paths["clicks"])
    save_knowledge(knowledge, paths["knowledge"])
    return paths
