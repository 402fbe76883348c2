"""End-to-end training: interaction layer, BCE on fused targets, Adam, epoch loop."""

from __future__ import annotations

import configparser
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import ClickSample, ConfigError, KnowledgeRecord, Taxonomy, leaf_click_counts
from .encoder import (
    EncoderParams,
    Vocab,
    build_label_sequence,
    encode_batch,
    encode_batch_backward,
    init_encoder,
    tokenize,
)
from .graph import GcnParams, GraphBundle, build_graph_bundle, gcn_backward, gcn_forward, init_gcn
from .metrics import MetricsReport, binarize, evaluate_sets
from .semi import SemiTargets, TauSchedule, attention_fuse, semi_target_matrix, tau_at
from .tensorfile import read_tensor_file, write_tensor_file

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"QCLFCKPT"
CHECKPOINT_VERSION = 1
SCORE_CLIP = 1e-7


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 64
    epochs: int = 20
    dim: int = 64
    tau_start: float = 1.0
    tau_end: float = 0.8
    alpha_threshold: float = 0.5
    beta_threshold: float = 0.5
    seed: int = 0
    use_label_enhanced: bool = True
    use_knowledge: bool = True
    use_semi: bool = True
    use_structure: bool = True
    use_graph_coo: bool = True
    use_graph_sim: bool = True
    use_graph_hier: bool = True
    label_refresh: int = 1
    max_query_len: int = 20
    max_label_len: int = 40
    # not part of the core key set; optional in config files
    tokenizer: str = "mixed"
    decision_threshold: float = 0.5

    def __post_init__(self):
        for key in ("learning_rate", "batch_size", "epochs", "dim", "label_refresh", "max_query_len", "max_label_len"):
            if getattr(self, key) <= 0 and not (key == "epochs" and self.epochs == 0):
                raise ConfigError(key, f"must be positive, got {getattr(self, key)!r}")
        for key in ("tau_start", "tau_end", "alpha_threshold", "beta_threshold"):
            if not 0.0 <= getattr(self, key) <= 1.0:
                raise ConfigError(key, f"must lie in [0, 1], got {getattr(self, key)!r}")
        if self.tau_end > self.tau_start:
            raise ConfigError("tau_end", "must not exceed tau_start")
        if not 0.0 < self.decision_threshold < 1.0:
            raise ConfigError("decision_threshold", "must lie in (0, 1)")
        if self.tokenizer not in ("mixed", "char", "word"):
            raise ConfigError("tokenizer", f"unknown mode {self.tokenizer!r}")
        if not self.use_structure:
            self.use_graph_coo = self.use_graph_sim = self.use_graph_hier = False

    @property
    def schedule(self) -> TauSchedule:
        return TauSchedule(self.tau_start, self.tau_end, max(self.epochs, 1))

    def with_overrides(self, **kw) -> "TrainConfig":
        return replace(self, **kw)

    @classmethod
    def from_mapping(cls, raw: dict) -> "TrainConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        values = {}
        for key, val in raw.items():
            if key not in kinds:
                raise ConfigError(key, "unknown configuration key")
            values[key] = _coerce(key, val, kinds[key])
        return cls(**values)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        """Read flat ``key = value`` lines (``#`` comments allowed)."""
        parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
        parser.optionxform = str
        with open(path, encoding="utf-8") as fh:
            parser.read_string("[config]\n" + fh.read())
        return cls.from_mapping(dict(parser["config"]))

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in asdict(self).items())


def _fmt(v) -> str:
    return str(v).lower() if isinstance(v, bool) else repr(v) if isinstance(v, float) else str(v)


def _coerce(key: str, val, kind: str):
    try:
        if kind == "bool":
            if isinstance(val, bool):
                return val
            s = str(val).strip().lower()
            if s in ("1", "true", "yes", "on"):
                return True
            if s in ("0", "false", "no", "off"):
                return False
            raise ValueError(s)
        if kind == "int":
            return int(val)
        if kind == "float":
            return float(val)
        return str(val).strip()
    except ValueError:
        raise ConfigError(key, f"cannot parse {val!r} as {kind}") from None


ABLATIONS: dict[str, dict] = {
    "full": {},
    "w/o SE-S": {"use_graph_sim": False},
    "w/o SE-C": {"use_graph_coo": False},
    "w/o SE-H": {"use_graph_hier": False},
    "w/o SE": {"use_structure": False},
    "w/o KE": {"use_knowledge": False},
    "w/o LE&KE": {"use_label_enhanced": False, "use_knowledge": False, "use_semi": False},
}


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_update(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam step, applied to ``params`` in place."""
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1**t)
        v_hat = v / (1.0 - state.beta2**t)
        p -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# model state


@dataclass
class ModelState:
    encoder: EncoderParams
    gcn: GcnParams
    bias: np.ndarray
    config: TrainConfig
    vocab: Vocab
    leaf_ids: list[int]
    all_ids: list[int]
    label_table: np.ndarray | None = None
    epoch: int = 0
    leaf_clicks: dict[int, int] = field(default_factory=dict)

    def parameters(self) -> dict[str, np.ndarray]:
        """Trainable tensors in declared order; the arrays are the live storage."""
        out = {f"encoder.{k}": v for k, v in self.encoder.named().items()}
        if self.config.use_structure:
            out.update({f"gcn.{k}": v for k, v in self.gcn.named().items()})
        if self.label_table is not None:
            out["label_table"] = self.label_table
        out["bias"] = self.bias
        return out

    def save(self, path, adam: AdamState | None = None) -> None:
        tensors = dict(self.parameters())
        if not self.config.use_structure:
            tensors.update({f"gcn.{k}": v for k, v in self.gcn.named().items()})
        if adam is not None:
            for name in list(tensors):
                if name in adam.m:
                    tensors[f"adam.m.{name}"] = adam.m[name]
                    tensors[f"adam.v.{name}"] = adam.v[name]
        header = {
            "config": asdict(self.config),
            "vocab": {"tokens": self.vocab.tokens, "mode": self.vocab.mode},
            "leaf_ids": self.leaf_ids,
            "all_ids": self.all_ids,
            "epoch": self.epoch,
            "leaf_clicks": [[k, v] for k, v in sorted(self.leaf_clicks.items())],
            "adam_step": adam.step if adam is not None else None,
            "tensors": [[k, list(v.shape)] for k, v in tensors.items()],
        }
        write_tensor_file(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, header, tensors)

    @classmethod
    def load(cls, path) -> tuple["ModelState", AdamState | None]:
        header, tensors = read_tensor_file(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
        enc = EncoderParams(**{k[len("encoder.") :]: v for k, v in tensors.items() if k.startswith("encoder.")})
        gcn = GcnParams(**{k[len("gcn.") :]: v for k, v in tensors.items() if k.startswith("gcn.")})
        model = cls(
            encoder=enc,
            gcn=gcn,
            bias=tensors["bias"],
            config=TrainConfig(**header["config"]),
            vocab=Vocab(header["vocab"]["tokens"], header["vocab"]["mode"]),
            leaf_ids=header["leaf_ids"],
            all_ids=header["all_ids"],
            label_table=tensors.get("label_table"),
            epoch=header["epoch"],
            leaf_clicks={k: v for k, v in header["leaf_clicks"]},
        )
        adam = None
        if header["adam_step"] is not None:
            adam = AdamState(step=header["adam_step"])
            for name in model.parameters():
                if f"adam.m.{name}" in tensors:
                    adam.m[name] = tensors[f"adam.m.{name}"]
                    adam.v[name] = tensors[f"adam.v.{name}"]
        return model, adam


def init_model(config: TrainConfig, vocab: Vocab, taxonomy: Taxonomy, leaf_clicks=None) -> ModelState:
    rng = np.random.default_rng(config.seed)
    d = config.dim
    encoder = init_encoder(len(vocab), d, d, d, rng)
    gcn = init_gcn(d, d, rng)
    label_table = None
    if not config.use_label_enhanced:
        label_table = rng.uniform(-0.05, 0.05, (taxonomy.num_nodes, d))
    return ModelState(
        encoder=encoder,
        gcn=gcn,
        bias=np.zeros(taxonomy.num_leaves),
        config=config,
        vocab=vocab,
        leaf_ids=list(taxonomy.leaf_index),
        all_ids=list(taxonomy.all_index),
        label_table=label_table,
        leaf_clicks=dict(leaf_clicks or {}),
    )


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class Workspace:
    """Token sequences and the normalized graph, prepared once per corpus."""

    taxonomy: Taxonomy
    vocab: Vocab
    config: TrainConfig
    label_seqs: list[np.ndarray]
    knowledge_seqs: dict[int, np.ndarray]
    a_hat: np.ndarray | None = None

    @classmethod
    def build(cls, taxonomy, vocab, config, knowledge=None, graph: GraphBundle | None = None) -> "Workspace":
        label_seqs = [
            tokenize(build_label_sequence(taxonomy.by_id[nid]), vocab, config.max_label_len)
            for nid in taxonomy.all_index
        ]
        kseqs = {kid: tokenize(rec.text, vocab, config.max_label_len) for kid, rec in (knowledge or {}).items()}
        a_hat = graph.a_hat if (graph is not None and config.use_structure) else None
        if a_hat is not None and a_hat.shape[0] != taxonomy.num_nodes:
            raise ValueError("graph bundle does not match the taxonomy")
        return cls(taxonomy, vocab, config, label_seqs, kseqs, a_hat)


@dataclass
class EncodedBatch:
    query_seqs: list[np.ndarray]
    click: np.ndarray  # B x |C| multi-hot
    knowledge_ids: list[tuple[int, ...]]

    def __len__(self):
        return len(self.query_seqs)


def encode_samples(samples: Sequence[ClickSample], ws: Workspace) -> EncodedBatch:
    click = np.zeros((len(samples), ws.taxonomy.num_leaves))
    for b, s in enumerate(samples):
        for lid in s.clicked_leaf_ids:
            click[b, ws.taxonomy.leaf_pos[lid]] = 1.0
    return EncodedBatch(
        [tokenize(s.query_text, ws.vocab, ws.config.max_query_len) for s in samples],
        click,
        [tuple(s.knowledge_ids) for s in samples],
    )


@dataclass
class LabelForward:
    x: np.ndarray  # |C'| x d label features
    cache: object | None  # encoder cache when X comes from the encoder


def label_forward(model: ModelState, ws: Workspace) -> LabelForward:
    if model.config.use_label_enhanced:
        x, cache = encode_batch(ws.label_seqs, model.encoder)
        return LabelForward(x, cache)
    return LabelForward(model.label_table, None)


def leaf_representations(model: ModelState, ws: Workspace, labels: LabelForward | None = None):
    """H_l (``|C| x d``) plus the GCN cache (None without the structure module)."""
    labels = labels or label_forward(model, ws)
    s = ws.taxonomy.num_internal
    if model.config.use_structure:
        h, gcache = gcn_forward(ws.a_hat, labels.x, model.gcn)
        return h[s:], gcache
    return labels.x[s:], None


def fused_queries(model: ModelState, ws: Workspace, batch: EncodedBatch, q: np.ndarray) -> np.ndarray:
    if not model.config.use_knowledge:
        return q
    out = q.copy()
    wanted = sorted({k for ks in batch.knowledge_ids for k in ks})
    if not wanted:
        return out
    kemb, _ = encode_batch([ws.knowledge_seqs[k] for k in wanted], model.encoder)
    row = {k: i for i, k in enumerate(wanted)}
    for b, ks in enumerate(batch.knowledge_ids):
        if ks:
            out[b] = attention_fuse(q[b], kemb[[row[k] for k in ks]]).values
    return out


def semi_targets(model, ws, batch, q, labels: LabelForward, tau: float) -> np.ndarray:
    """Dense semi-supervised targets; plain values, never differentiated."""
    leaf_c = labels.x[ws.taxonomy.num_internal :]
    return semi_target_matrix(fused_queries(model, ws, batch, q), leaf_c, tau)


def semi_targets_for(model: ModelState, ws: Workspace, samples: Sequence[ClickSample], tau: float) -> list[SemiTargets]:
    """Per-sample semi targets keyed by leaf id, as the trainer would see them at ``tau``."""
    if not samples:
        return []
    batch = encode_samples(samples, ws)
    q, _ = encode_batch(batch.query_seqs, model.encoder)
    dense = semi_targets(model, ws, batch, q, label_forward(model, ws), tau)
    return [SemiTargets({lid: float(v) for lid, v in zip(model.leaf_ids, row) if v}) for row in dense]


def predict_scores(query_emb: np.ndarray, h_leaf: np.ndarray, bias: np.ndarray) -> np.ndarray:
    query_emb = np.asarray(query_emb, dtype=float)
    if query_emb.shape[-1] != h_leaf.shape[1] or bias.shape != (h_leaf.shape[0],):
        raise ValueError(f"shape mismatch: q {query_emb.shape}, H_l {h_leaf.shape}, b {bias.shape}")
    return _sigmoid(query_emb @ h_leaf.T + bias)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def bce_loss(scores: np.ndarray, targets: np.ndarray) -> float:
    """Mean over labels (and samples) of binary cross-entropy, scores clipped away from 0 and 1."""
    targets = np.asarray(targets, dtype=float)
    if np.any((targets < 0) | (targets > 1)):
        raise ValueError("targets must lie in [0, 1]")
    s = np.clip(scores, SCORE_CLIP, 1.0 - SCORE_CLIP)
    per = -(targets * np.log(s) + (1.0 - targets) * np.log(1.0 - s))
    return float(per.mean())


def _logit_bce(logits: np.ndarray, targets: np.ndarray) -> float:
    # same objective as bce_loss on sigmoid(logits), without saturating at the clip
    return float((np.logaddexp(0.0, logits) - targets * logits).mean())


@dataclass
class StepResult:
    loss: float
    grads: dict[str, np.ndarray]
    targets: np.ndarray


def loss_and_grads(
    model: ModelState,
    ws: Workspace,
    batch: EncodedBatch,
    tau: float,
    targets: np.ndarray | None = None,
    labels: LabelForward | None = None,
) -> StepResult:
    """Loss and gradients for every parameter in ``model.parameters()``.

    ``targets`` overrides the fused click+semi targets. ``labels`` supplies
    stale label features (label refresh); the label branch of the encoder then
    receives no gradient.
    """
    cfg = model.config
    s = ws.taxonomy.num_internal
    q, qcache = encode_batch(batch.query_seqs, model.encoder)
    stale = labels is not None
    labels = labels or label_forward(model, ws)
    h_leaf, gcache = leaf_representations(model, ws, labels)
    logits = q @ h_leaf.T + model.bias

    if targets is None:
        semi = semi_targets(model, ws, batch, q, labels, tau) if cfg.use_semi else None
        targets = np.minimum(batch.click + semi, 1.0) if semi is not None else batch.click
    loss = _logit_bce(logits, targets)

    g_logits = (_sigmoid(logits) - targets) / logits.size
    g_q = g_logits @ h_leaf
    g_hleaf = g_logits.T @ q
    grads: dict[str, np.ndarray] = {}
    enc = encode_batch_backward(qcache, model.encoder, g_q)

    g_x = np.zeros((ws.taxonomy.num_nodes, g_hleaf.shape[1]))
    if cfg.use_structure:
        g_h = np.zeros_like(g_x)
        g_h[s:] = g_hleaf
        g_gcn, g_x = gcn_backward(ws.a_hat, gcache, model.gcn, g_h)
        grads.update({f"gcn.{k}": v for k, v in g_gcn.named().items()})
    else:
        g_x[s:] = g_hleaf
    if cfg.use_label_enhanced:
        if not stale:
            enc = enc + encode_batch_backward(labels.cache, model.encoder, g_x)
    else:
        grads["label_table"] = g_x
    grads.update({f"encoder.{k}": v for k, v in enc.named().items()})
    grads["bias"] = g_logits.sum(axis=0)

    ordered = {name: grads[name] for name in model.parameters()}
    if not np.isfinite(loss):
        bad = [n for n, p in model.parameters().items() if not np.all(np.isfinite(p))]
        where = f" (non-finite values in {', '.join(bad)})" if bad else ""
        raise FloatingPointError(f"non-finite loss {loss}{where}")
    for name, g in ordered.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name}")
    return StepResult(loss, ordered, targets)


def train_step(model: ModelState, ws: Workspace, batch: EncodedBatch, adam: AdamState, tau: float, labels=None) -> StepResult:
    """One Adam step on ``batch``; updates ``model`` and ``adam`` in place."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    res = loss_and_grads(model, ws, batch, tau, labels=labels)
    adam_update(model.parameters(), res.grads, adam, model.config.learning_rate)
    for name, p in model.parameters().items():
        if not np.all(np.isfinite(p)):
            raise FloatingPointError(f"non-finite values in {name} after update")
    return res


# ---------------------------------------------------------------------------
# inference + evaluation


def score_texts(model: ModelState, ws: Workspace, texts: Sequence[str], h_leaf=None) -> np.ndarray:
    if h_leaf is None:
        h_leaf, _ = leaf_representations(model, ws)
    seqs = [tokenize(t, ws.vocab, ws.config.max_query_len) for t in texts]
    q, _ = encode_batch(seqs, model.encoder)
    return predict_scores(q, h_leaf, model.bias)


def evaluate(model: ModelState, ws: Workspace, samples: Sequence[ClickSample], threshold=None, label_clicks=None) -> MetricsReport:
    threshold = model.config.decision_threshold if threshold is None else threshold
    scores = score_texts(model, ws, [s.query_text for s in samples]) if samples else np.zeros((0, len(model.leaf_ids)))
    preds = [binarize(row, threshold, model.leaf_ids) for row in scores]
    clicks = model.leaf_clicks if label_clicks is None else label_clicks
    return evaluate_sets(preds, [s.clicked_leaf_ids for s in samples], model.leaf_ids, clicks)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: ModelState
    graph: GraphBundle | None
    log: list[dict]
    adam: AdamState


def build_vocab(taxonomy: Taxonomy, samples, knowledge, mode: str = "mixed") -> Vocab:
    texts = [build_label_sequence(n) for n in taxonomy.nodes]
    texts += [s.query_text for s in samples]
    texts += [knowledge[k].text for k in sorted(knowledge or {})]
    return Vocab.build(texts, mode)


def prepare(config: TrainConfig, train_samples, taxonomy: Taxonomy, knowledge, graph: GraphBundle | None = None):
    """Vocab, initial model, graph bundle and workspace for a training run."""
    vocab = build_vocab(taxonomy, train_samples, knowledge, config.tokenizer)
    model = init_model(config, vocab, taxonomy, leaf_click_counts(train_samples, taxonomy))
    if config.use_structure and graph is None:
        ws0 = Workspace.build(taxonomy, vocab, config, knowledge)
        leaf_emb = label_forward(model, ws0).x[taxonomy.num_internal :]
        graph = build_graph_bundle(
            taxonomy,
            train_samples,
            leaf_emb,
            config.alpha_threshold,
            config.beta_threshold,
            config.use_graph_coo,
            config.use_graph_sim,
            config.use_graph_hier,
        )
    ws = Workspace.build(taxonomy, vocab, config, knowledge, graph)
    return model, graph, ws


def train(
    config: TrainConfig,
    train_samples: Sequence[ClickSample],
    val_samples: Sequence[ClickSample],
    taxonomy: Taxonomy,
    knowledge: dict[int, KnowledgeRecord] | None = None,
    out_dir=None,
    graph: GraphBundle | None = None,
    stop_after: int | None = None,
) -> TrainResult:
    """Train for ``config.epochs`` epochs, or only the first ``stop_after`` of them.

    The tau schedule always spans ``config.epochs``, so stopping early leaves
    the run exactly where the full run was after that many epochs.
    """
    model, graph, ws = prepare(config, train_samples, taxonomy, knowledge, graph)
    adam = AdamState()
    history: list[dict] = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if graph is not None:
            graph.save(out / "graph.txt")
        vocab_path = out / "vocab.jsonl"
        model.vocab.save(vocab_path)
        (out / "metrics.jsonl").write_text("")
    encoded = encode_samples(train_samples, ws)
    best_f1 = -1.0
    step = 0
    stale_labels = None

    n_epochs = config.epochs if stop_after is None else min(stop_after, config.epochs)
    for epoch in range(n_epochs):
        tau = tau_at(config.schedule, epoch)
        order = np.random.default_rng([config.seed, epoch]).permutation(len(encoded))
        losses, sizes = [], []
        semi_entries = 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            batch = EncodedBatch([encoded.query_seqs[i] for i in idx], encoded.click[idx], [encoded.knowledge_ids[i] for i in idx])
            labels = None
            if config.label_refresh > 1 and config.use_label_enhanced:
                if step % config.label_refresh == 0:
                    stale_labels = label_forward(model, ws)
                else:
                    labels = stale_labels
            res = train_step(model, ws, batch, adam, tau, labels)
            semi_entries += int(np.count_nonzero(res.targets - batch.click))
            losses.append(res.loss)
            sizes.append(len(batch))
            step += 1
        model.epoch = epoch + 1
        rep = evaluate(model, ws, val_samples) if val_samples else None
        record = {
            "epoch": epoch,
            "tau": tau,
            "train_loss": float(np.average(losses, weights=sizes)),
            "semi_targets": semi_entries,
        }
        if rep is not None:
            record.update({f"val_{k}": v for k, v in rep.row().items()})
            record["val_micro_f1"] = rep.micro.f1
            record["val_macro_f1"] = rep.macro.f1
        history.append(record)
        log.info("epoch %d tau=%.4f loss=%.5f val_micro_f1=%s", epoch, tau, record["train_loss"], record.get("val_micro_f1"))
        if out is not None:
            with open(out / "metrics.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
            model.save(out / "last.ckpt", adam)
            f1 = record.get("val_micro_f1", 0.0)
            if f1 > best_f1:
                best_f1 = f1
                model.save(out / "best.ckpt", adam)
    if out is not None and n_epochs == 0:
        model.save(out / "last.ckpt", adam)
    return TrainResult(model, graph, history, adam)
