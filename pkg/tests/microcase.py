"""Small hand-built instances shared by the gradient and stop-gradient tests."""

from __future__ import annotations

import numpy as np

from queryclf.data import ClickSample, KnowledgeRecord, Taxonomy, leaf_click_counts
from queryclf.encoder import PAD, UNK, Vocab
from queryclf.graph import build_graph_bundle
from queryclf.trainer import TrainConfig, Workspace, encode_samples, init_model, label_forward

WORDS = [f"w{i:02d}" for i in range(18)]  # with pad and unk: a 20-token vocab


def micro_taxonomy() -> Taxonomy:
    """Two roots with two leaves each: 6 nodes, 4 leaves."""
    return Taxonomy.from_records(
        [
            {"id": 1, "name": "w00", "parent_id": None, "side_info": ["w12"]},
            {"id": 2, "name": "w01", "parent_id": None, "side_info": ["w13"]},
            {"id": 10, "name": "w02", "parent_id": 1, "side_info": ["w06", "w14"]},
            {"id": 11, "name": "w03", "parent_id": 1, "side_info": ["w07"]},
            {"id": 12, "name": "w04", "parent_id": 2, "side_info": ["w08", "w15"]},
            {"id": 13, "name": "w05", "parent_id": 2, "side_info": ["w09"]},
        ]
    )


def micro_knowledge() -> dict[int, KnowledgeRecord]:
    return {
        1: KnowledgeRecord(1, "w02 w06 w16", "world"),
        2: KnowledgeRecord(2, "w04 w08", "posterior"),
        3: KnowledgeRecord(3, "w05 w09 w17 w05", "world"),
    }


def micro_samples() -> list[ClickSample]:
    return [
        ClickSample("w02 w10 w06", frozenset({10, 11}), (1, 3)),
        ClickSample("w04 w11", frozenset({12}), (2,)),
        ClickSample("w05 w09 w10 w05", frozenset({13}), ()),
    ]


def micro_instance(seed: int = 0, perturb_bias: bool = True, **overrides):
    """(model, workspace, batch) at d=8, vocab 20, |C|=4, |C'|=6, three samples."""
    taxonomy = micro_taxonomy()
    knowledge = micro_knowledge()
    samples = micro_samples()
    vocab = Vocab([PAD, UNK, *WORDS], "word")
    cfg = TrainConfig(dim=8, tokenizer="word", seed=seed, **overrides)
    model = init_model(cfg, vocab, taxonomy, leaf_click_counts(samples, taxonomy))
    rng = np.random.default_rng(seed + 100)
    if perturb_bias:
        # nonzero biases so no tensor's gradient is degenerate at init
        for arr in (model.encoder.proj1_bias, model.encoder.proj2_bias, model.gcn.b1, model.gcn.b2, model.bias):
            arr[:] = rng.normal(0.0, 0.3, arr.shape)
    graph = None
    if cfg.use_structure:
        ws0 = Workspace.build(taxonomy, vocab, cfg, knowledge)
        leaf_emb = label_forward(model, ws0).x[taxonomy.num_internal :]
        graph = build_graph_bundle(
            taxonomy, samples, leaf_emb, cfg.alpha_threshold, cfg.beta_threshold,
            cfg.use_graph_coo, cfg.use_graph_sim, cfg.use_graph_hier,
        )
    ws = Workspace.build(taxonomy, vocab, cfg, knowledge, graph)
    return model, ws, encode_samples(samples, ws)


def numeric_gradients(loss_fn, params: dict[str, np.ndarray], step: float = 1e-5) -> dict[str, np.ndarray]:
    """Central differences of ``loss_fn()`` w.r.t. every entry of every tensor, perturbed in place."""
    out = {}
    for name, p in params.items():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + step
            up = loss_fn()
            p[idx] = old - step
            down = loss_fn()
            p[idx] = old
            g[idx] = (up - down) / (2.0 * step)
        out[name] = g
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| scaled by the larger of the two tensors' max magnitudes."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)
