"""Train on a synthetic corpus, evaluate, and classify a few queries.

    python demos/quickstart.py
"""

from pathlib import Path

from queryclf.data import generate_synthetic, split_dataset
from queryclf.trainer import TrainConfig, Workspace, evaluate, score_texts, train

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "desk.cfg"


def main():
    tax, samples, knowledge = generate_synthetic(50, 5000, tail_fraction=0.0, seed=0)
    train_s, val_s, test_s = split_dataset(samples, (0.8, 0.1, 0.1), seed=0)
    print(f"{tax.num_nodes} nodes, {tax.num_leaves} leaves, {len(train_s)} training queries")

    cfg = TrainConfig.from_file(CONFIG)
    res = train(cfg, train_s, val_s, tax, knowledge)
    for rec in res.log[::5]:
        print(f"epoch {rec['epoch']:2d}  tau {rec['tau']:.3f}  loss {rec['train_loss']:.4f}  val micro-F1 {rec['val_micro_f1']:.4f}")

    ws = Workspace.build(tax, res.model.vocab, res.model.config, knowledge, res.graph)
    rep = evaluate(res.model, ws, test_s)
    print("test:", {k: round(v, 4) for k, v in rep.row().items()})

    queries = [s.query_text for s in test_s[:3]]
    scores = score_texts(res.model, ws, queries)
    for q, row, s in zip(queries, scores, test_s):
        best = sorted(zip(row, res.model.leaf_ids), reverse=True)[:2]
        shown = ", ".join(f"{tax.by_id[lid].name} {p:.3f}" for p, lid in best)
        print(f"{q!r:40s} -> {shown}   (clicked {sorted(s.clicked_leaf_ids)})")


if __name__ == "__main__":
    main()
