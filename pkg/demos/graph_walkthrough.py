"""Build the label graphs for a six-node taxonomy and print each stage."""

import numpy as np

from queryclf.data import ClickSample, Taxonomy
from queryclf.graph import build_graph_bundle

np.set_printoptions(precision=3, suppress=True, linewidth=120)


def main():
    tax = Taxonomy.from_records(
        [
            {"id": 1, "name": "electronics", "parent_id": None},
            {"id": 2, "name": "food", "parent_id": None},
            {"id": 10, "name": "phones", "parent_id": 1},
            {"id": 11, "name": "chargers", "parent_id": 1},
            {"id": 12, "name": "coffee", "parent_id": 2},
            {"id": 13, "name": "tea", "parent_id": 2},
        ]
    )
    samples = [
        ClickSample("iphone", frozenset({10}), ()),
        ClickSample("iphone cable", frozenset({10, 11}), ()),
        ClickSample("usb c charger", frozenset({11}), ()),
        ClickSample("fast charger phone", frozenset({10, 11}), ()),
        ClickSample("espresso beans", frozenset({12}), ()),
        ClickSample("green tea", frozenset({13}), ()),
        ClickSample("coffee", frozenset({12}), ()),
    ]
    # stand-in leaf embeddings: coffee and tea point the same way
    emb = np.array([[1.0, 0.1, 0.0], [0.8, 0.5, 0.0], [0.0, 0.2, 1.0], [0.1, 0.1, 0.9]])
    g = build_graph_bundle(tax, samples, emb, alpha=0.5, beta=0.5)

    print("row order:", [tax.nodes[r].name for r in range(tax.num_nodes)])
    print("\nco-occurrence N(i,j)/N(i) over leaves (alpha 0.5):\n", g.a_coo)
    print("\ncosine similarity over leaves (beta 0.5):\n", g.a_sim)
    print("\nhierarchy, parent -> child:\n", g.a_hier)
    print("\nfused and symmetrized:\n", g.a_fused)
    print("\nnormalized adjacency:\n", g.a_hat)


if __name__ == "__main__":
    main()
