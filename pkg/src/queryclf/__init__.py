"""Multi-label query classification over a label taxonomy.

Label graph convolution, knowledge-fused semi-supervised targets and a
cached-embedding serving path, written against numpy with hand-derived
gradients.
"""

from .data import (
    ClickSample,
    DatasetStats,
    KnowledgeRecord,
    LabelNode,
    Taxonomy,
    compute_stats,
    generate_probes,
    generate_synthetic,
    load_clicks,
    load_knowledge,
    load_taxonomy,
    split_dataset,
)
from .trainer import ABLATIONS, ModelState, TrainConfig, evaluate, train

__version__ = "0.1.0"
