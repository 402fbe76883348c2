"""Knowledge fusion and semi-supervised target generation.

Everything here produces plain arrays that the trainer treats as constants:
no gradient is ever propagated back through the fused query or the scores.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class FusedQuery:
    values: np.ndarray
    attention_weights: np.ndarray


@dataclass
class SemiTargets:
    entries: dict[int, float] = field(default_factory=dict)

    def __len__(self):
        return len(self.entries)

    def dense(self, leaf_ids) -> np.ndarray:
        return np.array([self.entries.get(lid, 0.0) for lid in leaf_ids])


@dataclass(frozen=True)
class TauSchedule:
    tau_start: float = 1.0
    tau_end: float = 0.8
    total_epochs: int = 20

    def __post_init__(self):
        if not 0.0 <= self.tau_end <= self.tau_start <= 1.0:
            raise ValueError("need 0 <= tau_end <= tau_start <= 1")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")


def tau_at(schedule: TauSchedule, epoch: int) -> float:
    """Linear decay from ``tau_start`` at epoch 0 to ``tau_end`` at the last epoch."""
    if not 0 <= epoch < schedule.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {schedule.total_epochs})")
    if schedule.total_epochs == 1:
        return schedule.tau_end
    frac = epoch / (schedule.total_epochs - 1)
    return schedule.tau_start + (schedule.tau_end - schedule.tau_start) * frac


def attention_fuse(query_emb: np.ndarray, knowledge_embs: np.ndarray) -> FusedQuery:
    q = np.asarray(query_emb, dtype=float)
    k = np.asarray(knowledge_embs, dtype=float)
    if k.size == 0:
        return FusedQuery(q.copy(), np.zeros(0))
    if k.ndim != 2 or k.shape[1] != q.shape[0]:
        raise ValueError(f"knowledge embeddings of shape {k.shape} do not match d={q.shape[0]}")
    logits = k @ q
    w = np.exp(logits - logits.max())
    w /= w.sum()
    return FusedQuery(q + w @ k, w)


_UNIT_SNAP = 8 * np.finfo(float).eps


def snap_cosine(c: np.ndarray) -> np.ndarray:
    """Clip to [-1, 1] and snap values within a few ulps of +-1, so parallel vectors score exactly 1."""
    c = np.clip(c, -1.0, 1.0)
    near = np.abs(np.abs(c) - 1.0) <= _UNIT_SNAP
    c[near] = np.sign(c[near])
    return c


def cosine_scores(queries: np.ndarray, label_embs: np.ndarray) -> np.ndarray:
    """Row-wise cosine between each query and each label; zero-norm pairs score 0."""
    queries = np.atleast_2d(queries)
    qn = np.linalg.norm(queries, axis=1)
    cn = np.linalg.norm(label_embs, axis=1)
    if not (qn.all() and cn.all()):
        log.warning("zero-norm embedding in semi-target scoring; affected scores set to 0")
    q_safe = np.where(qn > 0, qn, 1.0)
    c_safe = np.where(cn > 0, cn, 1.0)
    return snap_cosine((queries / q_safe[:, None]) @ (label_embs / c_safe[:, None]).T)


def semi_target_matrix(fused: np.ndarray, label_embs: np.ndarray, tau: float) -> np.ndarray:
    """Dense ``B x |C|`` soft targets: cosine where it reaches ``tau``, else 0."""
    s = cosine_scores(fused, label_embs)
    return np.where(s >= tau, s, 0.0)


def compute_semi_targets(fused: FusedQuery, label_embs: np.ndarray, tau: float, leaf_ids=None) -> SemiTargets:
    s = semi_target_matrix(fused.values[None, :], label_embs, tau)[0]
    ids = leaf_ids if leaf_ids is not None else range(len(s))
    return SemiTargets({lid: float(v) for lid, v in zip(ids, s) if v >= tau and v != 0.0})


def fuse_targets(click: np.ndarray, semi) -> np.ndarray:
    """min(click + semi, 1); ``semi`` is a dense vector/matrix or absent (None)."""
    click = np.asarray(click, dtype=float)
    if np.any((click != 0) & (click != 1)):
        raise ValueError("click targets must be 0/1")
    if semi is None:
        return click.copy()
    return np.minimum(click + semi, 1.0)
