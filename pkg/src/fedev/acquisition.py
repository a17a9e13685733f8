"""Acquisition strategies: rank a candidate subset and pick the top budget.

Ties between equal scores always go to the smaller sample ID.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ContractViolation


class Strategy(str, enum.Enum):
    RANDOM = "random"
    ENTROPY = "entropy"
    MARGIN = "margin"
    CORESET = "coreset"
    EV = "ev"
    EV_PLUS_GEV = "ev_plus_gev"
    EV_CLASSCOUNT = "ev_classcount"

    @property
    def score_based(self) -> bool:
        return self not in (Strategy.RANDOM, Strategy.CORESET)


@dataclass(frozen=True)
class AcquisitionRequest:
    strategy: Strategy
    budget: int
    candidates: Sequence[int]
    scores: Mapping[int, float] | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if self.budget < 0:
            raise ContractViolation("budget must be >= 0")


def entropy_scores(probs: np.ndarray) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    return -np.sum(p * np.log(np.where(p > 0.0, p, 1.0)), axis=1)


def margin_scores(probs: np.ndarray) -> np.ndarray:
    """Gap between the two most probable classes (small means uncertain)."""
    top2 = np.sort(np.asarray(probs, dtype=np.float64), axis=1)[:, -2:]
    return top2[:, 1] - top2[:, 0]


def _top_k(ids: np.ndarray, scores: np.ndarray, k: int, largest: bool = True) -> list[int]:
    key = -scores if largest else scores
    order = np.lexsort((ids, key))
    return [int(i) for i in ids[order[:k]]]


def k_center_greedy(cand_feats: np.ndarray, labeled_feats: np.ndarray | None, k: int) -> list[int]:
    """Positions (into ``cand_feats``) chosen by greedy k-center.

    Each pick maximizes the Euclidean distance to the nearest covered point;
    the first of several equally distant candidates wins.
    """
    n = cand_feats.shape[0]
    min_d = np.full(n, np.inf)
    if labeled_feats is not None and len(labeled_feats):
        for row in labeled_feats:
            min_d = np.minimum(min_d, np.sqrt(np.sum((cand_feats - row) ** 2, axis=1)))
    taken = np.zeros(n, dtype=bool)
    picks = []
    for _ in range(min(k, n)):
        d = np.where(taken, -np.inf, min_d)
        j = int(np.argmax(d))
        picks.append(j)
        taken[j] = True
        min_d = np.minimum(min_d, np.sqrt(np.sum((cand_feats - cand_feats[j]) ** 2, axis=1)))
    return picks


def select(req: AcquisitionRequest, features: np.ndarray | None = None,
           labeled_features: np.ndarray | None = None) -> list[int]:
    """Return ``min(budget, len(candidates))`` distinct candidate IDs.

    ``features`` rows align with ``sorted(req.candidates)`` and are only
    needed for CORESET.
    """
    ids = np.array(sorted(int(c) for c in req.candidates), dtype=np.int64)
    if np.unique(ids).size != ids.size:
        raise ContractViolation("candidate IDs must be distinct")
    k = min(req.budget, ids.size)
    if k == 0:
        return []
    s = req.strategy
    if s is Strategy.RANDOM:
        rng = np.random.default_rng(req.seed)
        return [int(i) for i in rng.choice(ids, size=k, replace=False)]
    if s is Strategy.CORESET:
        if features is None or len(features) != ids.size:
            raise ContractViolation("CORESET needs one feature vector per candidate")
        feats = np.asarray(features, dtype=np.float64)
        lab = None if labeled_features is None else np.asarray(labeled_features, dtype=np.float64)
        return [int(ids[j]) for j in k_center_greedy(feats, lab, k)]
    if req.scores is None:
        raise ContractViolation(f"{s.value} selection needs a score for every candidate")
    missing = [int(i) for i in ids if int(i) not in req.scores]
    if missing:
        raise ContractViolation(f"no score for candidate(s) {missing[:5]}")
    sc = np.array([float(req.scores[int(i)]) for i in ids])
    return _top_k(ids, sc, k, largest=s is not Strategy.MARGIN)
