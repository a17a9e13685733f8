"""Freeze, awaken and subset sampling of a client's unlabeled pool.

Zero-EV candidates that were not selected are parked in the dormant set.
When the unlabeled pool drops below a threshold a random fraction of the
dormant set is released. Each round after the first, inference is limited
to a random subset of the unlabeled pool.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable, Mapping

import numpy as np

from .data import ClientPools, sorted_ids
from .errors import ConfigurationError, ProtocolError


@dataclass(frozen=True)
class FamsConfig:
    subset_size: int = 500
    awaken_ratio: float = 0.4
    awaken_threshold: int | None = None
    awaken_multiplier: int = 3
    enabled: bool = True

    def __post_init__(self):
        if self.subset_size < 1:
            raise ConfigurationError("fams.subset_size must be >= 1")
        if not 0.0 < self.awaken_ratio <= 1.0:
            raise ConfigurationError(f"fams.awaken_ratio must be in (0, 1], got {self.awaken_ratio}")
        if self.awaken_threshold is not None and self.awaken_threshold < 1:
            raise ConfigurationError("fams.awaken_threshold must be >= 1")
        if self.awaken_multiplier < 1:
            raise ConfigurationError("fams.awaken_multiplier must be >= 1")

    def threshold_for(self, budget: int) -> int:
        """Awaken threshold; defaults to a multiple of the client's budget."""
        if self.awaken_threshold is not None:
            return self.awaken_threshold
        return max(1, self.awaken_multiplier * budget)


def freeze(pools: ClientPools, ev_map: Mapping[int, int], selected: Iterable[int]) -> ClientPools:
    sel = frozenset(int(i) for i in selected)
    if not sel <= pools.subset:
        raise ProtocolError("selected samples must come from the candidate subset")
    missing = [i for i in pools.subset if i not in ev_map]
    if missing:
        raise ProtocolError(f"no EV recorded for subset sample(s) {sorted(missing)[:5]}")
    zero = frozenset(i for i in pools.subset - sel if ev_map[i] == 0)
    unlabeled = pools.unlabeled - (zero | sel)
    return replace(pools, dormant=pools.dormant | zero, unlabeled=unlabeled,
                   subset=pools.subset & unlabeled, selected=sel)


def awaken(pools: ClientPools, cfg: FamsConfig, seed: int, budget: int = 0) -> ClientPools:
    threshold = cfg.threshold_for(budget)
    if len(pools.unlabeled) >= threshold or not pools.dormant:
        return pools
    n = min(len(pools.dormant), int(math.ceil(cfg.awaken_ratio * len(pools.dormant) - 1e-9)))
    rng = np.random.default_rng(seed)
    woken = frozenset(int(i) for i in rng.choice(sorted_ids(pools.dormant), size=n, replace=False))
    return replace(pools, dormant=pools.dormant - woken, unlabeled=pools.unlabeled | woken)


def sample_subset(pools: ClientPools, cfg: FamsConfig, round_idx: int, seed: int) -> ClientPools:
    if cfg.enabled and round_idx > 0 and len(pools.unlabeled) >= cfg.subset_size:
        rng = np.random.default_rng(seed)
        pick = rng.choice(sorted_ids(pools.unlabeled), size=cfg.subset_size, replace=False)
        return replace(pools, subset=frozenset(int(i) for i in pick))
    return replace(pools, subset=pools.unlabeled)
