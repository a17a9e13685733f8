"""Round-synchronous federated active learning driver.

Each round every client trains the broadcast model on its labeled set,
records EV checkpoints over its candidate subset, and (when its cadence
allows) annotates a budget of candidates. The server then averages the
local models weighted by labeled-set size.
"""
from __future__ import annotations

import enum
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import ev as ev_engine
from .acquisition import AcquisitionRequest, Strategy, entropy_scores, margin_scores, select
from .data import ClientPools, Dataset, sorted_ids
from .errors import ConfigurationError, ContractViolation, ProtocolError
from .fams import FamsConfig, awaken, freeze, sample_subset
from .model import (
    Arch,
    LossConfig,
    ModelState,
    accuracy,
    align_loss_from_refs,
    class_loss,
    features,
    init_model,
    predict_proba,
    sgd_step,
)

log = logging.getLogger(__name__)

# stream tags for per-client, per-round random generators
_INIT, _RESET, _SHUFFLE, _ALIGN, _AWAKEN, _SUBSET, _SELECT = range(7)


class Mode(str, enum.Enum):
    FAL_PER_ROUND = "fal_per_round"
    TRADITIONAL = "traditional"


class Reset(str, enum.Enum):
    RANDOM = "random"
    CONTINUAL = "continual"


class Group(str, enum.Enum):
    ABCO = "abco"
    PASSIVE = "passive"
    ORDINARY = "ordinary"
    AGGRESSIVE = "aggressive"


@dataclass(frozen=True)
class BehaviorProfile:
    group: Group
    budget: int
    cadence: int = 1

    def __post_init__(self):
        object.__setattr__(self, "group", Group(self.group))
        if self.budget < 0:
            raise ConfigurationError("behavior budget must be >= 0")
        if self.cadence < 1:
            raise ConfigurationError("behavior cadence must be >= 1")
        if self.group is Group.ABCO and self.cadence != 1:
            raise ConfigurationError("AbCo clients annotate every round (cadence 1)")

    def annotates(self, sample_idx: int) -> bool:
        return self.budget > 0 and sample_idx % self.cadence == 0


RECO_BUDGETS = (5, 7, 10)
RECO_CADENCES = (5, 3, 1)


def abco_profiles(num_clients: int, budget: int = 10) -> list[BehaviorProfile]:
    return [BehaviorProfile(Group.ABCO, budget, 1) for _ in range(num_clients)]


def reco_profiles(num_clients: int, seed: int, budgets=RECO_BUDGETS,
                  cadences=RECO_CADENCES) -> list[BehaviorProfile]:
    """Passive/ordinary/aggressive groups in a 2:6:2 ratio over seeded-shuffled clients."""
    n_passive = int(round(0.2 * num_clients))
    n_aggressive = int(round(0.2 * num_clients))
    n_ordinary = num_clients - n_passive - n_aggressive
    groups = ([Group.PASSIVE] * n_passive + [Group.ORDINARY] * n_ordinary
              + [Group.AGGRESSIVE] * n_aggressive)
    order = np.random.default_rng(seed).permutation(num_clients)
    table = dict(zip((Group.PASSIVE, Group.ORDINARY, Group.AGGRESSIVE), zip(budgets, cadences)))
    out: list[BehaviorProfile | None] = [None] * num_clients
    for g, k in zip(groups, order):
        b, c = table[g]
        out[int(k)] = BehaviorProfile(g, b, c)
    return out


@dataclass(frozen=True)
class FederationConfig:
    num_clients: int
    rounds: int
    local_epochs: int = 5
    lr: float = 0.05
    batch_size: int = 10
    mode: Mode = Mode.FAL_PER_ROUND
    interval: int = 1
    reset: Reset = Reset.CONTINUAL
    isolated: bool = False
    seed: int = 0
    hidden_dim: int = 32
    feature_dim: int = 16
    init_scale: float = 1.0
    score_on_global: bool = False
    record_wall_time: bool = False

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "reset", Reset(self.reset))
        if self.num_clients < 1:
            raise ConfigurationError("federation.num_clients must be >= 1")
        if self.rounds < 1:
            raise ConfigurationError("federation.rounds must be >= 1")
        if self.local_epochs < 1:
            raise ConfigurationError("federation.local_epochs must be >= 1")
        if not self.lr > 0:
            raise ConfigurationError("federation.lr must be > 0")
        if self.batch_size < 1:
            raise ConfigurationError("federation.batch_size must be >= 1")
        if self.interval < 1:
            raise ConfigurationError("federation.interval must be >= 1")

    def arch_for(self, data: Dataset) -> Arch:
        return Arch(data.dim, self.hidden_dim, self.feature_dim, data.num_classes)

    def sampling_round(self, r: int) -> tuple[bool, int]:
        """Whether round r ends a sampling interval, and that interval's index."""
        if self.mode is Mode.FAL_PER_ROUND:
            return True, r
        return (r + 1) % self.interval == 0, r // self.interval


@dataclass
class RoundRecord:
    round: int
    global_test_accuracy: float
    per_client_mean_ev: list[float]
    inference_count: int
    labeled_sizes: list[int]
    selected_ids: list[list[int]]
    wall_time_ms: int = 0

    @property
    def mean_ev(self) -> float:
        return float(np.mean(self.per_client_mean_ev)) if self.per_client_mean_ev else 0.0

    @property
    def labeled_total(self) -> int:
        return int(sum(self.labeled_sizes))


@dataclass
class ClientState:
    index: int
    pools: ClientPools
    behavior: BehaviorProfile
    universe: frozenset = field(default=frozenset())
    prev_ev: dict = field(default_factory=dict)
    prev_local: ModelState | None = None
    model: ModelState | None = None

    def __post_init__(self):
        if not self.universe:
            self.universe = self.pools.owned()


def _rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) % (1 << 63), *keys]))


def _subseed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([int(seed) % (1 << 63), *keys]).generate_state(1)[0])


def local_train(client: ClientState, data: Dataset, global_model: ModelState,
                cfg: FederationConfig, loss_cfg: LossConfig, round_idx: int):
    """E epochs of mini-batch SGD from ``global_model``; returns (model, EV traces).

    With ``mu > 0`` and a previous round available, each labeled mini-batch is
    paired with an equal-size unlabeled batch for the alignment term: samples
    whose previous EV exceeds the mean are aligned to the previous global
    model, the rest to the client's previous local model.
    """
    pools = client.pools
    if not pools.labeled:
        raise ContractViolation(f"client {client.index} has no labeled data")
    X, y = data.features, data.labels
    labeled = sorted_ids(pools.labeled)
    subset = sorted_ids(pools.subset)
    X_sub = X[subset]
    k, r = client.index, round_idx
    shuffle_rng = _rng(cfg.seed, _SHUFFLE, k, r)

    align = None
    if loss_cfg.mu > 0 and client.prev_local is not None and client.prev_ev:
        pool = np.array([i for i in sorted(pools.unlabeled) if i in client.prev_ev], dtype=np.int64)
        if pool.size:
            evs = np.array([client.prev_ev[int(i)] for i in pool], dtype=np.float64)
            X_pool = X[pool]
            align = (
                _rng(cfg.seed, _ALIGN, k, r),
                X_pool,
                features(client.prev_local, X_pool),
                features(global_model, X_pool),
                evs > evs.mean(),
            )

    model = global_model
    traces: dict = {}
    bs = cfg.batch_size
    for epoch in range(1, cfg.local_epochs + 1):
        order = shuffle_rng.permutation(labeled)
        for start in range(0, order.size, bs):
            batch = order[start:start + bs]
            _, grad = class_loss(model, X[batch], y[batch])
            if align is not None:
                arng, X_pool, ref_loc, ref_glo, use_glo = align
                m = min(batch.size, X_pool.shape[0])
                pick = arng.choice(X_pool.shape[0], size=m, replace=False)
                _, ga = align_loss_from_refs(model, X_pool[pick], ref_loc[pick], ref_glo[pick],
                                             use_glo[pick], loss_cfg)
                grad = grad + loss_cfg.mu * ga
            model = sgd_step(model, grad, cfg.lr)
        traces = ev_engine.record_epoch(traces, model, subset, X_sub, epoch)
    return model, traces


def aggregate(locals_: Sequence[tuple[ModelState, float]]) -> ModelState:
    """Weighted parameter average with weights proportional to labeled-set size."""
    if not locals_:
        raise ProtocolError("nothing to aggregate")
    arch = locals_[0][0].arch
    for m, _ in locals_:
        if m.arch != arch:
            raise ConfigurationError(f"architecture mismatch in aggregation: {m.arch} vs {arch}")
    w = np.array([float(n) for _, n in locals_])
    if np.any(~(w > 0)):
        raise ContractViolation("aggregation weights must be > 0")
    w = w / w.sum()
    P = np.stack([m.params for m, _ in locals_])
    return ModelState(np.sum(w[:, None] * P, axis=0), arch)


def _acquire(strategy: Strategy, client: ClientState, data: Dataset, local: ModelState,
             global_model: ModelState, ev_map: dict, traces: dict, cfg: FederationConfig,
             round_idx: int) -> list[int]:
    pools = client.pools
    cand = sorted_ids(pools.subset)
    budget = client.behavior.budget
    seed = _subseed(cfg.seed, _SELECT, client.index, round_idx)
    if cand.size == 0:
        return []
    scorer = global_model if cfg.score_on_global and not cfg.isolated else local
    X = data.features
    scores = feats = lab_feats = None
    if strategy is Strategy.ENTROPY:
        scores = dict(zip(cand.tolist(), entropy_scores(predict_proba(scorer, X[cand])).tolist()))
    elif strategy is Strategy.MARGIN:
        scores = dict(zip(cand.tolist(), margin_scores(predict_proba(scorer, X[cand])).tolist()))
    elif strategy is Strategy.CORESET:
        feats = features(scorer, X[cand])
        lab = sorted_ids(pools.labeled)
        lab_feats = features(scorer, X[lab]) if lab.size else None
    elif strategy is Strategy.EV:
        scores = {int(i): float(ev_map[int(i)]) for i in cand}
    elif strategy is Strategy.EV_CLASSCOUNT:
        scores = {int(i): float(ev_engine.class_count_ev(traces[int(i)])) for i in cand}
    elif strategy is Strategy.EV_PLUS_GEV:
        g = np.atleast_1d(ev_engine.gev(local, global_model, X[cand]))
        scores = {int(i): ev_map[int(i)] + float(gi) for i, gi in zip(cand, g)}
    req = AcquisitionRequest(strategy, budget, cand.tolist(), scores, seed)
    return select(req, feats, lab_feats)


def _apply_selection(pools: ClientPools, selected: Sequence[int], ev_map: dict,
                     fams_cfg: FamsConfig) -> ClientPools:
    sel = frozenset(selected)
    if not sel <= pools.subset:
        raise ProtocolError("selection escaped the candidate subset")
    pools = replace(pools, labeled=pools.labeled | sel, unlabeled=pools.unlabeled - sel)
    if fams_cfg.enabled:
        return freeze(pools, ev_map, sel)
    return replace(pools, subset=pools.subset - sel, selected=sel)


def make_clients(pools: Sequence[ClientPools], behaviors: Sequence[BehaviorProfile]) -> list[ClientState]:
    if len(pools) != len(behaviors):
        raise ConfigurationError("need one behavior profile per client")
    return [ClientState(k, p, b) for k, (p, b) in enumerate(zip(pools, behaviors))]


def run(cfg: FederationConfig, data: Dataset, pools: Sequence[ClientPools],
        behaviors: Sequence[BehaviorProfile], fams_cfg: FamsConfig, loss_cfg: LossConfig,
        strategy: Strategy | str,
        observer: Callable[[int, ModelState, list[ClientState]], None] | None = None,
        ) -> list[RoundRecord]:
    """Drive ``cfg.rounds`` rounds and return one record per round.

    ``observer``, if given, is called after each round's evaluation with the
    round index, the current global model and the client states.
    """
    strategy = Strategy(strategy)
    if len(pools) != cfg.num_clients:
        raise ConfigurationError(f"{len(pools)} client pools for {cfg.num_clients} clients")
    clients = make_clients(pools, behaviors)
    arch = cfg.arch_for(data)
    X_test, y_test = data.split("test")
    global_model = init_model(arch, _subseed(cfg.seed, _INIT), cfg.init_scale)
    if cfg.isolated:
        for c in clients:
            c.model = global_model
    E = cfg.local_epochs
    records: list[RoundRecord] = []

    for r in range(cfg.rounds):
        t0 = time.perf_counter()
        sampling, sample_idx = cfg.sampling_round(r)
        if (cfg.mode is Mode.TRADITIONAL and cfg.reset is Reset.RANDOM
                and r > 0 and r % cfg.interval == 0):
            global_model = init_model(arch, _subseed(cfg.seed, _RESET, r), cfg.init_scale)
            if cfg.isolated:
                for c in clients:
                    c.model = global_model

        results = {}
        for c in clients:
            pools_k = c.pools
            if fams_cfg.enabled:
                before = pools_k.dormant
                pools_k = awaken(pools_k, fams_cfg, _subseed(cfg.seed, _AWAKEN, c.index, r),
                                 c.behavior.budget)
                for i in before - pools_k.dormant:
                    c.prev_ev.pop(i, None)
            c.pools = sample_subset(pools_k, fams_cfg, r, _subseed(cfg.seed, _SUBSET, c.index, r))
            if not c.pools.labeled:
                log.warning("round %d: client %d has no labeled data, skipping", r, c.index)
                continue
            start = c.model if cfg.isolated else global_model
            local, traces = local_train(c, data, start, cfg, loss_cfg, r)
            results[c.index] = (local, traces, ev_engine.finalize_ev(traces, E), len(c.pools.labeled))

        if not results:
            raise ProtocolError(f"round {r}: every client has an empty labeled set")
        if not cfg.isolated:
            global_model = aggregate([(results[k][0], results[k][3]) for k in sorted(results)])

        selected_all: list[list[int]] = []
        mean_evs: list[float] = []
        inferences = 0
        for c in clients:
            if c.index not in results:
                selected_all.append([])
                mean_evs.append(0.0)
                continue
            local, traces, ev_map, _ = results[c.index]
            inferences += E * len(c.pools.subset)
            mean_evs.append(float(np.mean(list(ev_map.values()))) if ev_map else 0.0)
            chosen: list[int] = []
            if sampling and c.behavior.annotates(sample_idx):
                chosen = _acquire(strategy, c, data, local, global_model, ev_map, traces, cfg, r)
                c.pools = _apply_selection(c.pools, chosen, ev_map, fams_cfg)
            selected_all.append(chosen)
            c.prev_ev = ev_map
            c.prev_local = local
            if cfg.isolated:
                c.model = local
            c.pools.check(c.universe)

        if cfg.isolated:
            acc = float(np.mean([accuracy(c.model, X_test, y_test) for c in clients]))
        else:
            acc = accuracy(global_model, X_test, y_test)
        wall = int(round((time.perf_counter() - t0) * 1000)) if cfg.record_wall_time else 0
        records.append(RoundRecord(r, acc, mean_evs, inferences,
                                   [len(c.pools.labeled) for c in clients], selected_all, wall))
        log.debug("round %d acc=%.4f mean_ev=%.3f", r, acc, records[-1].mean_ev)
        if observer is not None:
            observer(r, global_model, clients)
    return records
