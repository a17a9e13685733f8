import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedev.acquisition import Strategy
from fedev.data import ClientPools, PartitionSpec, init_labeled, make_synthetic, partition
from fedev.errors import ConfigurationError, ContractViolation, ProtocolError
from fedev.fams import FamsConfig
from fedev.federation import (
    BehaviorProfile,
    ClientState,
    FederationConfig,
    Group,
    Mode,
    Reset,
    abco_profiles,
    aggregate,
    local_train,
    reco_profiles,
    run,
)
from fedev.model import Arch, LossConfig, ModelState, accuracy, class_loss, init_model, sgd_step

from conftest import random_model


def setup(K=3, C=4, per_class=40, dim=3, seed=0, ck=2, init=0.1):
    ds = make_synthetic(C, per_class, dim, 0.4, seed=seed)
    pools = partition(ds, PartitionSpec("classes", K, classes_per_client=ck, seed=seed))
    pools = [init_labeled(p, init, seed * 100 + k) for k, p in enumerate(pools)]
    return ds, pools


def subseed(*keys):
    return int(np.random.SeedSequence(list(keys)).generate_state(1)[0])


def stream(*keys):
    return np.random.default_rng(np.random.SeedSequence(list(keys)))


# stream tags of the round driver
INIT, SHUFFLE, SELECT = 0, 2, 6


# ---------------------------------------------------------------- aggregation

def test_aggregate_weighted_mean():
    arch = Arch(1, 1, 1, 2)
    n = arch.param_count
    out = aggregate([(ModelState(np.zeros(n), arch), 1), (ModelState(np.full(n, 4.0), arch), 3)])
    np.testing.assert_array_equal(out.params, np.full(n, 3.0))


def test_aggregate_fixed_point(arch, rng):
    m = random_model(arch, rng)
    out = aggregate([(m, 2), (m, 5), (m, 1)])
    np.testing.assert_allclose(out.params, m.params, rtol=0, atol=1e-15)


def test_aggregate_matches_fsum_oracle_under_permutation(arch, rng):
    locals_ = [(random_model(arch, rng), int(rng.integers(1, 50))) for _ in range(8)]
    total = sum(w for _, w in locals_)
    oracle = np.array([math.fsum(w / total * float(m.params[i]) for m, w in locals_)
                       for i in range(arch.param_count)])
    for _ in range(10):
        perm = rng.permutation(8)
        got = aggregate([locals_[j] for j in perm]).params
        np.testing.assert_allclose(got, oracle, rtol=0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(0, 10**6))
def test_aggregate_is_convex(K, seed):
    r = np.random.default_rng(seed)
    arch = Arch(2, 2, 2, 2)
    locals_ = [(random_model(arch, r), float(r.integers(1, 20))) for _ in range(K)]
    out = aggregate(locals_).params
    P = np.stack([m.params for m, _ in locals_])
    assert np.all(out >= P.min(axis=0) - 1e-12) and np.all(out <= P.max(axis=0) + 1e-12)


def test_aggregate_errors(arch):
    with pytest.raises(ProtocolError):
        aggregate([])
    m = ModelState(np.zeros(arch.param_count), arch)
    other = Arch(4, 6, 5, 4)
    with pytest.raises(ConfigurationError):
        aggregate([(m, 1), (ModelState(np.zeros(other.param_count), other), 1)])
    with pytest.raises(ContractViolation):
        aggregate([(m, 0)])


# ---------------------------------------------------------------- local training

def _client(pools, prev_ev=None, prev_local=None):
    return ClientState(0, replace(pools, subset=pools.unlabeled), BehaviorProfile("abco", 5),
                       prev_ev=prev_ev or {}, prev_local=prev_local)


def test_mu_zero_equals_plain_sgd():
    ds, pools = setup(K=1, ck=4)
    cfg = FederationConfig(1, 1, local_epochs=3, batch_size=7, seed=5)
    arch = cfg.arch_for(ds)
    g = init_model(arch, 1)
    prev = init_model(arch, 2)
    c = _client(pools[0], {i: i % 3 for i in pools[0].unlabeled}, prev)
    got, _ = local_train(c, ds, g, cfg, LossConfig(mu=0.0), round_idx=4)

    shuffle = stream(5, SHUFFLE, 0, 4)
    lab = np.array(sorted(pools[0].labeled))
    m = g
    for _ in range(3):
        order = shuffle.permutation(lab)
        for s in range(0, order.size, 7):
            b = order[s:s + 7]
            m = sgd_step(m, class_loss(m, ds.features[b], ds.labels[b])[1], cfg.lr)
    assert np.array_equal(got.params, m.params)


def test_alignment_changes_trajectory_only_when_mu_positive():
    ds, pools = setup(K=1, ck=4)
    cfg = FederationConfig(1, 1, local_epochs=2, seed=5)
    arch = cfg.arch_for(ds)
    g, prev = init_model(arch, 1), init_model(arch, 2)
    c = _client(pools[0], {i: i % 3 for i in pools[0].unlabeled}, prev)
    a, _ = local_train(c, ds, g, cfg, LossConfig(mu=0.0), 1)
    b, _ = local_train(c, ds, g, cfg, LossConfig(mu=0.5), 1)
    assert not np.array_equal(a.params, b.params)
    # no history yet: the alignment term is skipped
    fresh = _client(pools[0])
    c0, _ = local_train(fresh, ds, g, cfg, LossConfig(mu=0.5), 1)
    assert np.array_equal(a.params, c0.params)


def _hand_ce_grad(model, X, y):
    """Per-sample loop backprop for the mean cross-entropy."""
    L = model.layers()
    W1, b1, W2, b2, W3, b3 = (np.array(L[k]) for k in ("W1", "b1", "W2", "b2", "W3", "b3"))
    gs = [np.zeros_like(a) for a in (W1, b1, W2, b2, W3, b3)]
    for x, t in zip(X, y):
        h = np.tanh(W1 @ x + b1)
        f = W2 @ h + b2
        z = W3 @ f + b3
        p = np.exp(z - z.max())
        p /= p.sum()
        dz = p.copy()
        dz[t] -= 1.0
        df = W3.T @ dz
        dh = (W2.T @ df) * (1.0 - h * h)
        for acc, val in zip(gs, (np.outer(dh, x), dh, np.outer(df, h), df, np.outer(dz, f), dz)):
            acc += val / len(y)
    return np.concatenate([a.ravel() for a in gs])


def test_single_full_batch_step_oracle():
    ds, pools = setup(K=1, ck=4)
    cfg = FederationConfig(1, 1, local_epochs=1, batch_size=10_000, lr=0.3, seed=2)
    g = init_model(cfg.arch_for(ds), 9)
    got, traces = local_train(_client(pools[0]), ds, g, cfg, LossConfig(mu=0.0), 0)
    lab = sorted(pools[0].labeled)
    expect = g.params - 0.3 * _hand_ce_grad(g, ds.features[lab], ds.labels[lab])
    np.testing.assert_allclose(got.params, expect, rtol=0, atol=1e-12)
    assert {t.ev for t in traces.values()} == {0}


def test_empty_labeled_is_rejected():
    ds, pools = setup(K=1, ck=4)
    cfg = FederationConfig(1, 1)
    c = ClientState(0, ClientPools(unlabeled=frozenset({1, 2})), BehaviorProfile("abco", 1))
    with pytest.raises(ContractViolation):
        local_train(c, ds, init_model(cfg.arch_for(ds), 0), cfg, LossConfig(), 0)
    with pytest.raises(ProtocolError):
        run(cfg, ds, [c.pools], abco_profiles(1), FamsConfig(), LossConfig(), "random")


# ---------------------------------------------------------------- behaviors

def test_reco_ratio_and_determinism():
    p = reco_profiles(10, seed=3)
    groups = [b.group for b in p]
    assert groups.count(Group.PASSIVE) == 2
    assert groups.count(Group.ORDINARY) == 6
    assert groups.count(Group.AGGRESSIVE) == 2
    assert {(b.group, b.budget, b.cadence) for b in p} == {
        (Group.PASSIVE, 5, 5), (Group.ORDINARY, 7, 3), (Group.AGGRESSIVE, 10, 1)}
    assert reco_profiles(10, seed=3) == p


def test_behavior_validation():
    with pytest.raises(ConfigurationError):
        BehaviorProfile("abco", 5, cadence=2)
    with pytest.raises(ConfigurationError):
        BehaviorProfile("passive", -1, cadence=5)
    assert [BehaviorProfile("passive", 5, 5).annotates(i) for i in range(6)] == [
        True, False, False, False, False, True]


# ---------------------------------------------------------------- the round driver

def test_end_to_end_replay_oracle():
    """2 rounds, 2 clients, E=1, RANDOM, FAmS off: replay every step by hand."""
    seed, lr, budget = 11, 0.2, 3
    ds, pools = setup(K=2, C=4, per_class=30, ck=2, seed=1)
    cfg = FederationConfig(2, 2, local_epochs=1, lr=lr, batch_size=10_000, seed=seed)
    arch = cfg.arch_for(ds)
    seen = []
    recs = run(cfg, ds, pools, abco_profiles(2, budget), FamsConfig(enabled=False),
               LossConfig(mu=0.0), "random", observer=lambda r, g, cl: seen.append(g.params.copy()))

    Xte, yte = ds.split("test")
    g = init_model(arch, subseed(seed, INIT)).params
    lab = [set(p.labeled) for p in pools]
    unl = [set(p.unlabeled) for p in pools]
    for r in range(2):
        locals_, weights, infer = [], [], 0
        for k in range(2):
            order = stream(seed, SHUFFLE, k, r).permutation(np.array(sorted(lab[k])))
            m = ModelState(g, arch)
            locals_.append(g - lr * _hand_ce_grad(m, ds.features[order], ds.labels[order]))
            weights.append(len(lab[k]))
            infer += len(unl[k])
        g = sum(w * p for w, p in zip(weights, locals_)) / sum(weights)
        np.testing.assert_allclose(seen[r], g, rtol=0, atol=1e-12)
        picks = []
        for k in range(2):
            rng = np.random.default_rng(subseed(seed, SELECT, k, r))
            chosen = [int(i) for i in rng.choice(np.array(sorted(unl[k])), size=budget, replace=False)]
            lab[k] |= set(chosen)
            unl[k] -= set(chosen)
            picks.append(chosen)
        rec = recs[r]
        assert rec.round == r
        assert rec.selected_ids == picks
        assert rec.labeled_sizes == [len(s) for s in lab]
        assert rec.inference_count == infer
        assert rec.per_client_mean_ev == [0.0, 0.0]
        gm = ModelState(g, arch)
        assert rec.global_test_accuracy == accuracy(gm, Xte, yte)


def test_single_client_isolated_equals_federated():
    ds, pools = setup(K=1, ck=4)
    kw = dict(local_epochs=2, seed=4)
    a = run(FederationConfig(1, 4, **kw), ds, pools, abco_profiles(1, 3), FamsConfig(subset_size=20),
            LossConfig(), "ev")
    b = run(FederationConfig(1, 4, isolated=True, **kw), ds, pools, abco_profiles(1, 3),
            FamsConfig(subset_size=20), LossConfig(), "ev")
    assert a == b


def test_zero_budget_keeps_labeled_flat():
    ds, pools = setup()
    recs = run(FederationConfig(3, 4, local_epochs=2), ds, pools, abco_profiles(3, 0), FamsConfig(),
               LossConfig(), "ev")
    assert all(r.labeled_sizes == [len(p.labeled) for p in pools] for r in recs)
    assert all(r.selected_ids == [[], [], []] for r in recs)


def test_single_epoch_gives_zero_ev():
    ds, pools = setup()
    recs = run(FederationConfig(3, 3, local_epochs=1), ds, pools, abco_profiles(3, 2), FamsConfig(),
               LossConfig(), "ev")
    assert all(v == 0.0 for r in recs for v in r.per_client_mean_ev)


def _invariant_observer(pools, store):
    universe = [p.owned() for p in pools]
    prev = [set(p.labeled) for p in pools]

    def obs(r, g, clients):
        for c in clients:
            c.pools.check(universe[c.index])
            lab = set(c.pools.labeled)
            assert prev[c.index] <= lab
            assert not c.pools.selected & c.pools.unlabeled
            assert c.pools.selected <= lab
            prev[c.index] = lab
        store.append([c.pools for c in clients])
    return obs


@pytest.mark.parametrize("strategy", list(Strategy))
def test_every_strategy_keeps_pool_invariants(strategy):
    ds, pools = setup(K=3, per_class=60)
    seen = []
    cfg = FederationConfig(3, 5, local_epochs=3, seed=1, score_on_global=strategy is Strategy.ENTROPY)
    fams = FamsConfig(subset_size=15)
    recs = run(cfg, ds, pools, abco_profiles(3, 4), fams, LossConfig(mu=0.2), strategy,
               observer=_invariant_observer(pools, seen))
    assert len(recs) == 5
    for r, rec in enumerate(recs):
        assert 0.0 <= rec.global_test_accuracy <= 1.0
        assert all(len(s) <= 4 for s in rec.selected_ids)
        assert all(0 <= v <= 2 for v in rec.per_client_mean_ev)
        if r > 0:
            assert rec.inference_count <= 3 * 3 * 15


def test_fams_reduces_inference():
    ds, pools = setup(K=2, per_class=100)
    kw = dict(local_epochs=2, seed=3)
    on = run(FederationConfig(2, 6, **kw), ds, pools, abco_profiles(2, 2), FamsConfig(subset_size=10),
             LossConfig(), "ev")
    off = run(FederationConfig(2, 6, **kw), ds, pools, abco_profiles(2, 2),
              FamsConfig(subset_size=10, enabled=False), LossConfig(), "ev")
    assert on[0].inference_count == off[0].inference_count
    for a, b in zip(on[1:], off[1:]):
        assert a.inference_count <= 2 * 2 * 10 < b.inference_count


def test_passive_clients_follow_cadence():
    ds, pools = setup(K=10, C=6, per_class=300, ck=2)
    behaviors = reco_profiles(10, seed=0)
    recs = run(FederationConfig(10, 11, local_epochs=2), ds, pools, behaviors, FamsConfig(),
               LossConfig(), "random")
    for k, b in enumerate(behaviors):
        rounds = [r.round for r in recs if r.selected_ids[k]]
        assert rounds == [r for r in range(11) if r % b.cadence == 0]
        assert sum(len(r.selected_ids[k]) for r in recs) <= b.budget * len(rounds)


def test_traditional_interval_one_equals_per_round():
    ds, pools = setup()
    args = (ds, pools, reco_profiles(3, 1), FamsConfig(subset_size=10), LossConfig(), "ev")
    a = run(FederationConfig(3, 6, local_epochs=3, seed=8), *args)
    b = run(FederationConfig(3, 6, local_epochs=3, seed=8, mode=Mode.TRADITIONAL, interval=1,
                             reset=Reset.CONTINUAL), *args)
    assert a == b


def test_traditional_random_reset():
    ds, pools = setup()
    seen = []
    recs = run(FederationConfig(3, 12, local_epochs=2, mode="traditional", interval=5, reset="random"),
               ds, pools, abco_profiles(3, 3), FamsConfig(subset_size=10), LossConfig(), "ev",
               observer=_invariant_observer(pools, seen))
    assert len(recs) == 12
    for rec in recs:
        sampled = (rec.round + 1) % 5 == 0
        assert any(rec.selected_ids) == sampled


def test_run_is_deterministic():
    ds, pools = setup()
    args = (FederationConfig(3, 4, local_epochs=3, seed=2), ds, pools, reco_profiles(3, 2),
            FamsConfig(subset_size=12), LossConfig(mu=0.3), "ev_plus_gev")
    assert run(*args) == run(*args)


def test_wall_time_is_opt_in():
    ds, pools = setup()
    recs = run(FederationConfig(3, 2, local_epochs=1), ds, pools, abco_profiles(3, 1), FamsConfig(),
               LossConfig(), "random")
    assert all(r.wall_time_ms == 0 for r in recs)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        FederationConfig(0, 1)
    with pytest.raises(ConfigurationError):
        FederationConfig(1, 0)
    with pytest.raises(ConfigurationError):
        FederationConfig(1, 1, local_epochs=0)
    with pytest.raises(ConfigurationError):
        FederationConfig(1, 1, lr=0.0)
    with pytest.raises(ConfigurationError):
        FederationConfig(1, 1, interval=0)
    ds, pools = setup()
    with pytest.raises(ConfigurationError):
        run(FederationConfig(2, 1), ds, pools, abco_profiles(2), FamsConfig(), LossConfig(), "ev")
