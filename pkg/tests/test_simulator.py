import io

import numpy as np
import pytest
from hypothesis import given, strategies as st

from crsdebias.dataset import ItemRecord
from crsdebias.policy import MaxEntropyAgent, NetworkAgent, PolicyNetwork, maxent_agent_factory, state_size
from crsdebias.recommender import FactorizationModel
from crsdebias.simulator import (
    BeliefState,
    EpisodeLog,
    SessionConfig,
    read_logs,
    run_suite,
    simulate_episode,
    update_candidates,
    user_respond,
    write_logs,
)

from conftest import annotate_all_train, make_catalog


class AlwaysAsk:
    def act(self, conv, rng):
        legal = np.flatnonzero(conv.action_mask()[:-1])
        return int(legal[0]) if legal.size else conv.recommend_action


class AlwaysRecommend:
    def act(self, conv, rng):
        return conv.recommend_action


class RandomAgent:
    """Asks a random legal attribute or recommends, each with some probability."""

    def act(self, conv, rng):
        mask = conv.action_mask()
        legal = np.flatnonzero(mask)
        return int(rng.choice(legal))


# ------------------------------------------------------------------ user and candidates

def test_user_respond_binary_and_enumerated():
    target = ItemRecord(0, frozenset({5, 2, 9}))
    assert user_respond(target, 5) is True
    assert user_respond(target, 4) is False
    cat = make_catalog([{2, 5, 9}], 10, [(0, 0)], categories=tuple([0, 0, 1, 0, 0, 2, 0, 0, 0, 1]))
    assert user_respond(target, 1, cat, "enumerated") == [2, 9]
    with pytest.raises(ValueError):
        user_respond(target, 1, None, "enumerated")


def test_update_candidates_examples():
    cat = make_catalog([set(), {1, 2}, {2}], 4, [(0, 0)])
    assert update_candidates(cat, BeliefState(rejected_items={0})).tolist() == [1, 2]
    assert update_candidates(cat, BeliefState(confirmed=[(1, True)])).tolist() == [1]
    cat = make_catalog([set(), {1, 3}, {1}], 4, [(0, 0)])
    assert update_candidates(cat, BeliefState(confirmed=[(1, True)], rejected_attrs={3})).tolist() == [2]


@given(st.integers(0, 10_000))
def test_update_candidates_brute_force(seed):
    rng = np.random.default_rng(seed)
    m, n = 6, 25
    attrs = [set(np.flatnonzero(rng.random(m) < 0.4).tolist()) for _ in range(n)]
    cat = make_catalog(attrs, m, [(0, 0)])
    conf = set(rng.choice(m, size=rng.integers(0, 3), replace=False).tolist())
    rej = set(rng.choice(m, size=rng.integers(0, 3), replace=False).tolist()) - conf
    items = set(rng.choice(n, size=rng.integers(0, 5), replace=False).tolist())
    b = BeliefState(confirmed=[(a, True) for a in conf], rejected_attrs=rej, rejected_items=items)
    expect = [i for i in range(n) if conf <= attrs[i] and not (rej & attrs[i]) and i not in items]
    assert update_candidates(cat, b).tolist() == expect


# ------------------------------------------------------------------ episodes

def _tiny_world(n_items=1):
    cat, split = annotate_all_train(make_catalog([{0}] * n_items, 2, [(0, 0)], n_users=1))
    return cat, FactorizationModel.init(1, n_items, 2, 3)


def test_single_item_immediate_success():
    cat, model = _tiny_world()
    log = simulate_episode(0, 0, model, AlwaysRecommend(), cat, SessionConfig(5, 10), np.random.default_rng(0))
    assert log.success and log.turns_used == 1 and log.reason == "success"
    assert log.turns[0].action == "rec" and log.turns[0].accepted


def test_always_ask_fails_at_t(small_world, small_model):
    cat, split = small_world
    u, i = split.test[0]
    log = simulate_episode(int(u), int(i), small_model, AlwaysAsk(), cat, SessionConfig(4, 10), np.random.default_rng(0))
    assert not log.success and log.turns_used == 4 and log.reason == "max_turns"


def test_target_without_attributes_rejected():
    cat, split = annotate_all_train(make_catalog([set()], 1, [(0, 0)]))
    with pytest.raises(ValueError, match="no attributes"):
        simulate_episode(0, 0, FactorizationModel.init(1, 1, 1, 2), AlwaysRecommend(), cat, SessionConfig(), np.random.default_rng(0))


def test_asking_twice_is_an_error(small_world, small_model):
    cat, split = small_world

    class Repeat:
        def act(self, conv, rng):
            return 0

    with pytest.raises(ValueError, match="already asked"):
        simulate_episode(0, int(split.test[0][1]), small_model, Repeat(), cat, SessionConfig(5, 3), np.random.default_rng(1))


def test_episode_bytes_deterministic(small_world, small_model):
    cat, split = small_world
    u, i = map(int, split.test[1])
    logs = [simulate_episode(u, i, small_model, RandomAgent(), cat, SessionConfig(10, 4), np.random.default_rng(7)).to_json()
            for _ in range(2)]
    assert logs[0] == logs[1]


def test_enumerated_mode():
    cats = (0, 0, 1, 1)
    attrs = [{0, 2}, {1, 2}, {0, 3}, {1, 3}, {0, 2}]
    cat, _ = annotate_all_train(make_catalog(attrs, 4, [(0, i) for i in range(5)], categories=cats))
    model = FactorizationModel.init(1, 5, 4, 3, seed=1)
    log = simulate_episode(0, 3, model, MaxEntropyAgent(1), cat, SessionConfig(6, 1, "enumerated"), np.random.default_rng(2))
    asks = [t for t in log.turns if t.action == "ask"]
    assert all(isinstance(t.answer, list) for t in asks)
    assert log.success


def test_log_json_round_trip(tmp_path, small_world, small_model):
    cat, split = small_world
    logs = run_suite(split.test[:10], cat, small_model, maxent_agent_factory(5), SessionConfig(8, 5))
    write_logs(logs, tmp_path / "e.jsonl")
    back = read_logs(tmp_path / "e.jsonl")
    assert [b.to_json() for b in back] == [lg.to_json() for lg in logs]
    bad = logs[0].to_json().replace('"schema_version":1', '"schema_version":99')
    with pytest.raises(ValueError, match="schema"):
        EpisodeLog.from_json(bad)


# ------------------------------------------------------------------ suites

def test_empty_suite(small_world, small_model):
    cat, _ = small_world
    assert run_suite(np.zeros((0, 2)), cat, small_model, maxent_agent_factory(), SessionConfig()) == []


def test_suite_turn_bounds(small_world, small_model):
    cat, split = small_world
    pairs = np.concatenate([split.train, split.test])[:200]
    logs = run_suite(pairs, cat, small_model, maxent_agent_factory(5), SessionConfig(10, 5))
    assert len(logs) == 200
    assert all(1 <= lg.turns_used <= 10 for lg in logs)
    assert [(lg.user, lg.target) for lg in logs] == [tuple(map(int, p)) for p in pairs]


def _check_invariants(log, cat, session):
    rejected = set()
    prev = None
    target = log.target
    for t in log.turns:
        if prev is not None:
            assert t.candidates <= prev  # monotone narrowing
        prev = t.candidates
        assert len(t.topk) <= session.top_k
        if t.action == "rec":
            assert not rejected & set(t.topk)  # no re-recommendation
            if t.accepted:
                assert target in t.topk
            else:
                assert target not in t.topk
                rejected.update(t.topk)
    assert target not in rejected  # target retention
    assert log.turns_used <= session.max_turns
    if log.success:
        assert log.turns[-1].accepted and target in log.turns[-1].topk
    assert log.turns_used == len(log.turns)


class MixedAgent:
    """Random actions from a seeded network, so recommendations happen at varied times."""

    def __init__(self, cat, session, seed):
        net = PolicyNetwork.init(state_size(cat.n_attrs, session.max_turns), cat.n_attrs + 1, seed=seed)
        self.inner = NetworkAgent(net, greedy=False)

    def act(self, conv, rng):
        return self.inner.act(conv, rng)


def test_simulator_invariants_1000_episodes(small_world, small_model):
    cat, split = small_world
    pairs = np.concatenate([split.train, split.valid, split.test])
    rng = np.random.default_rng(0)
    n = 0
    for k in range(1100):
        u, i = map(int, pairs[rng.integers(len(pairs))])
        session = SessionConfig(int(rng.integers(1, 16)), int(rng.integers(1, 11)))
        agent = MixedAgent(cat, session, k) if k % 2 else MaxEntropyAgent(int(rng.integers(1, 20)))
        log = simulate_episode(u, i, small_model, agent, cat, session, np.random.default_rng(k))
        _check_invariants(log, cat, session)
        n += 1
    assert n >= 1000


def test_candidate_sets_brute_force_each_turn(small_world, small_model):
    """Rebuild each turn's candidate count from the logged answers and compare."""
    cat, split = small_world
    session = SessionConfig(12, 3)
    for k, (u, i) in enumerate(split.test[:60]):
        log = simulate_episode(int(u), int(i), small_model, MixedAgent(cat, session, k), cat, session, np.random.default_rng(k))
        b = BeliefState(confirmed=[(log.opener, True)])
        for t in log.turns:
            assert t.candidates == len(update_candidates(cat, b))
            if t.action == "ask":
                if t.answer:
                    b.confirmed.append((t.attribute, True))
                else:
                    b.rejected_attrs.add(t.attribute)
            elif not t.accepted:
                b.rejected_items.update(t.topk)


def test_parallel_suite_is_bytewise_identical(small_world, small_model):
    cat, split = small_world
    pairs = np.concatenate([split.train, split.test])[:400]
    session = SessionConfig(8, 5, seed=11)

    def factory(_pop):
        return MixedAgent(cat, session, 3)

    one = run_suite(pairs, cat, small_model, factory, session, parallelism=1)
    eight = run_suite(pairs, cat, small_model, factory, session, parallelism=8)
    a, b = io.StringIO(), io.StringIO()
    for lg in one:
        a.write(lg.to_json() + "\n")
    for lg in eight:
        b.write(lg.to_json() + "\n")
    assert a.getvalue() == b.getvalue()


def test_session_config_validation():
    with pytest.raises(ValueError):
        SessionConfig(max_turns=0)
    with pytest.raises(ValueError):
        SessionConfig(question_mode="free-text")
