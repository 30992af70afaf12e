"""Conversation policies: max-entropy rule, REINFORCE-trained network, dual policy.

A policy picks one of ``m + 1`` actions per turn: ask attribute ``a``
(``0 <= a < m``) or recommend (``m``). Network policies read a fixed-length
state vector::

    [candidate entropy per attribute (m), turn / T, ln(1+|C|)/ln(1+|V|), history codes (T)]

and are pretrained to imitate the max-entropy rule, then fine-tuned with
REINFORCE on the composite reward ``w_rec*r_rec + w_conv*r_conv + w_bias*r_bias``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint
from .dataset import HEAD, TAIL, Catalog
from .simulator import BeliefState, SessionConfig, simulate_episode
from .util import derive_seed

log = logging.getLogger(__name__)

HIDDEN = 64


class PolicyError(RuntimeError):
    pass


# ---------------------------------------------------------------- state

def attribute_entropy(catalog: Catalog, candidates) -> np.ndarray:
    """Binary entropy (bits) of each attribute's frequency among the candidates."""
    cand = np.asarray(candidates, dtype=np.int64)
    if cand.size == 0:
        return np.zeros(catalog.n_attrs)
    f = catalog.attr_matrix[cand].mean(axis=0)
    h = np.zeros_like(f)
    inner = (f > 0) & (f < 1)
    p = f[inner]
    h[inner] = -(p * np.log2(p) + (1 - p) * np.log2(1 - p))
    return h


def encode_state(belief: BeliefState, candidates, catalog: Catalog, max_turns: int) -> np.ndarray:
    m = catalog.n_attrs
    cand = np.asarray(candidates, dtype=np.int64)
    ent = attribute_entropy(catalog, cand)
    if belief.asked:
        ent[list(belief.asked)] = 0.0
    hist = np.zeros(max_turns)
    codes = belief.history[:max_turns]
    hist[:len(codes)] = codes
    count = math.log1p(cand.size) / math.log1p(catalog.n_items) if cand.size else 0.0
    return np.concatenate([ent, [belief.turn / max_turns, count], hist])


def state_size(n_attrs: int, max_turns: int) -> int:
    return n_attrs + 2 + max_turns


def max_entropy_action(belief: BeliefState, candidates, catalog: Catalog, rec_threshold: int = 10) -> int:
    """Ask the most informative unasked attribute, or recommend (action ``m``).

    Recommends once the candidate set has at most ``rec_threshold`` items or
    when no unasked attribute still splits the candidates.
    """
    m = catalog.n_attrs
    if len(candidates) <= rec_threshold or len(belief.asked) >= m:
        return m
    ent = attribute_entropy(catalog, candidates)
    if belief.asked:
        ent[list(belief.asked)] = -1.0
    best = int(np.argmax(ent))  # argmax returns the first, i.e. lowest, id on ties
    if ent[best] <= 0.0:
        return m
    return best


# ---------------------------------------------------------------- network

def masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise PolicyError("no legal action")
    z = np.where(mask, logits, -np.inf)
    z = z - z[mask].max()
    e = np.where(mask, np.exp(z), 0.0)
    return e / e.sum()


@dataclass
class PolicyNetwork:
    w1: np.ndarray  # (state, 64)
    b1: np.ndarray
    w2: np.ndarray  # (64, m + 1)
    b2: np.ndarray
    tier: str | None = None  # which target tier the network was trained on, if any
    meta: dict = field(default_factory=dict)

    @classmethod
    def init(cls, n_in: int, n_actions: int, seed: int = 0, hidden: int = HIDDEN):
        rng = np.random.default_rng(seed)
        s1, s2 = 1.0 / math.sqrt(n_in), 1.0 / math.sqrt(hidden)
        return cls(rng.uniform(-s1, s1, (n_in, hidden)), np.zeros(hidden),
                   rng.uniform(-s2, s2, (hidden, n_actions)), np.zeros(n_actions))

    @property
    def n_actions(self) -> int:
        return self.w2.shape[1]

    def params(self) -> dict:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def copy(self) -> "PolicyNetwork":
        return PolicyNetwork(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy(), self.tier, dict(self.meta))

    def logits(self, state: np.ndarray) -> np.ndarray:
        h = np.maximum(state @ self.w1 + self.b1, 0.0)
        return h @ self.w2 + self.b2

    def probs(self, state: np.ndarray, mask: np.ndarray) -> np.ndarray:
        return masked_softmax(self.logits(state), mask)

    def log_prob_grad(self, state: np.ndarray, mask: np.ndarray, action: int):
        """``log pi(action | state)`` and its gradient for every parameter."""
        mask = np.asarray(mask, dtype=bool)
        if not mask[action]:
            raise PolicyError(f"action {action} is masked")
        pre = state @ self.w1 + self.b1
        h = np.maximum(pre, 0.0)
        z = h @ self.w2 + self.b2
        p = masked_softmax(z, mask)
        zmax = z[mask].max()
        log_p = float(z[action] - zmax - math.log(np.exp(z[mask] - zmax).sum()))
        d_z = -p
        d_z[action] += 1.0
        d_h = (self.w2 @ d_z) * (pre > 0)
        grads = {"w1": np.outer(state, d_h), "b1": d_h, "w2": np.outer(h, d_z), "b2": d_z}
        return log_p, grads

    def save(self, path):
        header = {"kind": "policy_network", "tier": self.tier, "meta": self.meta}
        return checkpoint.save_arrays(path, header, self.params())

    @classmethod
    def load(cls, path) -> "PolicyNetwork":
        header, arrays = checkpoint.load_arrays(path)
        if header.get("kind") != "policy_network":
            raise checkpoint.CheckpointError(f"{path}: not a policy network checkpoint")
        return cls(arrays["w1"], arrays["b1"], arrays["w2"], arrays["b2"], header.get("tier"), header.get("meta", {}))


def select_action(policy: PolicyNetwork, state, mask, rng, greedy: bool = False) -> tuple[int, float]:
    p = policy.probs(state, mask)
    if greedy:
        a = int(np.argmax(p))
    else:
        a = int(min(np.searchsorted(np.cumsum(p), rng.random(), side="right"), len(p) - 1))
        while p[a] == 0:  # float round-off at the top end of the cumulative sum
            a -= 1
    return a, math.log(p[a])


def cross_entropy_loss(policy: PolicyNetwork, states, masks, labels):
    """Mean negative log-likelihood of ``labels`` under the masked softmax, with gradients."""
    states = np.asarray(states, dtype=np.float64)
    masks = np.asarray(masks, dtype=bool)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    pre = states @ policy.w1 + policy.b1
    h = np.maximum(pre, 0.0)
    z = np.where(masks, h @ policy.w2 + policy.b2, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.where(masks, np.exp(z), 0.0)
    p = e / e.sum(axis=1, keepdims=True)
    picked = p[np.arange(n), labels]
    if np.any(picked <= 0):
        raise PolicyError("a label is masked out")
    loss = float(-np.mean(np.log(picked)))
    d_z = p.copy()
    d_z[np.arange(n), labels] -= 1.0
    d_z /= n
    d_h = (d_z @ policy.w2.T) * (pre > 0)
    grads = {"w1": states.T @ d_h, "b1": d_h.sum(axis=0), "w2": h.T @ d_z, "b2": d_z.sum(axis=0)}
    return loss, grads


def accuracy(policy: PolicyNetwork, states, masks, labels) -> float:
    if len(labels) == 0:
        return float("nan")
    hits = sum(int(np.argmax(policy.probs(s, mk))) == int(y) for s, mk, y in zip(states, masks, labels))
    return hits / len(labels)


def pretrain_classifier(policy: PolicyNetwork, states, masks, labels, epochs: int = 30,
                        learning_rate: float = 1e-3, seed: int = 0, batch_size: int = 64) -> PolicyNetwork:
    """Imitate recorded teacher actions by mini-batch Adam on cross-entropy.

    Returns a new network; ``meta["pretrain_accuracy"]`` holds the final
    training accuracy.
    """
    states = np.asarray(states, dtype=np.float64)
    masks = np.asarray(masks, dtype=bool)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise PolicyError("pretraining needs at least one recorded state")
    net = policy.copy()
    params = net.params()
    m1 = {k: np.zeros_like(v) for k, v in params.items()}
    m2 = {k: np.zeros_like(v) for k, v in params.items()}
    b1, b2, eps = 0.9, 0.999, 1e-8
    rng = np.random.default_rng([seed, 11])
    step = 0
    for _ in range(epochs):
        perm = rng.permutation(len(labels))
        for i in range(0, len(perm), batch_size):
            idx = perm[i:i + batch_size]
            _, grads = cross_entropy_loss(net, states[idx], masks[idx], labels[idx])
            step += 1
            for k, g in grads.items():
                m1[k] = b1 * m1[k] + (1 - b1) * g
                m2[k] = b2 * m2[k] + (1 - b2) * g * g
                params[k] -= learning_rate * (m1[k] / (1 - b1 ** step)) / (np.sqrt(m2[k] / (1 - b2 ** step)) + eps)
    net.meta["pretrain_accuracy"] = accuracy(net, states, masks, labels)
    net.meta["pretrain_loss"] = cross_entropy_loss(net, states, masks, labels)[0]
    return net


# ---------------------------------------------------------------- rewards

@dataclass
class RewardConfig:
    gamma: float = 0.7
    r_rec_success: float = 1.0
    r_rec_fail_terminal: float = -1.0
    r_conv_answer: float = 0.1
    r_conv_reject: float = -0.1
    w_rec: float = 1.0
    w_conv: float = 1.0
    w_bias: float = -0.5

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


def turn_rewards(episode, cfg: RewardConfig) -> list:
    """(r_rec, r_conv, r_bias) for each recorded turn of an EpisodeLog.

    r_rec is the success reward on an accepted recommendation and the failure
    reward on the last turn of a failed episode. r_conv rewards a confirmed
    attribute and penalises a denied one. r_bias is the turn's exposure value.
    """
    out = []
    last = len(episode.turns) - 1
    for k, t in enumerate(episode.turns):
        r_rec = 0.0
        if t.accepted:
            r_rec = cfg.r_rec_success
        elif k == last and not episode.success:
            r_rec = cfg.r_rec_fail_terminal
        r_conv = 0.0
        if t.action == "ask":
            r_conv = cfg.r_conv_answer if t.answer else cfg.r_conv_reject
        out.append((r_rec, r_conv, t.exposure))
    return out


def _weighted(r, cfg: RewardConfig) -> float:
    return cfg.w_rec * r[0] + cfg.w_conv * r[1] + cfg.w_bias * r[2]


def episode_return(rewards, cfg: RewardConfig, from_turn: int) -> float:
    """``R_n = sum_{k=n..N} gamma^(k-n) * weighted reward_k`` with 1-based ``from_turn``."""
    if not 1 <= from_turn <= len(rewards):
        raise ValueError(f"from_turn {from_turn} outside 1..{len(rewards)}")
    total = 0.0
    for k in range(from_turn, len(rewards) + 1):
        total += cfg.gamma ** (k - from_turn) * _weighted(rewards[k - 1], cfg)
    return total


def episode_returns(rewards, cfg: RewardConfig) -> list:
    """All of ``R_1..R_N`` by the backward recursion ``R_n = r_n + gamma R_{n+1}``."""
    out = [0.0] * len(rewards)
    acc = 0.0
    for k in range(len(rewards) - 1, -1, -1):
        acc = _weighted(rewards[k], cfg) + cfg.gamma * acc
        out[k] = acc
    return out


def reinforce_update(policy: PolicyNetwork, steps, alpha: float) -> PolicyNetwork:
    """One ascent step on ``R_n * log pi(a_n | s_n)`` per turn, in turn order.

    ``steps`` is a sequence of ``(state, mask, action, R_n)``. Each gradient is
    taken at the parameters left by the previous turn's step.
    """
    if not steps:
        raise PolicyError("empty episode")
    net = policy.copy()
    params = net.params()
    for n, (state, mask, action, ret) in enumerate(steps, start=1):
        if ret == 0:
            continue
        _, grads = net.log_prob_grad(np.asarray(state, dtype=np.float64), mask, int(action))
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise PolicyError(f"non-finite gradient for {k} at turn {n} (R_n={ret})")
            params[k] += alpha * ret * g
    return net


# ---------------------------------------------------------------- agents

class MaxEntropyAgent:
    def __init__(self, rec_threshold: int = 10):
        self.rec_threshold = rec_threshold

    def act(self, conv, rng) -> int:
        return max_entropy_action(conv.belief, conv.candidates, conv.catalog, self.rec_threshold)


class TeacherRecorder(MaxEntropyAgent):
    """Max-entropy agent that records (state, mask, action) for imitation."""

    def __init__(self, rec_threshold: int = 10):
        super().__init__(rec_threshold)
        self.trace = []

    def act(self, conv, rng) -> int:
        a = super().act(conv, rng)
        state = encode_state(conv.belief, conv.candidates, conv.catalog, conv.session.max_turns)
        self.trace.append((state, conv.action_mask(), a))
        return a


class NetworkAgent:
    def __init__(self, network: PolicyNetwork, greedy: bool = True, record: bool = False):
        self.network = network
        self.greedy = greedy
        self.trace = [] if record else None

    def act(self, conv, rng) -> int:
        state = encode_state(conv.belief, conv.candidates, conv.catalog, conv.session.max_turns)
        mask = conv.action_mask()
        a, _ = select_action(self.network, state, mask, rng, greedy=self.greedy)
        if self.trace is not None:
            self.trace.append((state, mask, a))
        return a


@dataclass
class DualPolicy:
    pn_pop: PolicyNetwork
    pn_unpop: PolicyNetwork
    select_threshold: float  # popularity at the selection percentile
    select_percentile: float = 25.0

    def __post_init__(self):
        if self.pn_pop.w1.shape != self.pn_unpop.w1.shape or self.pn_pop.w2.shape != self.pn_unpop.w2.shape:
            raise ValueError("dual policy networks must share one architecture")


def choose_network(dual: DualPolicy, target_popularity: float, select_threshold: float | None = None) -> PolicyNetwork:
    """The popular-item network iff the target's popularity is strictly above the threshold."""
    thr = dual.select_threshold if select_threshold is None else select_threshold
    return dual.pn_pop if target_popularity > thr else dual.pn_unpop


# ---------------------------------------------------------------- training

@dataclass
class PolicyTrainConfig:
    teacher_episodes: int = 600
    pretrain_epochs: int = 30
    pretrain_lr: float = 1e-3
    rl_episodes: int = 600
    alpha: float = 1e-3
    rec_threshold: int = 10
    seed: int = 0
    reward: RewardConfig = field(default_factory=RewardConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyTrainConfig":
        d = dict(d)
        d["reward"] = RewardConfig(**d.get("reward", {}))
        return cls(**d)


def _draw(pairs, n, rng):
    return pairs[rng.integers(0, len(pairs), size=n)] if len(pairs) else pairs


def collect_teacher_data(catalog, model, pairs, session: SessionConfig, rec_threshold: int, seed: int):
    states, masks, labels = [], [], []
    for k, (u, i) in enumerate(pairs):
        agent = TeacherRecorder(rec_threshold)
        ep_rng = np.random.default_rng(derive_seed("teacher", seed, k))
        simulate_episode(int(u), int(i), model, agent, catalog, session, ep_rng)
        for s, mk, a in agent.trace:
            states.append(s)
            masks.append(mk)
            labels.append(a)
    return np.array(states), np.array(masks), np.array(labels, dtype=np.int64)


def train_network(catalog: Catalog, pairs, model, session: SessionConfig, cfg: PolicyTrainConfig,
                  tier: str | None = None, callback=None) -> PolicyNetwork:
    """Pretrain on max-entropy demonstrations, then REINFORCE on sampled episodes of ``pairs``."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs) == 0:
        raise PolicyError(f"no training episodes for tier {tier or 'all'}")
    tag = tier or "all"
    rng = np.random.default_rng(derive_seed("policy", cfg.seed, tag))
    net = PolicyNetwork.init(state_size(catalog.n_attrs, session.max_turns), catalog.n_attrs + 1,
                             seed=derive_seed("policy-init", cfg.seed))
    teach = _draw(pairs, cfg.teacher_episodes, rng)
    states, masks, labels = collect_teacher_data(catalog, model, teach, session, cfg.rec_threshold,
                                                 derive_seed("teacher", cfg.seed, tag))
    net = pretrain_classifier(net, states, masks, labels, cfg.pretrain_epochs, cfg.pretrain_lr,
                              seed=derive_seed("pretrain", cfg.seed, tag))
    log.info("policy[%s] pretrained on %d states, accuracy %.3f", tag, len(labels), net.meta["pretrain_accuracy"])
    rl_pairs = _draw(pairs, cfg.rl_episodes, rng)
    successes = 0
    for k, (u, i) in enumerate(rl_pairs):
        agent = NetworkAgent(net, greedy=False, record=True)
        ep_rng = np.random.default_rng(derive_seed("rl", cfg.seed, tag, k))
        ep = simulate_episode(int(u), int(i), model, agent, catalog, session, ep_rng)
        successes += ep.success
        returns = episode_returns(turn_rewards(ep, cfg.reward), cfg.reward)
        steps = [(s, mk, a, r) for (s, mk, a), r in zip(agent.trace, returns)]
        if steps:
            net = reinforce_update(net, steps, cfg.alpha)
        if callback is not None:
            callback(k, ep)
    net.tier = tier
    net.meta.update({"rl_episodes": len(rl_pairs), "rl_success_rate": successes / max(len(rl_pairs), 1),
                     "teacher_states": int(len(labels)), "config": cfg.to_dict()})
    return net


def split_by_tier(catalog: Catalog, pairs) -> dict:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    tiers = catalog.tiers[pairs[:, 1]] if len(pairs) else np.array([])
    return {HEAD: pairs[tiers == HEAD], TAIL: pairs[tiers == TAIL], "mid": pairs[tiers == "mid"]}


def train_dual(catalog: Catalog, pairs, model, session: SessionConfig, cfg: PolicyTrainConfig) -> DualPolicy:
    """Head-target episodes train ``pn_pop``, tail-target episodes ``pn_unpop``; mid targets are unused."""
    groups = split_by_tier(catalog, pairs)
    for tier in (HEAD, TAIL):
        if len(groups[tier]) == 0:
            raise PolicyError(f"no training episodes with a {tier}-tier target")
    pn_pop = train_network(catalog, groups[HEAD], model, session, cfg, tier=HEAD)
    pn_unpop = train_network(catalog, groups[TAIL], model, session, cfg, tier=TAIL)
    return DualPolicy(pn_pop, pn_unpop, float(catalog.select_threshold))


def dual_agent_factory(dual: DualPolicy):
    def make(target_popularity):
        return NetworkAgent(choose_network(dual, target_popularity))
    return make


def network_agent_factory(network: PolicyNetwork):
    def make(_target_popularity):
        return NetworkAgent(network)
    return make


def maxent_agent_factory(rec_threshold: int = 10):
    def make(_target_popularity):
        return MaxEntropyAgent(rec_threshold)
    return make
