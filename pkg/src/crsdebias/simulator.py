"""Deterministic System-Ask-User-Respond conversation loop.

One episode pairs a user with a target item. Turn 0 volunteers one random
attribute of the target. On each later turn the agent either asks about an
attribute, which the simulated user answers truthfully about the target, or
recommends the top-K candidates. The episode ends on success or at turn T.

Agents are duck-typed: anything with ``act(conv, rng) -> int`` works. Actions
``0..m-1`` ask that attribute and action ``m`` recommends.
"""

from __future__ import annotations

import json
import logging
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataset import Catalog, ItemRecord
from .metrics import exposure_bias_turn
from .recommender import FactorizationModel, top_k
from .util import derive_seed

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
BINARY, ENUMERATED = "binary", "enumerated"

# history codes
CONFIRMED, DENIED, REC_REJECTED = 1, -1, -2


@dataclass
class SessionConfig:
    max_turns: int = 15
    top_k: int = 10
    question_mode: str = BINARY
    seed: int = 0

    def __post_init__(self):
        if self.max_turns < 1 or self.top_k < 1:
            raise ValueError("max_turns and top_k must be >= 1")
        if self.question_mode not in (BINARY, ENUMERATED):
            raise ValueError(f"unknown question mode {self.question_mode!r}")


@dataclass
class BeliefState:
    """Evidence gathered so far in one conversation.

    ``turn`` is the 1-based index of the turn about to be played (0 before the
    opener). ``asked`` holds every attribute the agent may no longer ask about.
    """

    turn: int = 0
    confirmed: list = field(default_factory=list)  # (attribute, True) pairs in arrival order
    rejected_attrs: set = field(default_factory=set)
    rejected_items: set = field(default_factory=set)
    candidate_count: int = 0
    asked: set = field(default_factory=set)
    history: list = field(default_factory=list)

    @property
    def confirmed_attrs(self) -> list:
        return [a for a, _ in self.confirmed]


@dataclass
class TurnRecord:
    turn: int
    action: str  # "ask" or "rec"
    attribute: int | None
    answer: object  # bool (binary), sorted attribute list (enumerated), None on rec turns
    candidates: int  # candidate count when the agent acted
    topk: list  # would-be top-K (the recommended list on rec turns)
    topk_pop: list
    exposure: float
    accepted: bool = False


@dataclass
class EpisodeLog:
    user: int
    target: int
    target_popularity: float
    target_tier: str
    seed: int
    turns: list = field(default_factory=list)
    success: bool = False
    turns_used: int = 0
    reason: str = ""  # success | max_turns | exhausted
    opener: int | None = None

    def to_json(self) -> str:
        d = asdict(self)
        d["schema_version"] = SCHEMA_VERSION
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "EpisodeLog":
        d = json.loads(line)
        version = d.pop("schema_version", None)
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported episode schema version {version!r}")
        d["turns"] = [TurnRecord(**t) for t in d["turns"]]
        return cls(**d)


def write_logs(logs, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for lg in logs:
            fh.write(lg.to_json() + "\n")


def read_logs(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [EpisodeLog.from_json(line) for line in fh if line.strip()]


def user_respond(target: ItemRecord, question, catalog: Catalog | None = None, mode: str = BINARY):
    """Truthful answer about ``target``.

    Binary mode: ``question`` is an attribute id and the answer is a bool.
    Enumerated mode: ``question`` is a category id and the answer is the
    sorted list of the target's attributes in that category.
    """
    if mode == BINARY:
        return question in target.attrs
    if catalog is None or catalog.categories is None:
        raise ValueError("enumerated questions need a catalog with attribute categories")
    return sorted(a for a in target.attrs if catalog.categories[a] == question)


def update_candidates(catalog: Catalog, belief: BeliefState) -> np.ndarray:
    """Items matching every confirmed attribute, no denied one, and not yet rejected."""
    m = catalog.attr_matrix
    mask = np.ones(catalog.n_items, dtype=bool)
    for a in belief.confirmed_attrs:
        mask &= m[:, a]
    for a in belief.rejected_attrs:
        mask &= ~m[:, a]
    if belief.rejected_items:
        mask[list(belief.rejected_items)] = False
    return np.flatnonzero(mask)


class Conversation:
    """Mutable state of one episode, exposed to agents."""

    def __init__(self, catalog: Catalog, model: FactorizationModel, session: SessionConfig, user: int, target: int):
        self.catalog = catalog
        self.model = model
        self.session = session
        self.user = user
        self.target = catalog.items[target]
        self.target_popularity = float(catalog.popularity[target])
        self.belief = BeliefState()
        self._mask = np.ones(catalog.n_items, dtype=bool)
        self.candidates = np.arange(catalog.n_items)
        self.belief.candidate_count = catalog.n_items
        if session.question_mode == ENUMERATED and catalog.categories is None:
            raise ValueError("enumerated mode needs attribute categories")

    @property
    def n_actions(self) -> int:
        return self.catalog.n_attrs + 1

    @property
    def recommend_action(self) -> int:
        return self.catalog.n_attrs

    def action_mask(self) -> np.ndarray:
        mask = np.ones(self.n_actions, dtype=bool)
        if self.belief.asked:
            mask[list(self.belief.asked)] = False
        return mask

    def _refresh(self):
        self.candidates = np.flatnonzero(self._mask)
        self.belief.candidate_count = int(self.candidates.size)

    def confirm(self, attr: int):
        self.belief.confirmed.append((attr, True))
        self.belief.asked.add(attr)
        self._mask &= self.catalog.attr_matrix[:, attr]

    def deny(self, attr: int):
        self.belief.rejected_attrs.add(attr)
        self.belief.asked.add(attr)
        self._mask &= ~self.catalog.attr_matrix[:, attr]

    def ask(self, attr: int):
        mode = self.session.question_mode
        if mode == BINARY:
            yes = user_respond(self.target, attr)
            if yes:
                self.confirm(attr)
            else:
                self.deny(attr)
            self.belief.history.append(CONFIRMED if yes else DENIED)
            answer = yes
        else:
            cat = self.catalog.categories[attr]
            answer = user_respond(self.target, cat, self.catalog, ENUMERATED)
            for a in answer:
                self.belief.confirmed.append((a, True))
                self._mask &= self.catalog.attr_matrix[:, a]
            self.belief.asked.update(a for a, c in enumerate(self.catalog.categories) if c == cat)
            self.belief.history.append(CONFIRMED if answer else DENIED)
        self._refresh()
        return answer

    def would_be(self) -> np.ndarray:
        return top_k(self.model, self.user, self.belief.confirmed_attrs, self.candidates, self.session.top_k)

    def reject(self, items):
        self.belief.rejected_items.update(int(i) for i in items)
        self._mask[np.asarray(items, dtype=np.int64)] = False
        self.belief.history.append(REC_REJECTED)
        self._refresh()


def simulate_episode(user: int, target: int, model: FactorizationModel, agent, catalog: Catalog,
                     session: SessionConfig, rng, seed: int = 0) -> EpisodeLog:
    item = catalog.items[target]
    if not item.attrs:
        raise ValueError(f"target item {target} has no attributes")
    conv = Conversation(catalog, model, session, user, target)
    log_ = EpisodeLog(user=int(user), target=int(target), target_popularity=conv.target_popularity,
                      target_tier=str(item.tier), seed=int(seed))
    opener = int(rng.choice(sorted(item.attrs)))
    log_.opener = opener
    conv.confirm(opener)
    conv._refresh()
    pops = catalog.popularity
    t_pop = catalog.head_threshold
    for n in range(1, session.max_turns + 1):
        conv.belief.turn = n
        if conv.candidates.size == 0:
            log_.reason = "exhausted"
            break
        rec = conv.would_be()
        rec_pop = pops[rec].tolist()
        exposure = exposure_bias_turn(rec_pop, t_pop)
        n_cand = int(conv.candidates.size)
        action = int(agent.act(conv, rng))
        if action == conv.recommend_action:
            accepted = bool(np.any(rec == target))
            log_.turns.append(TurnRecord(n, "rec", None, None, n_cand, rec.tolist(), rec_pop, exposure, accepted))
            log_.turns_used = n
            if accepted:
                log_.success = True
                log_.reason = "success"
                break
            conv.reject(rec)
        else:
            if not conv.action_mask()[action]:
                raise ValueError(f"agent asked about attribute {action} which was already asked")
            answer = conv.ask(action)
            log_.turns.append(TurnRecord(n, "ask", action, answer, n_cand, rec.tolist(), rec_pop, exposure))
            log_.turns_used = n
    else:
        log_.reason = "max_turns"
    return log_


# process-pool plumbing: components are inherited through fork, not pickled per task
_WORKER: dict = {}


def _init_worker(components):
    _WORKER["c"] = components


def _run_chunk(indexed_pairs):
    return [_episode_for(_WORKER["c"], idx, u, i) for idx, u, i in indexed_pairs]


def _episode_for(components, idx, user, target):
    catalog, model, agent_factory, session = components
    seed = derive_seed(session.seed, int(idx))
    rng = np.random.default_rng(seed)
    agent = agent_factory(catalog.items[target].popularity)
    return simulate_episode(int(user), int(target), model, agent, catalog, session, rng, seed=seed)


def run_suite(pairs, catalog: Catalog, model: FactorizationModel, agent_factory, session: SessionConfig,
              parallelism: int = 1) -> list:
    """One episode per (user, item) pair, returned in pair order.

    ``agent_factory(target_popularity)`` builds the agent for each episode.
    Episode ``k`` is seeded from ``(session.seed, k)`` alone, so results do
    not depend on ``parallelism``.
    """
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    jobs = [(k, int(u), int(i)) for k, (u, i) in enumerate(pairs)]
    components = (catalog, model, agent_factory, session)
    if parallelism <= 1 or len(jobs) < 2:
        return [_episode_for(components, *job) for job in jobs]
    n_chunks = min(len(jobs), parallelism * 4)
    chunks = [jobs[c::n_chunks] for c in range(n_chunks)]
    ctx = multiprocessing.get_context("fork")
    with ProcessPoolExecutor(parallelism, mp_context=ctx, initializer=_init_worker,
                             initargs=(components,)) as pool:
        results = list(pool.map(_run_chunk, chunks))
    out = [None] * len(jobs)
    for chunk, logs in zip(chunks, results):
        for (k, _, _), lg in zip(chunk, logs):
            out[k] = lg
    return out
