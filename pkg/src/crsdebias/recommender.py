"""Embedding scorer trained with BPR or popularity-aware focused learning (PAL).

The rating of item ``v`` for user ``u`` given preferred attributes ``A_u`` is
``u.v + sum_{a in A_u} v.a``. By default each training sample uses one random
attribute of its positive item as ``A_u``, the way a conversation opens.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np
from scipy import stats

from . import checkpoint
from .dataset import HEAD, TAIL, Catalog, DataSplit
from .kernels import get_kernel
from .util import NoValue

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class FactorizationModel:
    user_emb: np.ndarray
    item_emb: np.ndarray
    attr_emb: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        dims = {self.user_emb.shape[1], self.item_emb.shape[1], self.attr_emb.shape[1]}
        if len(dims) != 1:
            raise ValueError(f"embedding tables disagree on dimension: {sorted(dims)}")

    @property
    def dim(self) -> int:
        return self.user_emb.shape[1]

    @classmethod
    def init(cls, n_users: int, n_items: int, n_attrs: int, dim: int = 64, seed: int = 0, scale: float = 0.01):
        rng = np.random.default_rng(seed)
        return cls(
            rng.uniform(-scale, scale, (n_users, dim)),
            rng.uniform(-scale, scale, (n_items, dim)),
            rng.uniform(-scale, scale, (n_attrs, dim)),
        )

    def copy(self) -> "FactorizationModel":
        return FactorizationModel(self.user_emb.copy(), self.item_emb.copy(), self.attr_emb.copy(), dict(self.meta))

    def is_finite(self) -> bool:
        return all(np.isfinite(t).all() for t in (self.user_emb, self.item_emb, self.attr_emb))

    def query(self, user: int, pref_attrs: Iterable[int] = ()) -> np.ndarray:
        """``u + sum(a)``: dotting it with item rows gives the ratings."""
        q = self.user_emb[user].copy()
        attrs = sorted(pref_attrs)
        if attrs:
            q += self.attr_emb[attrs].sum(axis=0)
        return q

    def save(self, path):
        header = {"kind": "factorization_model", "dim": self.dim, **self.meta}
        return checkpoint.save_arrays(path, header, {
            "user_emb": self.user_emb, "item_emb": self.item_emb, "attr_emb": self.attr_emb,
        })

    @classmethod
    def load(cls, path) -> "FactorizationModel":
        header, arrays = checkpoint.load_arrays(path)
        if header.get("kind") != "factorization_model":
            raise checkpoint.CheckpointError(f"{path}: not a factorization model checkpoint")
        meta = {k: v for k, v in header.items() if k not in ("kind", "dim", "arrays")}
        return cls(arrays["user_emb"], arrays["item_emb"], arrays["attr_emb"], meta)


@dataclass
class PalConfig:
    n1: float = 7.0
    n2: float = 8.0
    lambda_reg: float = 1e-4
    learning_rate: float = 0.01
    epochs: int = 30
    neg_samples: int = 1
    seed: int = 0
    dim: int = 64
    # positive-item norm coefficient under plain BPR; None means lambda_reg
    bpr_item_penalty: float | None = None
    train_attrs: str = "one"  # preferred attributes per sample: none | one | all

    def __post_init__(self):
        if self.n1 < 0 or self.n2 < 0 or self.lambda_reg < 0:
            raise ValueError("n1, n2 and lambda_reg must be non-negative")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.epochs < 1 or self.neg_samples < 1 or self.dim < 1:
            raise ValueError("epochs, neg_samples and dim must be positive")
        if self.train_attrs not in ("none", "one", "all"):
            raise ValueError(f"train_attrs must be none, one or all, got {self.train_attrs!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def score(model: FactorizationModel, user: int, item: int, pref_attrs: Iterable[int] = ()) -> float:
    v = model.item_emb[item]
    total = float(model.user_emb[user] @ v)
    for a in sorted(pref_attrs):
        total += float(v @ model.attr_emb[a])
    return total


def sample_weights(popularity, cfg: PalConfig, mode: str) -> tuple[np.ndarray, np.ndarray]:
    """Per-item (sample weight, positive-item norm coefficient)."""
    pop = np.asarray(popularity, dtype=np.float64)
    if mode == "pal":
        return np.exp(-cfg.n1 * pop), np.exp(cfg.n2 * pop)
    if mode == "bpr":
        c = cfg.lambda_reg if cfg.bpr_item_penalty is None else cfg.bpr_item_penalty
        return np.ones_like(pop), np.full_like(pop, c)
    raise ValueError(f"unknown training mode {mode!r}")


def _log_sigmoid_neg(x: float) -> float:
    return math.log1p(math.exp(-x)) if x > 0 else -x + math.log1p(math.exp(x))


def pal_loss_terms(model, user, pos_item, neg_item, pref_attrs, popularity_pos, cfg: PalConfig, mode: str = "pal"):
    """Loss of one (user, pos, neg) triple and its exact gradients.

    Returns ``(loss, grads)`` where ``grads`` maps ``("user", u)``,
    ``("item", i)``, ``("item", j)`` and ``("attr", a)`` to gradient rows.
    """
    if not 0.0 <= popularity_pos <= 1.0:
        raise ValueError("popularity must lie in [0, 1]")
    w, c = (float(t[0]) for t in sample_weights([popularity_pos], cfg, mode))
    lam = cfg.lambda_reg
    attrs = sorted(set(pref_attrs))
    u = model.user_emb[user]
    vi = model.item_emb[pos_item]
    vj = model.item_emb[neg_item]
    q = u + (model.attr_emb[attrs].sum(axis=0) if attrs else 0.0)
    diff = vi - vj
    x = float(q @ diff)
    loss = w * _log_sigmoid_neg(x) + c * float(vi @ vi)
    loss += lam * (float(u @ u) + float(vj @ vj) + sum(float(model.attr_emb[a] @ model.attr_emb[a]) for a in attrs))
    g = -w / (1.0 + math.exp(x)) if x < 700 else 0.0
    grads = {
        ("user", user): g * diff + 2 * lam * u,
        ("item", pos_item): g * q + 2 * c * vi,
        ("item", neg_item): -g * q + 2 * lam * vj,
    }
    for a in attrs:
        grads[("attr", a)] = g * diff + 2 * lam * model.attr_emb[a]
    return loss, grads


def _item_attr_lists(catalog: Catalog) -> list[np.ndarray]:
    return [np.array(sorted(it.attrs), dtype=np.int64) for it in catalog.items]


def _sample_negatives(rng, users, pool, user_pos_codes, n_items):
    """Uniform negatives from ``pool`` that the user has not interacted with in train."""
    negs = pool[rng.integers(len(pool), size=len(users))]
    for _ in range(1000):
        bad = np.isin(users * n_items + negs, user_pos_codes)
        if not bad.any():
            return negs
        negs[bad] = pool[rng.integers(len(pool), size=int(bad.sum()))]
    raise RuntimeError("negative sampling failed: some user has interacted with every warm item")


def _sample_batch(rng, pairs, catalog, item_attrs, warm, pos_codes, cfg):
    """Draw (users, pos, neg, attr_ptr, attr_idx) for one epoch."""
    n_items = catalog.n_items
    order = rng.permutation(len(pairs))
    users = np.repeat(pairs[order, 0], cfg.neg_samples)
    pos = np.repeat(pairs[order, 1], cfg.neg_samples)
    n = len(users)
    if cfg.train_attrs == "none":
        return users, pos, _sample_negatives(rng, users, warm, pos_codes, n_items), np.zeros(n + 1, np.int64), np.zeros(0, np.int64)
    if cfg.train_attrs == "all":
        lists = [item_attrs[i] for i in pos]
        ptr = np.zeros(n + 1, np.int64)
        ptr[1:] = np.cumsum([len(x) for x in lists])
        idx = np.concatenate(lists) if n else np.zeros(0, np.int64)
        return users, pos, _sample_negatives(rng, users, warm, pos_codes, n_items), ptr, idx
    # "one": a single random attribute of the positive, as a session opener would reveal
    picks = rng.random(n)
    lens = np.array([len(item_attrs[i]) for i in pos], dtype=np.int64)
    has = lens > 0
    chosen = np.array([item_attrs[i][int(f * len(item_attrs[i]))] for i, f in zip(pos[has], picks[has])], dtype=np.int64)
    ptr = np.zeros(n + 1, np.int64)
    ptr[1:] = np.cumsum(has)
    return users, pos, _sample_negatives(rng, users, warm, pos_codes, n_items), ptr, chosen


def train(catalog: Catalog, split: DataSplit, cfg: PalConfig, mode: str = "bpr", backend: str | None = None,
          callback=None) -> FactorizationModel:
    """Train the scorer by semi-implicit SGD over shuffled (user, positive) pairs.

    Every epoch visits each train pair ``cfg.neg_samples`` times, each with a
    fresh negative drawn uniformly from warm items the user has not
    interacted with. Cold items are never touched.
    """
    if len(split.train) == 0:
        raise ValueError("train split is empty")
    if not catalog.annotated:
        raise ValueError("catalog must carry popularity annotations")
    sgd_epoch = get_kernel(backend)
    model = FactorizationModel.init(catalog.n_users, catalog.n_items, catalog.n_attrs, cfg.dim, cfg.seed)
    model.meta = {"mode": mode, "seed": cfg.seed, "config": cfg.to_dict()}
    if cfg.learning_rate == 0:
        return model

    rng = np.random.default_rng([cfg.seed, 1])
    weight, penalty = sample_weights(catalog.popularity, cfg, mode)
    item_attrs = _item_attr_lists(catalog)
    pairs = np.unique(split.train, axis=0)
    pos_codes = np.unique(pairs[:, 0] * catalog.n_items + pairs[:, 1])
    warm_mask = ~catalog.cold_mask
    warm = np.flatnonzero(warm_mask).astype(np.int64)
    history = []
    for epoch in range(cfg.epochs):
        users, pos, negs, ptr, idx = _sample_batch(rng, pairs, catalog, item_attrs, warm, pos_codes, cfg)
        loss = sgd_epoch(model.user_emb, model.item_emb, model.attr_emb,
                         users, pos, negs, ptr, idx,
                         weight, penalty, float(cfg.lambda_reg), float(cfg.learning_rate))
        if not math.isfinite(loss) or not model.is_finite():
            raise TrainingDivergedError(f"{mode} training diverged at epoch {epoch + 1}: loss={loss}")
        history.append(loss / len(users))
        if callback is not None:
            callback(epoch, history[-1])
    log.info("%s training done: %d epochs, final mean loss %.5f", mode, cfg.epochs, history[-1])
    model.meta["loss_history"] = history
    return model


def rank_candidates(model: FactorizationModel, user: int, pref_attrs, candidates) -> list[int]:
    """Candidates by descending rating; equal ratings fall back to ascending id."""
    cand = np.asarray(list(candidates), dtype=np.int64)
    if cand.size == 0:
        raise ValueError("no candidates to rank")
    scores = model.item_emb[cand] @ model.query(user, pref_attrs)
    order = np.lexsort((cand, -scores))
    return cand[order].tolist()


def top_k(model: FactorizationModel, user: int, pref_attrs, candidates: np.ndarray, k: int) -> np.ndarray:
    """First ``k`` entries of :func:`rank_candidates` without sorting the whole set."""
    cand = np.asarray(candidates, dtype=np.int64)
    if cand.size <= k:
        return np.asarray(rank_candidates(model, user, pref_attrs, cand), dtype=np.int64) if cand.size else cand
    scores = model.item_emb[cand] @ model.query(user, pref_attrs)
    kth = np.partition(-scores, k - 1)[k - 1]
    keep = -scores <= kth
    sub, sub_scores = cand[keep], scores[keep]
    order = np.lexsort((sub, -sub_scores))
    return sub[order][:k]


def auc_item_prediction(model: FactorizationModel, catalog: Catalog, split: DataSplit, group: str = "all",
                        n_neg: int = 100, seed: int = 0):
    """Sampled AUC on test pairs whose item falls in ``group`` (head, tail, cold or all).

    Returns :class:`NoValue` when the group has no test pairs.
    """
    tiers = catalog.tiers
    test = split.test
    if group == "all":
        sel = np.ones(len(test), dtype=bool)
    elif group == "cold":
        sel = catalog.cold_mask[test[:, 1]] if len(test) else np.zeros(0, bool)
    elif group in (HEAD, TAIL, "mid"):
        sel = tiers[test[:, 1]] == group if len(test) else np.zeros(0, bool)
    else:
        raise ValueError(f"unknown group {group!r}")
    pairs = test[sel]
    if len(pairs) == 0:
        return NoValue("no data")
    seen = split.user_items(catalog.n_users, ("train", "valid", "test"))
    rng = np.random.default_rng([seed, 7])
    aucs = []
    all_items = np.arange(catalog.n_items)
    for u, i in pairs:
        mask = np.ones(catalog.n_items, dtype=bool)
        mask[list(seen[u])] = False
        pool = all_items[mask]
        if pool.size == 0:
            continue
        negs = rng.choice(pool, size=min(n_neg, pool.size), replace=False)
        q = model.user_emb[u]
        s_pos = float(model.item_emb[i] @ q)
        s_neg = model.item_emb[negs] @ q
        aucs.append((np.sum(s_pos > s_neg) + 0.5 * np.sum(s_pos == s_neg)) / len(negs))
    if not aucs:
        return NoValue("no data")
    return float(np.mean(aucs))


@dataclass
class MagnitudeReport:
    rows: list  # (item, popularity, squared norm)
    spearman: object  # float or NoValue

    def to_dict(self) -> dict:
        sp = self.spearman if isinstance(self.spearman, float) else None
        return {"spearman": sp, "flag": None if sp is not None else str(self.spearman),
                "rows": [list(r) for r in self.rows]}


def magnitude_report(model: FactorizationModel, catalog: Catalog) -> MagnitudeReport:
    sq = np.einsum("ij,ij->i", model.item_emb, model.item_emb)
    pop = catalog.popularity
    rows = [(it.id, float(pop[it.id]), float(sq[it.id])) for it in catalog.items]
    warm = ~catalog.cold_mask
    x, y = pop[warm], sq[warm]
    if x.size < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return MagnitudeReport(rows, NoValue("degenerate"))
    rho = stats.spearmanr(x, y).statistic
    return MagnitudeReport(rows, float(rho))
