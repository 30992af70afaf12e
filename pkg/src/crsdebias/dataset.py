"""User/item/attribute corpora: loading, filtering, splitting, popularity tiers.

On-disk layout of a catalog directory::

    interactions.tsv   user<TAB>item          (one interaction per line)
    items.tsv          item<TAB>attr,attr,...  (attribute list may be empty)
    attributes.tsv     attr[<TAB>category]     (optional vocabulary + categories)

Blank lines and lines starting with ``#`` are ignored. Tokens are arbitrary
strings and are re-indexed to dense 0-based ids on load.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

HEAD, MID, TAIL = "head", "mid", "tail"
TIERS = (HEAD, MID, TAIL)


class CatalogError(ValueError):
    pass


class CatalogFormatError(CatalogError):
    """Malformed line in a catalog file."""

    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = str(path)
        self.lineno = lineno


class CatalogValidationError(CatalogError):
    pass


@dataclass(frozen=True)
class ItemRecord:
    id: int
    attrs: frozenset
    popularity: float | None = None
    tier: str | None = None
    cold: bool | None = None


@dataclass(frozen=True)
class Catalog:
    n_users: int
    items: tuple
    n_attrs: int
    interactions: np.ndarray  # (k, 2) int64 rows of (user, item)
    categories: tuple | None = None  # category id per attribute, or None
    head_threshold: float | None = None
    tail_threshold: float | None = None
    select_threshold: float | None = None  # 25th percentile, used by dual policy routing

    def __post_init__(self):
        inter = np.asarray(self.interactions, dtype=np.int64).reshape(-1, 2)
        object.__setattr__(self, "interactions", inter)
        object.__setattr__(self, "items", tuple(self.items))

    @property
    def users(self) -> range:
        return range(self.n_users)

    @property
    def attributes(self) -> range:
        return range(self.n_attrs)

    @property
    def n_items(self) -> int:
        return len(self.items)

    @property
    def annotated(self) -> bool:
        return self.head_threshold is not None

    @cached_property
    def attr_matrix(self) -> np.ndarray:
        """Boolean (n_items, n_attrs) incidence matrix."""
        mat = np.zeros((self.n_items, self.n_attrs), dtype=bool)
        for it in self.items:
            if it.attrs:
                mat[it.id, sorted(it.attrs)] = True
        return mat

    @cached_property
    def popularity(self) -> np.ndarray:
        self._require_annotation()
        return np.array([it.popularity for it in self.items], dtype=np.float64)

    @cached_property
    def tiers(self) -> np.ndarray:
        self._require_annotation()
        return np.array([it.tier for it in self.items])

    @cached_property
    def cold_mask(self) -> np.ndarray:
        self._require_annotation()
        return np.array([it.cold for it in self.items], dtype=bool)

    def category_members(self) -> dict[int, list[int]]:
        if self.categories is None:
            return {}
        out: dict[int, list[int]] = {}
        for a, c in enumerate(self.categories):
            out.setdefault(c, []).append(a)
        return out

    def _require_annotation(self):
        if not self.annotated:
            raise CatalogError("catalog has no popularity annotation; call compute_popularity_and_tiers first")

    def validate(self) -> None:
        inter = self.interactions
        if inter.size:
            if inter[:, 0].min() < 0 or inter[:, 0].max() >= self.n_users:
                raise CatalogValidationError("interaction references an unknown user")
            if inter[:, 1].min() < 0 or inter[:, 1].max() >= self.n_items:
                raise CatalogValidationError("interaction references an unknown item")
        for idx, it in enumerate(self.items):
            if it.id != idx:
                raise CatalogValidationError(f"item ids must be dense; position {idx} holds id {it.id}")
            for a in it.attrs:
                if not 0 <= a < self.n_attrs:
                    raise CatalogValidationError(f"item {it.id} has attribute {a} outside vocabulary of {self.n_attrs}")
        if self.categories is not None and len(self.categories) != self.n_attrs:
            raise CatalogValidationError("category map must cover every attribute")

    def stats(self) -> dict:
        return {
            "users": self.n_users,
            "items": self.n_items,
            "interactions": int(len(self.interactions)),
            "attributes": self.n_attrs,
            "head_threshold": self.head_threshold,
            "tail_threshold": self.tail_threshold,
        }


@dataclass(frozen=True)
class DataSplit:
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    ratios: tuple = (0.7, 0.2, 0.1)
    seed: int = 0

    def __post_init__(self):
        for name in ("train", "valid", "test"):
            arr = np.asarray(getattr(self, name), dtype=np.int64).reshape(-1, 2)
            object.__setattr__(self, name, arr)

    def user_items(self, n_users: int, which=("train",)) -> list[set]:
        """Per-user item sets over the named parts of the split."""
        out = [set() for _ in range(n_users)]
        for name in which:
            for u, i in getattr(self, name):
                out[u].add(int(i))
        return out


# ---------------------------------------------------------------- loading


def _read_lines(path: Path):
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            yield lineno, line


def _token_key(tok: str):
    # numeric tokens sort numerically, others lexicographically after them
    try:
        return (0, int(tok), "")
    except ValueError:
        return (1, 0, tok)


def _index(tokens) -> dict[str, int]:
    return {tok: i for i, tok in enumerate(sorted(set(tokens), key=_token_key))}


def load_catalog(path, format: str = "tsv") -> Catalog:
    """Load a catalog directory, validate it and re-index every id densely."""
    if format != "tsv":
        raise CatalogError(f"unsupported catalog format {format!r} (expected 'tsv')")
    root = Path(path)
    items_path = root / "items.tsv"
    inter_path = root / "interactions.tsv"
    attrs_path = root / "attributes.tsv"
    for p in (items_path, inter_path):
        if not p.exists():
            raise CatalogError(f"missing catalog file {p}")

    vocab_tokens: list[str] | None = None
    category_tokens: dict[str, str] = {}
    if attrs_path.exists():
        vocab_tokens = []
        for lineno, line in _read_lines(attrs_path):
            parts = line.split("\t")
            if len(parts) > 2 or not parts[0].strip():
                raise CatalogFormatError(attrs_path, lineno, "expected 'attr' or 'attr<TAB>category'")
            tok = parts[0].strip()
            vocab_tokens.append(tok)
            if len(parts) == 2:
                category_tokens[tok] = parts[1].strip()

    raw_items: list[tuple[str, list[str], int]] = []
    seen_items: set[str] = set()
    for lineno, line in _read_lines(items_path):
        parts = line.split("\t")
        if len(parts) not in (1, 2) or not parts[0].strip():
            raise CatalogFormatError(items_path, lineno, "expected 'item<TAB>attr,attr,...'")
        tok = parts[0].strip()
        if tok in seen_items:
            raise CatalogFormatError(items_path, lineno, f"duplicate item {tok!r}")
        seen_items.add(tok)
        attrs = [a.strip() for a in parts[1].split(",")] if len(parts) == 2 and parts[1].strip() else []
        if any(not a for a in attrs):
            raise CatalogFormatError(items_path, lineno, "empty attribute token")
        raw_items.append((tok, attrs, lineno))

    raw_inter: list[tuple[str, str, int]] = []
    for lineno, line in _read_lines(inter_path):
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0].strip() or not parts[1].strip():
            raise CatalogFormatError(inter_path, lineno, "expected 'user<TAB>item'")
        raw_inter.append((parts[0].strip(), parts[1].strip(), lineno))

    if vocab_tokens is None:
        attr_index = _index(a for _, attrs, _ in raw_items for a in attrs)
    else:
        attr_index = {tok: i for i, tok in enumerate(vocab_tokens)}
        for tok, attrs, lineno in raw_items:
            for a in attrs:
                if a not in attr_index:
                    raise CatalogValidationError(f"{items_path}:{lineno}: attribute {a!r} of item {tok!r} not in vocabulary")

    item_index = _index(tok for tok, _, _ in raw_items)
    for utok, itok, lineno in raw_inter:
        if itok not in item_index:
            raise CatalogValidationError(f"{inter_path}:{lineno}: interaction names unknown item {itok!r}")
    user_index = _index(u for u, _, _ in raw_inter)

    items = [None] * len(item_index)
    for tok, attrs, _ in raw_items:
        iid = item_index[tok]
        items[iid] = ItemRecord(iid, frozenset(attr_index[a] for a in attrs))

    pairs = sorted({(user_index[u], item_index[i]) for u, i, _ in raw_inter})
    if len(pairs) != len(raw_inter):
        log.info("dropped %d duplicate interactions", len(raw_inter) - len(pairs))

    categories = None
    if category_tokens:
        cat_index = _index(category_tokens.values())
        if len(category_tokens) != len(attr_index):
            raise CatalogValidationError("attributes.tsv must give a category for every attribute or none")
        categories = tuple(cat_index[category_tokens[tok]] for tok in vocab_tokens)

    catalog = Catalog(
        n_users=len(user_index),
        items=items,
        n_attrs=len(attr_index),
        interactions=np.array(pairs, dtype=np.int64).reshape(-1, 2),
        categories=categories,
    )
    catalog.validate()
    log.info("loaded catalog: %s", json.dumps(catalog.stats()))
    return catalog


def save_catalog(catalog: Catalog, path) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "items.tsv", "w", encoding="utf-8") as fh:
        for it in catalog.items:
            fh.write(f"{it.id}\t{','.join(str(a) for a in sorted(it.attrs))}\n")
    with open(root / "interactions.tsv", "w", encoding="utf-8") as fh:
        for u, i in catalog.interactions:
            fh.write(f"{u}\t{i}\n")
    with open(root / "attributes.tsv", "w", encoding="utf-8") as fh:
        for a in range(catalog.n_attrs):
            if catalog.categories is None:
                fh.write(f"{a}\n")
            else:
                fh.write(f"{a}\t{catalog.categories[a]}\n")
    return root


# ----------------------------------------------------------- transforms


def filter_min_interactions(catalog: Catalog, k: int) -> Catalog:
    """Drop users with fewer than ``k`` interactions; surviving users are re-indexed."""
    if k < 0:
        raise ValueError("k must be non-negative")
    inter = catalog.interactions
    counts = np.bincount(inter[:, 0], minlength=catalog.n_users) if inter.size else np.zeros(catalog.n_users, int)
    keep = np.flatnonzero(counts >= k) if k > 0 else np.arange(catalog.n_users)
    if len(keep) == catalog.n_users:
        return catalog
    remap = np.full(catalog.n_users, -1, dtype=np.int64)
    remap[keep] = np.arange(len(keep))
    kept = inter[remap[inter[:, 0]] >= 0]
    new_inter = np.column_stack([remap[kept[:, 0]], kept[:, 1]]) if kept.size else np.zeros((0, 2), np.int64)
    # annotations depend on the user population, so they are dropped
    items = [ItemRecord(it.id, it.attrs) for it in catalog.items]
    return Catalog(len(keep), items, catalog.n_attrs, new_inter, catalog.categories)


def _alloc(n: int, ratio: float) -> int:
    return int(math.floor(n * ratio + 0.5))


def split_interactions(catalog: Catalog, ratios=(0.7, 0.2, 0.1), seed: int = 0) -> DataSplit:
    """Per-user stratified train/valid/test split.

    Valid and test sizes are ``round(n * ratio)``; whatever is left goes to
    train, so every user with interactions appears in train.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    inter = catalog.interactions
    order = np.lexsort((inter[:, 1], inter[:, 0])) if inter.size else np.zeros(0, int)
    inter = inter[order]
    bounds = np.searchsorted(inter[:, 0], np.arange(catalog.n_users + 1))
    parts = {"train": [], "valid": [], "test": []}
    small = 0
    for u in range(catalog.n_users):
        rows = inter[bounds[u]:bounds[u + 1]]
        n = len(rows)
        if n == 0:
            continue
        if n < 3:
            small += 1
            parts["train"].append(rows)
            continue
        rows = rows[rng.permutation(n)]
        n_valid = _alloc(n, ratios[1])
        n_test = min(_alloc(n, ratios[2]), n - n_valid)
        n_train = n - n_valid - n_test
        parts["train"].append(rows[:n_train])
        parts["valid"].append(rows[n_train:n_train + n_valid])
        parts["test"].append(rows[n_train + n_valid:])
    if small:
        warnings.warn(f"{small} user(s) with fewer than 3 interactions assigned entirely to train", stacklevel=2)

    def cat(xs):
        return np.concatenate(xs) if xs else np.zeros((0, 2), np.int64)

    return DataSplit(cat(parts["train"]), cat(parts["valid"]), cat(parts["test"]), ratios, seed)


def nearest_rank_percentile(values, pct: float) -> float:
    """Nearest-rank percentile: the ceil(pct/100 * N)-th smallest value."""
    vals = np.sort(np.asarray(values, dtype=np.float64))
    if vals.size == 0:
        raise ValueError("percentile of empty sequence")
    rank = max(1, math.ceil(pct / 100.0 * vals.size - 1e-12))
    return float(vals[min(rank, vals.size) - 1])


def compute_popularity_and_tiers(catalog: Catalog, split: DataSplit) -> Catalog:
    if len(split.train) == 0:
        raise ValueError("train split is empty")
    train = np.unique(split.train, axis=0)
    counts = np.bincount(train[:, 1], minlength=catalog.n_items)
    n_users = max(catalog.n_users, 1)
    pops = counts / n_users
    head_t = nearest_rank_percentile(pops, 80)
    tail_t = nearest_rank_percentile(pops, 20)
    select_t = nearest_rank_percentile(pops, 25)
    items = []
    for it in catalog.items:
        p = float(pops[it.id])
        cold = counts[it.id] == 0
        if p > head_t:
            tier = HEAD
        elif p < tail_t or cold:
            tier = TAIL
        else:
            tier = MID
        items.append(ItemRecord(it.id, it.attrs, p, tier, bool(cold)))
    return replace(
        catalog,
        items=items,
        head_threshold=head_t,
        tail_threshold=tail_t,
        select_threshold=select_t,
    )


# ------------------------------------------------------------ synthetic


@dataclass
class SyntheticParams:
    n_users: int = 500
    n_items: int = 2000
    n_attrs: int = 25
    attrs_per_item: int = 2
    interactions_per_user: int = 20
    zipf_exponent: float = 1.0
    seed: int = 0
    head_pool: int | None = None
    head_pool_bias: float = 0.95
    prefs_per_user: int = 3
    affinity: float = 2.0
    attr_skew: float = 1.5
    taste: float = 2.5
    taste_dim: int = 8


def generate_synthetic(
    n_users: int,
    n_items: int,
    n_attrs: int,
    attrs_per_item: int,
    interactions_per_user: int,
    zipf_exponent: float,
    seed: int,
    *,
    head_pool: int | None = None,
    head_pool_bias: float = 0.8,
    prefs_per_user: int = 3,
    affinity: float = 1.0,
    attr_skew: float = 0.0,
    taste: float = 0.0,
    taste_dim: int = 8,
) -> Catalog:
    """Zipf-popularity corpus with attribute structure.

    Item ranks follow ``rank ** -zipf_exponent``. Highly ranked items draw
    their attributes preferentially from a small shared pool (probability
    ``head_pool_bias`` for the top item, fading linearly to 0 at the median
    rank). Each user prefers ``prefs_per_user`` random attributes and picks
    items with weight ``rank ** -s * exp(affinity * overlap)``; since every
    item carries the same number of attributes, the marginal popularity
    profile is still the Zipf one. Outside the pool, attribute ``k`` of a
    random permutation is drawn with weight ``(k + 1) ** -attr_skew``, so a
    positive skew makes some attribute sets common to many items. With
    ``taste > 0`` users get standard-normal latent factors and items get
    unit-length ones of width ``taste_dim``, and the choice weight gains a
    factor ``exp(taste * <p_u, q_i>)``. Fixed-length item factors keep every
    item's expected weight equal, so the Zipf marginal is preserved.
    """
    for name, v in (("n_users", n_users), ("n_items", n_items), ("n_attrs", n_attrs),
                    ("attrs_per_item", attrs_per_item), ("interactions_per_user", interactions_per_user)):
        if v <= 0:
            raise ValueError(f"{name} must be positive")
    if zipf_exponent < 0:
        raise ValueError("zipf_exponent must be >= 0")
    if attrs_per_item > n_attrs:
        raise ValueError(f"attrs_per_item={attrs_per_item} exceeds n_attrs={n_attrs}")
    if interactions_per_user > n_items:
        raise ValueError("interactions_per_user exceeds n_items")

    rng = np.random.default_rng(seed)
    item_of_rank = rng.permutation(n_items)
    attr_perm = rng.permutation(n_attrs)
    pool_size = head_pool if head_pool is not None else max(attrs_per_item + 1, n_attrs // 5)
    pool_size = min(pool_size, n_attrs)
    pool = attr_perm[:pool_size]
    attr_cdf = np.cumsum((np.arange(n_attrs) + 1.0) ** (-attr_skew))
    attr_cdf /= attr_cdf[-1]

    attrs = [None] * n_items
    for r in range(n_items):
        x = r / n_items
        q = head_pool_bias * max(0.0, 1.0 - 2.0 * x)
        chosen: list[int] = []
        while len(chosen) < attrs_per_item:
            if rng.random() < q:
                a = int(pool[rng.integers(pool_size)])
            else:
                a = int(attr_perm[min(np.searchsorted(attr_cdf, rng.random(), side="right"), n_attrs - 1)])
            if a not in chosen:
                chosen.append(a)
        attrs[item_of_rank[r]] = frozenset(chosen)

    items = [ItemRecord(i, attrs[i]) for i in range(n_items)]
    mat = np.zeros((n_items, n_attrs))
    for it in items:
        mat[it.id, list(it.attrs)] = 1.0

    rank_of_item = np.empty(n_items, dtype=np.int64)
    rank_of_item[item_of_rank] = np.arange(n_items)
    base = (rank_of_item + 1.0) ** (-zipf_exponent)

    prefs = min(prefs_per_user, n_attrs)
    if taste > 0:
        item_f = rng.standard_normal((n_items, taste_dim))
        item_f /= np.linalg.norm(item_f, axis=1, keepdims=True)
        user_f = rng.standard_normal((n_users, taste_dim))
    rows = []
    for u in range(n_users):
        liked = rng.choice(n_attrs, size=prefs, replace=False)
        logit = affinity * mat[:, liked].sum(axis=1)
        if taste > 0:
            logit = logit + taste * (item_f @ user_f[u])
        w = base * np.exp(logit - logit.max())
        chosen_items = rng.choice(n_items, size=interactions_per_user, replace=False, p=w / w.sum())
        rows.extend((u, int(i)) for i in chosen_items)
    inter = np.array(sorted(rows), dtype=np.int64).reshape(-1, 2)
    return Catalog(n_users, items, n_attrs, inter)
