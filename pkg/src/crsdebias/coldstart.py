"""Cold-start item embeddings from a learned attribute -> embedding mapping."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .dataset import Catalog, ItemRecord
from .recommender import FactorizationModel

log = logging.getLogger(__name__)

HIDDEN = 128


class ColdStartError(ValueError):
    pass


@dataclass
class AttributeMapper:
    w1: np.ndarray  # (m, 128)
    b1: np.ndarray  # (128,)
    w2: np.ndarray  # (128, d)
    b2: np.ndarray  # (d,)
    final_loss: float = float("nan")
    loss_history: list = field(default_factory=list)

    @property
    def n_attrs(self) -> int:
        return self.w1.shape[0]

    @property
    def dim(self) -> int:
        return self.w2.shape[1]

    @classmethod
    def init(cls, n_attrs: int, dim: int, seed: int = 0, scale: float = 0.05, hidden: int = HIDDEN):
        rng = np.random.default_rng(seed)
        return cls(
            rng.uniform(-scale, scale, (n_attrs, hidden)),
            rng.uniform(-scale, scale, hidden),
            rng.uniform(-scale, scale, (hidden, dim)),
            rng.uniform(-scale, scale, dim),
        )

    def params(self) -> dict:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = np.maximum(x @ self.w1 + self.b1, 0.0)
        return h @ self.w2 + self.b2

    def save(self, path):
        return checkpoint.save_arrays(path, {"kind": "attribute_mapper", "final_loss": self.final_loss}, self.params())

    @classmethod
    def load(cls, path) -> "AttributeMapper":
        header, arrays = checkpoint.load_arrays(path)
        if header.get("kind") != "attribute_mapper":
            raise checkpoint.CheckpointError(f"{path}: not an attribute mapper checkpoint")
        return cls(arrays["w1"], arrays["b1"], arrays["w2"], arrays["b2"], header.get("final_loss", float("nan")))


def multi_hot(attrs, n_attrs: int) -> np.ndarray:
    x = np.zeros(n_attrs)
    if attrs:
        x[sorted(attrs)] = 1.0
    return x


def mapping_loss(mapper: AttributeMapper, x: np.ndarray, y: np.ndarray, lam: float):
    """Mean over rows of ||f(x) - y||^2 plus lam * (||W1||^2 + ||W2||^2), with gradients."""
    n = x.shape[0]
    pre = x @ mapper.w1 + mapper.b1
    h = np.maximum(pre, 0.0)
    out = h @ mapper.w2 + mapper.b2
    err = out - y
    loss = float(np.sum(err * err)) / n + lam * (float(np.sum(mapper.w1 ** 2)) + float(np.sum(mapper.w2 ** 2)))
    d_out = 2.0 * err / n
    g_w2 = h.T @ d_out + 2 * lam * mapper.w2
    g_b2 = d_out.sum(axis=0)
    d_h = (d_out @ mapper.w2.T) * (pre > 0)
    g_w1 = x.T @ d_h + 2 * lam * mapper.w1
    g_b1 = d_h.sum(axis=0)
    return loss, {"w1": g_w1, "b1": g_b1, "w2": g_w2, "b2": g_b2}


def fit_mapper(model: FactorizationModel, catalog: Catalog, lam: float = 1e-4, epochs: int = 500,
               learning_rate: float = 0.01, seed: int = 0, batch_size: int | None = None) -> AttributeMapper:
    """Regress warm items' trained embeddings on their multi-hot attribute vectors.

    Full-batch gradient descent when ``batch_size`` is None, otherwise
    shuffled mini-batches. The recorded loss is the full training objective
    after each epoch.
    """
    warm = np.flatnonzero(~catalog.cold_mask)
    if warm.size == 0:
        raise ColdStartError("CSM requires warm items")
    if model.item_emb.shape[0] != catalog.n_items:
        raise ColdStartError("model and catalog disagree on the number of items")
    x = catalog.attr_matrix[warm].astype(np.float64)
    y = model.item_emb[warm]
    mapper = AttributeMapper.init(catalog.n_attrs, model.dim, seed)
    rng = np.random.default_rng([seed, 3])
    params = mapper.params()
    history = []
    full_batch = batch_size is None or batch_size >= len(warm)
    for _ in range(epochs):
        if full_batch:
            # objective at the pre-step parameters; the post-step value lands in the next epoch
            loss, grads = mapping_loss(mapper, x, y, lam)
            for k, g in grads.items():
                params[k] -= learning_rate * g
        else:
            perm = rng.permutation(len(warm))
            for i in range(0, len(perm), batch_size):
                idx = perm[i:i + batch_size]
                _, grads = mapping_loss(mapper, x[idx], y[idx], lam)
                for k, g in grads.items():
                    params[k] -= learning_rate * g
            loss, _ = mapping_loss(mapper, x, y, lam)
        if not np.isfinite(loss):
            raise ColdStartError("mapper training diverged")
        history.append(loss)
    if full_batch:
        history.append(mapping_loss(mapper, x, y, lam)[0])
    mapper.loss_history = history
    mapper.final_loss = history[-1] if history else mapping_loss(mapper, x, y, lam)[0]
    log.info("mapper fitted on %d warm items, final loss %.6f", len(warm), mapper.final_loss)
    return mapper


def reconstruct(mapper: AttributeMapper, item: ItemRecord) -> np.ndarray:
    for a in item.attrs:
        if not 0 <= a < mapper.n_attrs:
            raise ColdStartError(f"attribute {a} outside the mapper's vocabulary")
    return mapper.forward(multi_hot(item.attrs, mapper.n_attrs)[None, :])[0]


def apply_csm(model: FactorizationModel, mapper: AttributeMapper, catalog: Catalog) -> FactorizationModel:
    """Copy of ``model`` with every cold item's row replaced by its reconstruction."""
    if mapper.dim != model.dim:
        raise ColdStartError(f"mapper output width {mapper.dim} != model dimension {model.dim}")
    out = model.copy()
    cold = np.flatnonzero(catalog.cold_mask)
    if cold.size:
        x = catalog.attr_matrix[cold].astype(np.float64)
        out.item_emb[cold] = mapper.forward(x)
    out.meta["csm"] = True
    return out
