import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from crsdebias import kernels
from crsdebias.checkpoint import CheckpointError
from crsdebias.dataset import DataSplit, generate_synthetic, split_interactions, compute_popularity_and_tiers
from crsdebias.recommender import (
    FactorizationModel,
    PalConfig,
    TrainingDivergedError,
    auc_item_prediction,
    magnitude_report,
    pal_loss_terms,
    rank_candidates,
    sample_weights,
    score,
    top_k,
    train,
)
from crsdebias.util import NoValue

import oracles
from conftest import annotate_all_train, make_catalog


def tiny_model(d=2, n_users=1, n_items=3, n_attrs=2):
    return FactorizationModel(np.zeros((n_users, d)), np.zeros((n_items, d)), np.zeros((n_attrs, d)))


# ------------------------------------------------------------------ scoring

def test_score_worked_example():
    m = tiny_model()
    m.user_emb[0] = [1, 0]
    m.item_emb[0] = [2, 1]
    m.attr_emb[1] = [0, 1]
    assert score(m, 0, 0, {1}) == 3.0
    assert score(m, 0, 0, set()) == 2.0


def test_score_zero_item_vector():
    m = tiny_model()
    m.user_emb[0] = [3, -1]
    m.attr_emb[:] = 5.0
    assert score(m, 0, 2, {0, 1}) == 0.0


@given(st.integers(0, 10_000))
def test_score_is_linear_in_each_table(seed):
    rng = np.random.default_rng(seed)
    tables = [rng.normal(size=(2, 4)) for _ in range(3)]
    other = [rng.normal(size=(2, 4)) for _ in range(3)]
    for k in range(3):
        a = FactorizationModel(*tables)
        b_tabs = list(tables)
        b_tabs[k] = other[k]
        b = FactorizationModel(*b_tabs)
        c_tabs = list(tables)
        c_tabs[k] = tables[k] + other[k]
        c = FactorizationModel(*c_tabs)
        if k == 1:  # score is linear in the item table
            assert score(c, 0, 1, {0, 1}) == pytest.approx(score(a, 0, 1, {0, 1}) + score(b, 0, 1, {0, 1}))
        else:  # and affine in the user and attribute tables (the other term stays fixed)
            base = FactorizationModel(*[t if i != k else np.zeros_like(t) for i, t in enumerate(tables)])
            lhs = score(c, 0, 1, {0, 1}) - score(base, 0, 1, {0, 1})
            rhs = (score(a, 0, 1, {0, 1}) - score(base, 0, 1, {0, 1})) + (score(b, 0, 1, {0, 1}) - score(base, 0, 1, {0, 1}))
            assert lhs == pytest.approx(rhs)


# ------------------------------------------------------------------ ranking

def test_rank_candidates_examples():
    m = tiny_model(d=1, n_items=8)
    m.user_emb[0] = [1.0]
    m.item_emb[[5, 2, 7], 0] = [0.9, 1.4, 0.9]
    assert rank_candidates(m, 0, (), [5, 2, 7]) == [2, 5, 7]
    assert rank_candidates(m, 0, (), [4]) == [4]
    assert rank_candidates(m, 0, (), [6, 3]) == [3, 6]
    with pytest.raises(ValueError):
        rank_candidates(m, 0, (), [])


@given(st.lists(st.integers(0, 29), min_size=1, max_size=30, unique=True), st.integers(1, 12), st.integers(0, 999))
def test_rank_permutation_and_topk_prefix(cands, k, seed):
    rng = np.random.default_rng(seed)
    m = FactorizationModel(rng.normal(size=(1, 3)), rng.integers(-2, 3, size=(30, 3)).astype(float), rng.normal(size=(2, 3)))
    ranked = rank_candidates(m, 0, {1}, cands)
    assert sorted(ranked) == sorted(cands)
    assert top_k(m, 0, {1}, np.array(cands), k).tolist() == ranked[:k]


# ------------------------------------------------------------------ loss and gradients

def test_sample_weights_examples():
    cfg = PalConfig(n1=7, n2=8)
    w, c = sample_weights([0.0, 0.5], cfg, "pal")
    assert w[0] == 1.0 and c[0] == 1.0
    assert w[1] == pytest.approx(0.030197, abs=5e-7)
    assert math.isclose(w[1], math.exp(-3.5))


def _random_instance(rng, d):
    m = FactorizationModel(rng.normal(size=(3, d)), rng.normal(size=(5, d)), rng.normal(size=(4, d)))
    attrs = sorted(set(rng.integers(0, 4, size=rng.integers(0, 3)).tolist()))
    i, j = rng.choice(5, size=2, replace=False)
    return m, int(i), int(j), attrs


@pytest.mark.parametrize("mode", ["pal", "bpr"])
def test_loss_matches_direct_formula(mode):
    rng = np.random.default_rng(0)
    for _ in range(50):
        d = int(rng.integers(1, 9))
        m, i, j, attrs = _random_instance(rng, d)
        p = float(rng.random())
        cfg = PalConfig(n1=7, n2=8, lambda_reg=float(rng.random() * 0.1), dim=d)
        loss, _ = pal_loss_terms(m, 1, i, j, attrs, p, cfg, mode)
        ref = oracles.pal_loss(m.user_emb, m.item_emb, m.attr_emb, 1, i, j, attrs, p, 7, 8, cfg.lambda_reg, mode)
        assert loss == pytest.approx(ref, rel=1e-12)


@pytest.mark.parametrize("mode", ["pal", "bpr"])
def test_loss_gradients_finite_difference(mode):
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(50):
        d = int(rng.integers(1, 9))
        m, i, j, attrs = _random_instance(rng, d)
        m.user_emb *= 0.5
        p = float(rng.random() * 0.3)
        cfg = PalConfig(n1=7, n2=8, lambda_reg=0.05, dim=d)
        _, grads = pal_loss_terms(m, 1, i, j, attrs, p, cfg, mode)

        def f():
            return pal_loss_terms(m, 1, i, j, attrs, p, cfg, mode)[0]

        for (table, row), g in grads.items():
            arr = {"user": m.user_emb, "item": m.item_emb, "attr": m.attr_emb}[table][row]
            worst = max(worst, oracles.rel_err(g, oracles.central_diff(f, arr)))
    assert worst < 1e-4


def test_pal_reduces_to_uniform_bpr():
    cat = generate_synthetic(30, 40, 6, 2, 6, 1.0, seed=4)
    sp = split_interactions(cat, seed=4)
    cat = compute_popularity_and_tiers(cat, sp)
    a = train(cat, sp, PalConfig(n1=0, n2=0, lambda_reg=0.01, epochs=3, dim=4, seed=2), "pal")
    b = train(cat, sp, PalConfig(n1=7, n2=8, lambda_reg=0.01, epochs=3, dim=4, seed=2, bpr_item_penalty=1.0), "bpr")
    for t in ("user_emb", "item_emb", "attr_emb"):
        assert np.array_equal(getattr(a, t), getattr(b, t))


def test_popularity_out_of_range():
    m = tiny_model()
    with pytest.raises(ValueError):
        pal_loss_terms(m, 0, 0, 1, (), 1.5, PalConfig())


# ------------------------------------------------------------------ training

def test_learning_rate_zero_is_initialisation(small_world):
    cat, sp = small_world
    m = train(cat, sp, PalConfig(learning_rate=0.0, dim=4, seed=3), "pal")
    init = FactorizationModel.init(cat.n_users, cat.n_items, cat.n_attrs, 4, 3)
    assert np.array_equal(m.item_emb, init.item_emb) and np.array_equal(m.user_emb, init.user_emb)


def test_training_deterministic_and_cold_untouched(small_world):
    cat, sp = small_world
    cfg = PalConfig(learning_rate=0.05, epochs=3, dim=8, seed=1)
    a = train(cat, sp, cfg, "pal")
    b = train(cat, sp, cfg, "pal")
    assert np.array_equal(a.item_emb, b.item_emb)
    init = FactorizationModel.init(cat.n_users, cat.n_items, cat.n_attrs, 8, 1)
    cold = cat.cold_mask
    assert cold.any()
    assert np.array_equal(a.item_emb[cold], init.item_emb[cold])
    assert a.is_finite()


def test_divergence_guard(small_world):
    cat, sp = small_world
    with pytest.raises(TrainingDivergedError, match="diverged"):
        train(cat, sp, PalConfig(learning_rate=1e6, epochs=5, dim=4, n2=0.0, lambda_reg=0.0), "bpr")


def test_empty_train_rejected(small_world):
    cat, _ = small_world
    with pytest.raises(ValueError):
        train(cat, DataSplit(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros((0, 2))), PalConfig(), "bpr")


@pytest.mark.skipif(not kernels.compiled_available(), reason="compiled kernel not built")
def test_compiled_and_python_kernels_agree(small_world):
    cat, sp = small_world
    for mode in ("bpr", "pal"):
        for attrs in ("none", "one", "all"):
            cfg = PalConfig(learning_rate=0.05, epochs=2, dim=8, seed=6, train_attrs=attrs)
            a = train(cat, sp, cfg, mode, backend="cython")
            b = train(cat, sp, cfg, mode, backend="python")
            np.testing.assert_allclose(a.item_emb, b.item_emb, rtol=1e-10, atol=1e-12)
            np.testing.assert_allclose(a.attr_emb, b.attr_emb, rtol=1e-10, atol=1e-12)
            np.testing.assert_allclose(a.meta["loss_history"], b.meta["loss_history"], rtol=1e-10)


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.get_kernel("fortran")


# ------------------------------------------------------------------ AUC

def test_auc_all_ties_is_half(small_world):
    cat, sp = small_world
    m = FactorizationModel(np.ones((cat.n_users, 2)), np.ones((cat.n_items, 2)), np.ones((cat.n_attrs, 2)))
    assert auc_item_prediction(m, cat, sp) == 0.5


def test_auc_perfect_ranking():
    # item 0 is every user's test positive and scores highest
    cat = make_catalog([{0}] * 4, 1, [(0, 1), (0, 2), (1, 1), (1, 3), (2, 2), (2, 3)], n_users=3)
    test = np.array([[0, 0], [1, 0], [2, 0]])
    sp = DataSplit(cat.interactions, np.zeros((0, 2)), test)
    cat, _ = annotate_all_train(cat)
    m = FactorizationModel(np.ones((3, 1)), np.array([[5.0], [1.0], [2.0], [3.0]]), np.zeros((1, 1)))
    assert auc_item_prediction(m, cat, sp) == 1.0


def test_auc_small_instance_matches_exhaustive():
    rng = np.random.default_rng(3)
    cat = make_catalog([{0}] * 4, 1, [(0, 1), (1, 2), (2, 3), (2, 0)], n_users=3)
    cat, _ = annotate_all_train(cat)
    sp = DataSplit(cat.interactions, np.zeros((0, 2)), np.array([[0, 2], [1, 0], [2, 1]]))
    for _ in range(20):
        m = FactorizationModel(rng.normal(size=(3, 2)), rng.normal(size=(4, 2)), rng.normal(size=(1, 2)))
        assert auc_item_prediction(m, cat, sp) == pytest.approx(oracles.auc_exhaustive(m, cat, sp), abs=1e-12)


def test_auc_empty_group_is_no_data():
    cat = make_catalog([{0}] * 3, 1, [(0, 0), (1, 0), (1, 1)], n_users=2)
    cat, _ = annotate_all_train(cat)
    sp = DataSplit(cat.interactions, np.zeros((0, 2)), np.zeros((0, 2)))
    m = FactorizationModel.init(2, 3, 1, 2)
    out = auc_item_prediction(m, cat, sp, "head")
    assert isinstance(out, NoValue) and str(out) == "no data"


# ------------------------------------------------------------------ magnitude report

def test_magnitude_zero_embeddings_degenerate(small_world):
    cat, _ = small_world
    m = FactorizationModel(np.zeros((cat.n_users, 2)), np.zeros((cat.n_items, 2)), np.zeros((cat.n_attrs, 2)))
    rep = magnitude_report(m, cat)
    assert isinstance(rep.spearman, NoValue) and str(rep.spearman) == "degenerate"
    assert all(r[2] == 0 for r in rep.rows)


def test_magnitude_norm_equal_popularity(small_world):
    cat, _ = small_world
    item = np.zeros((cat.n_items, 1))
    item[:, 0] = np.sqrt(cat.popularity)
    m = FactorizationModel(np.zeros((cat.n_users, 1)), item, np.zeros((cat.n_attrs, 1)))
    assert magnitude_report(m, cat).spearman == pytest.approx(1.0)


def test_magnitude_random_embeddings_uncorrelated():
    cat = generate_synthetic(300, 1000, 10, 2, 15, 1.0, seed=8)
    sp = split_interactions(cat, seed=8)
    cat = compute_popularity_and_tiers(cat, sp)
    m = FactorizationModel.init(cat.n_users, cat.n_items, cat.n_attrs, 16, seed=8)
    assert abs(magnitude_report(m, cat).spearman) < 0.1


# ------------------------------------------------------------------ checkpoints

def test_checkpoint_round_trip(tmp_path, small_world):
    cat, sp = small_world
    m = train(cat, sp, PalConfig(epochs=1, dim=4), "pal")
    m.save(tmp_path / "m.bin")
    back = FactorizationModel.load(tmp_path / "m.bin")
    for t in ("user_emb", "item_emb", "attr_emb"):
        assert getattr(back, t).tobytes() == getattr(m, t).tobytes()
    assert back.meta["mode"] == "pal" and back.meta["config"]["dim"] == 4


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        FactorizationModel.load(p)
