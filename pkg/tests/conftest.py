import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from crsdebias.dataset import (
    Catalog,
    ItemRecord,
    compute_popularity_and_tiers,
    generate_synthetic,
    split_interactions,
)
from crsdebias.recommender import FactorizationModel

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_catalog(item_attrs, n_attrs, interactions, n_users=None, categories=None):
    """Catalog from a list of attribute sets and (user, item) pairs."""
    inter = np.asarray(interactions, dtype=np.int64).reshape(-1, 2)
    if n_users is None:
        n_users = int(inter[:, 0].max()) + 1 if len(inter) else 1
    items = [ItemRecord(i, frozenset(a)) for i, a in enumerate(item_attrs)]
    return Catalog(n_users, items, n_attrs, inter, categories=categories)


def annotate_all_train(catalog):
    """Popularity annotation treating every interaction as training data."""
    from crsdebias.dataset import DataSplit
    split = DataSplit(catalog.interactions, np.zeros((0, 2)), np.zeros((0, 2)))
    return compute_popularity_and_tiers(catalog, split), split


@pytest.fixture(scope="session")
def small_world():
    """A small annotated synthetic catalog with its split."""
    cat = generate_synthetic(60, 120, 10, 2, 12, 1.0, seed=3, taste=0.0, attr_skew=0.0)
    split = split_interactions(cat, seed=3)
    return compute_popularity_and_tiers(cat, split), split


@pytest.fixture(scope="session")
def small_model(small_world):
    cat, _ = small_world
    return FactorizationModel.init(cat.n_users, cat.n_items, cat.n_attrs, dim=8, seed=5, scale=0.5)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
