import numpy as np
import pytest

from attlist.config import SyntheticSpec, TrainConfig
from attlist.models import InteractionDataset, Split
from attlist.services.dataio import split_dataset
from attlist.services.synthetic import generate_synthetic


def pytest_addoption(parser):
    parser.addoption(
        "--runslow", action="store_true", default=False, help="run slow acceptance tests"
    )


def pytest_collection_modifyitems(config, items):
    """Skip anything marked slow unless --runslow was given."""
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def make_dataset(containment, interactions, n_users=None) -> InteractionDataset:
    """
    Build a dataset straight from indices.
    containment holds 1-based item indices per list; interactions are
    (user, list, split) triples in file order.
    """
    users = np.array([u for u, _, _ in interactions], dtype=np.int64)
    lists = np.array([lst for _, lst, _ in interactions], dtype=np.int64)
    split = np.array([int(s) for _, _, s in interactions], dtype=np.int8)
    n_users = n_users if n_users is not None else int(users.max()) + 1
    n_items = max((max(items) for items in containment if items), default=0)
    return InteractionDataset(
        n_users=n_users,
        n_lists=len(containment),
        n_items=n_items,
        containment=[np.array(items, dtype=np.int64) for items in containment],
        users=users,
        lists=lists,
        order=np.arange(users.size, dtype=np.int64),
        split=split,
        user_ids=[f"u{u}" for u in range(n_users)],
        list_ids=[f"l{lst}" for lst in range(len(containment))],
        item_ids=[f"i{i}" for i in range(1, n_items + 1)],
    )


TRAIN, VAL, TEST = Split.train, Split.validation, Split.test

TINY_CONTAINMENT = [
    [1, 2, 3],
    [2, 3],
    [4, 5, 6, 7],
    [5],
    [6, 7, 8],
    [1, 8],
]

TINY_INTERACTIONS = [
    (0, 0, TRAIN), (0, 1, TRAIN), (0, 2, VAL), (0, 3, TEST),
    (1, 2, TRAIN), (1, 3, TRAIN), (1, 4, TRAIN), (1, 0, VAL), (1, 5, TEST),
    (2, 4, TRAIN), (2, 5, TRAIN), (2, 1, TEST),
    (3, 0, TRAIN), (3, 5, VAL), (3, 2, TEST),
]


@pytest.fixture
def tiny_ds():
    """4 users, 6 lists, 8 items, with every split populated."""
    return make_dataset(TINY_CONTAINMENT, TINY_INTERACTIONS)


@pytest.fixture
def tiny_config():
    """The small model used for gradient checks and quick training runs."""
    return TrainConfig(
        d=4, D=5, N=2, M=3, batch_size=4, gamma=0.0, lam=0.01, rho=1,
        max_epochs=3, patience=10, seed=0, prefetch=0,
    )


@pytest.fixture
def raw_files(tmp_path):
    """Raw interaction and containment files with string IDs."""
    interactions = tmp_path / "raw" / "interactions.tsv"
    containment = tmp_path / "raw" / "containment.tsv"
    interactions.parent.mkdir()
    containment.write_text(
        "".join(
            f"list{lst}\titem{item}\t{pos}\n"
            for lst, items in enumerate(TINY_CONTAINMENT)
            for pos, item in enumerate(items)
        ),
        encoding="utf-8",
    )
    interactions.write_text(
        "".join(f"user{u}\tlist{lst}\n" for u, lst, _ in TINY_INTERACTIONS),
        encoding="utf-8",
    )
    return interactions, containment


@pytest.fixture(scope="session")
def small_synthetic():
    """A planted-topic dataset big enough to train on, split 80/10/10."""
    spec = SyntheticSpec(
        n_users=60, n_lists=40, n_items=120, n_topics=3,
        min_list_length=3, max_list_length=8, max_user_activity=12, noise=0.1, seed=3,
    )
    return split_dataset(generate_synthetic(spec), seed=3)


@pytest.fixture
def dataset_factory():
    return make_dataset
