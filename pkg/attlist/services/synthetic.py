"""
Planted-topic generator for user / list / item data.

Lists draw most of their items from one topic and users mostly follow lists
from one or two preferred topics, so a model that reads list contents has
something real to find. User activity and list length follow discrete power
laws, which is the shape real list platforms show.
"""
import logging

import numpy as np

from attlist.config import SyntheticSpec
from attlist.errors import ConfigurationError
from attlist.models import InteractionDataset, Split
from attlist.services.tensor import make_rng

logger = logging.getLogger(__name__)

TOPIC_STREAM = 21
LIST_STREAM = 22
USER_STREAM = 23


def power_law_sample(rng: np.random.Generator, exponent: float, low: int, high: int, size: int):
    """Integers in [low, high] with P(k) proportional to k^-exponent."""
    ks = np.arange(low, high + 1)
    weights = ks.astype(np.float64) ** -exponent
    return rng.choice(ks, size=size, p=weights / weights.sum())


def _draw_list(rng, length, topic_items, all_items, noise):
    """One list: mostly Zipf-popular items of its topic, the rest from anywhere."""
    n_topic = min(int(rng.binomial(length, 1.0 - noise)), topic_items.size)
    popularity = 1.0 / np.arange(1, topic_items.size + 1)
    chosen = rng.choice(topic_items, size=n_topic, replace=False, p=popularity / popularity.sum())
    rest = np.setdiff1d(all_items, chosen)
    extra = rng.choice(rest, size=min(length - n_topic, rest.size), replace=False)
    items = np.concatenate([chosen, extra]).astype(np.int64)
    return items[rng.permutation(items.size)]


def generate_synthetic(spec: SyntheticSpec) -> InteractionDataset:
    """
    Build a dataset from a SyntheticSpec. Same spec, same dataset.
    Every interaction starts out in the train split.
    """
    if spec.n_topics > spec.n_lists:
        raise ConfigurationError(
            f"{spec.n_topics} topics but only {spec.n_lists} lists", field="n_topics"
        )
    if spec.n_items < spec.n_topics:
        raise ConfigurationError(
            f"{spec.n_topics} topics but only {spec.n_items} items", field="n_items"
        )
    if spec.min_list_length > spec.max_list_length:
        raise ConfigurationError("must not exceed max_list_length", field="min_list_length")

    K = spec.n_topics
    all_items = np.arange(1, spec.n_items + 1, dtype=np.int64)

    # topics for items (balanced) and lists (every topic gets at least one list)
    rng = make_rng(spec.seed, TOPIC_STREAM)
    item_topics = np.concatenate([[-1], rng.permutation(np.arange(spec.n_items) % K)])
    list_topics = np.concatenate([np.arange(K), rng.integers(0, K, size=spec.n_lists - K)])
    list_topics = list_topics[rng.permutation(spec.n_lists)]

    items_by_topic = [all_items[item_topics[1:] == t] for t in range(K)]
    lists_by_topic = [np.flatnonzero(list_topics == t) for t in range(K)]

    rng = make_rng(spec.seed, LIST_STREAM)
    high = min(spec.max_list_length, spec.n_items)
    lengths = power_law_sample(
        rng, spec.length_exponent, min(spec.min_list_length, high), high, spec.n_lists
    )
    containment = [
        _draw_list(rng, int(n), items_by_topic[list_topics[lst]], all_items, spec.noise)
        for lst, n in enumerate(lengths)
    ]

    rng = make_rng(spec.seed, USER_STREAM)
    max_activity = min(spec.max_user_activity, spec.n_lists)
    activity = power_law_sample(rng, spec.activity_exponent, 1, max_activity, spec.n_users)
    all_lists = np.arange(spec.n_lists, dtype=np.int64)

    users, lists = [], []
    for user, count in enumerate(activity.tolist()):
        preferred = rng.choice(K, size=min(K, int(rng.integers(1, 3))), replace=False)
        pool = np.concatenate([lists_by_topic[t] for t in preferred])
        n_topic = count - int((rng.random(count) < spec.noise).sum())
        picked = rng.permutation(pool)[:n_topic]

        # noise picks, plus any shortfall when the preferred topics run dry
        rest = np.setdiff1d(all_lists, picked)
        extra = rng.choice(rest, size=count - picked.size, replace=False)
        chosen = np.concatenate([picked, extra]).astype(np.int64)
        chosen = chosen[rng.permutation(chosen.size)]
        users.extend([user] * chosen.size)
        lists.extend(chosen.tolist())

    n = len(users)
    ds = InteractionDataset(
        n_users=spec.n_users,
        n_lists=spec.n_lists,
        n_items=spec.n_items,
        containment=containment,
        users=np.array(users, dtype=np.int64),
        lists=np.array(lists, dtype=np.int64),
        order=np.arange(n, dtype=np.int64),
        split=np.full(n, int(Split.train), dtype=np.int8),
        user_ids=[f"u{u}" for u in range(spec.n_users)],
        list_ids=[f"l{lst}" for lst in range(spec.n_lists)],
        item_ids=[f"i{i}" for i in range(1, spec.n_items + 1)],
        list_topics=list_topics.astype(np.int64),
        item_topics=item_topics.astype(np.int64),
    )
    logger.info(
        "generated %d users, %d lists, %d interactions over %d topics",
        ds.n_users, ds.n_lists, ds.n_interactions, K,
    )
    return ds
