import enum
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from pydantic import BaseModel

# reserved item index; real items start at 1
PAD = 0


class Split(enum.IntEnum):
    """Which part of the data an interaction belongs to."""
    train = 0
    validation = 1
    test = 2


@dataclass
class InteractionDataset:
    """
    Users, lists, items and who interacted with what.

    Items are indexed 1..n_items (0 is padding). Interactions are parallel
    arrays; `order` is the position of the interaction in the source file and
    stands in for a timestamp.
    """
    n_users: int
    n_lists: int
    n_items: int
    containment: list[np.ndarray]
    users: np.ndarray
    lists: np.ndarray
    order: np.ndarray
    split: np.ndarray
    user_ids: list[str]
    list_ids: list[str]
    item_ids: list[str]

    # planted topics, only set for synthetic data
    list_topics: np.ndarray | None = None
    item_topics: np.ndarray | None = None

    @property
    def n_interactions(self) -> int:
        return int(self.users.size)

    @property
    def density(self) -> float:
        return self.n_interactions / (self.n_users * self.n_lists)

    @property
    def unique_items(self) -> int:
        seen = set()
        for items in self.containment:
            seen.update(items.tolist())
        return len(seen)

    def item_id(self, index: int) -> str:
        return "<pad>" if index == PAD else self.item_ids[index - 1]

    @cached_property
    def _by_user(self) -> list[np.ndarray]:
        """Interaction row numbers per user, oldest first."""
        rows = np.lexsort((self.order, self.users))
        bounds = np.searchsorted(self.users[rows], np.arange(self.n_users + 1))
        return [rows[bounds[u]:bounds[u + 1]] for u in range(self.n_users)]

    def user_rows(self, user: int) -> np.ndarray:
        return self._by_user[user]

    def user_lists(self, user: int, splits=(Split.train,)) -> np.ndarray:
        """Lists this user interacted with in the given splits, oldest first."""
        rows = self._by_user[user]
        keep = np.isin(self.split[rows], [int(s) for s in splits])
        return self.lists[rows[keep]]

    def positives(self, user: int) -> set[int]:
        """Every list the user interacted with, in any split."""
        return set(self.lists[self._by_user[user]].tolist())

    def interactions(self, split: Split) -> tuple[np.ndarray, np.ndarray]:
        keep = self.split == int(split)
        return self.users[keep], self.lists[keep]

    @cached_property
    def list_lengths(self) -> np.ndarray:
        return np.array([len(items) for items in self.containment], dtype=np.int64)


@dataclass
class PaddedProfileBatch:
    """
    Fixed-size model inputs for B (user, candidate list) examples.

    profile_items is (B, N, M), list_items is (B, M); masks are 1 where a real
    item or list slot sits. positions holds 0..M-1 for every list row.
    """
    users: np.ndarray
    lists: np.ndarray
    labels: np.ndarray
    profile_items: np.ndarray
    profile_slot_mask: np.ndarray
    profile_item_mask: np.ndarray
    list_items: np.ndarray
    list_item_mask: np.ndarray
    positions: np.ndarray
    profile_lists: np.ndarray = field(default=None)

    def __len__(self) -> int:
        return int(self.users.size)

    def select(self, index) -> "PaddedProfileBatch":
        """Sub-batch of the given example rows."""
        index = np.atleast_1d(index)
        return PaddedProfileBatch(
            users=self.users[index],
            lists=self.lists[index],
            labels=self.labels[index],
            profile_items=self.profile_items[index],
            profile_slot_mask=self.profile_slot_mask[index],
            profile_item_mask=self.profile_item_mask[index],
            list_items=self.list_items[index],
            list_item_mask=self.list_item_mask[index],
            positions=self.positions,
            profile_lists=None if self.profile_lists is None else self.profile_lists[index],
        )


@dataclass
class RankedCandidates:
    """Candidates for one user, best first (ties go to the lower list index)."""
    user: int
    lists: np.ndarray
    scores: np.ndarray
    truth: set[int]


METRIC_COLUMNS = ("P@5", "R@5", "N@5", "P@10", "R@10", "N@10")


class MetricsReport(BaseModel):
    """Mean ranking metrics in percent over every evaluated user."""
    model: str
    split: str
    metrics: dict[str, float]
    user_count: int
    config_hash: str = ""

    def table_row(self, label: str | None = None) -> str:
        cells = "".join(f"{self.metrics.get(col, 0.0):>10.3f}" for col in METRIC_COLUMNS)
        return f"{(label or self.model):<24}{cells}"


def format_table(rows: list[tuple[str, MetricsReport]]) -> str:
    """Aligned plain-text table with the columns in report order."""
    header = f"{'model':<24}" + "".join(f"{col:>10}" for col in METRIC_COLUMNS)
    lines = [header, "-" * len(header)]
    lines.extend(report.table_row(label) for label, report in rows)
    return "\n".join(lines)
