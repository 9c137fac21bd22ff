"""
Reading interaction/containment files, splitting, padding and negative sampling.
"""
import logging
from collections import defaultdict
from dataclasses import replace

import numpy as np

from attlist.errors import ConfigurationError, DatasetParseError, ReferentialIntegrityError
from attlist.models import PAD, InteractionDataset, PaddedProfileBatch, Split
from attlist.services.tensor import make_rng

logger = logging.getLogger(__name__)

# rng streams owned by this module
SPLIT_STREAM = 11
NEGATIVE_STREAM = 12

# how profiles pick lists when a user has more than N of them
PROFILE_SELECTION = "most-recent-by-file-order"


def _read_rows(path: str, n_fields: int):
    """Yield (line number, fields) for each non-blank tab-separated line."""
    try:
        f = open(path, encoding="utf-8")
    except OSError as e:
        raise DatasetParseError(path, 0, f"can't open file ({e.strerror})") from e
    with f:
        for line_number, line in enumerate(f, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != n_fields or any(not x for x in fields):
                raise DatasetParseError(
                    path, line_number, f"expected {n_fields} tab-separated fields"
                )
            yield line_number, fields


def load_dataset(
    interactions_path: str,
    containment_path: str,
    min_item_frequency: int = 5,
    min_user_interactions: int = 0,
) -> InteractionDataset:
    """
    Load raw files with arbitrary string IDs and remap them to dense indices.

    Items found in fewer than `min_item_frequency` lists are removed from every
    list. Lists emptied that way are kept (they become all padding). Users with
    fewer than `min_user_interactions` interactions are dropped (0 keeps all).
    """
    # list-id -> [(position, item-id)], in file order of first appearance
    raw_lists: dict[str, list[tuple[int, str]]] = {}
    for line_number, (list_id, item_id, position) in _read_rows(containment_path, 3):
        try:
            pos = int(position)
        except ValueError:
            raise DatasetParseError(containment_path, line_number, "position is not an integer")
        if pos < 0:
            raise DatasetParseError(containment_path, line_number, "position is negative")
        raw_lists.setdefault(list_id, []).append((pos, item_id))

    pairs: list[tuple[str, str]] = []
    seen_pairs = set()
    duplicates = 0
    for line_number, (user_id, list_id) in _read_rows(interactions_path, 2):
        if list_id not in raw_lists:
            raise ReferentialIntegrityError(
                f"{interactions_path}, line {line_number}: list '{list_id}' "
                "is not in the containment file"
            )
        if (user_id, list_id) in seen_pairs:
            duplicates += 1
            continue
        seen_pairs.add((user_id, list_id))
        pairs.append((user_id, list_id))

    if not pairs:
        raise DatasetParseError(interactions_path, 0, "no interactions")
    if duplicates:
        logger.warning("dropped %d duplicate interactions", duplicates)

    if min_user_interactions > 0:
        per_user = defaultdict(int)
        for user_id, _ in pairs:
            per_user[user_id] += 1
        pairs = [p for p in pairs if per_user[p[0]] >= min_user_interactions]
        if not pairs:
            raise DatasetParseError(interactions_path, 0, "no interactions left after filtering")

    # how many distinct lists each item appears in
    frequency = defaultdict(int)
    for entries in raw_lists.values():
        for item_id in {item for _, item in entries}:
            frequency[item_id] += 1

    item_index: dict[str, int] = {}
    containment = []
    dropped = set()
    for entries in raw_lists.values():
        entries.sort(key=lambda e: e[0])
        kept = []
        for _, item_id in entries:
            if frequency[item_id] < min_item_frequency:
                dropped.add(item_id)
                continue
            if item_id not in item_index:
                item_index[item_id] = len(item_index) + 1
            kept.append(item_index[item_id])
        containment.append(np.array(kept, dtype=np.int64))
    if dropped:
        logger.info("removed %d items seen in fewer than %d lists", len(dropped), min_item_frequency)

    list_index = {list_id: i for i, list_id in enumerate(raw_lists)}
    user_index: dict[str, int] = {}
    for user_id, _ in pairs:
        user_index.setdefault(user_id, len(user_index))

    users = np.array([user_index[u] for u, _ in pairs], dtype=np.int64)
    lists = np.array([list_index[lst] for _, lst in pairs], dtype=np.int64)

    ds = InteractionDataset(
        n_users=len(user_index),
        n_lists=len(list_index),
        n_items=len(item_index),
        containment=containment,
        users=users,
        lists=lists,
        order=np.arange(len(pairs), dtype=np.int64),
        split=np.full(len(pairs), int(Split.train), dtype=np.int8),
        user_ids=list(user_index),
        list_ids=list(list_index),
        item_ids=list(item_index),
    )
    logger.info(
        "loaded %d users, %d lists, %d items, %d interactions (density %.4f%%)",
        ds.n_users, ds.n_lists, ds.n_items, ds.n_interactions, 100 * ds.density,
    )
    return ds


def split_dataset(
    ds: InteractionDataset,
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> InteractionDataset:
    """
    Tag every interaction train / validation / test.

    Each user's interactions are shuffled and cut at stochastically rounded
    boundaries (one shared uniform offset per user), so every split gets its
    exact expected share on average and is within one interaction of it per user.
    """
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise ConfigurationError(
            f"must be 3 non-negative numbers summing to 1, got {fractions}", field="fractions"
        )
    rng = make_rng(seed, SPLIT_STREAM)
    first = fractions[0]
    second = fractions[0] + fractions[1]

    split = np.empty(ds.n_interactions, dtype=np.int8)
    for user in range(ds.n_users):
        rows = ds.user_rows(user)
        n = rows.size
        offset = rng.random()
        shuffled = rows[rng.permutation(n)]
        cut1 = min(n, int(np.floor(first * n + offset)))
        cut2 = min(n, int(np.floor(second * n + offset)))
        split[shuffled[:cut1]] = int(Split.train)
        split[shuffled[cut1:cut2]] = int(Split.validation)
        split[shuffled[cut2:]] = int(Split.test)

    tagged = replace(ds, split=split)
    counts = np.bincount(split, minlength=3)
    logger.info("split %d/%d/%d (seed %d)", counts[0], counts[1], counts[2], seed)
    return tagged


class ProfileBuilder:
    """
    Turns users and lists into padded item-ID matrices.

    Lists keep their earliest M items. Profiles hold up to N of the user's
    train-split lists, the N most recent by file order, never the candidate.
    """

    def __init__(self, ds: InteractionDataset, N: int, M: int):
        if N < 1:
            raise ConfigurationError("must be at least 1", field="N")
        if M < 1:
            raise ConfigurationError("must be at least 1", field="M")
        self.ds = ds
        self.N = N
        self.M = M

        self.list_matrix = np.full((ds.n_lists, M), PAD, dtype=np.int64)
        for lst, items in enumerate(ds.containment):
            head = items[:M]
            self.list_matrix[lst, :head.size] = head
        self.list_mask = self.list_matrix != PAD
        self.positions = np.arange(M, dtype=np.int64)

        self.train_lists = [ds.user_lists(u, (Split.train,)) for u in range(ds.n_users)]

    def profile(self, user: int, exclude: int | None = None) -> np.ndarray:
        """List indices in the user's profile, oldest first, at most N."""
        lists = self.train_lists[user]
        if exclude is not None:
            lists = lists[lists != exclude]
        return lists[-self.N:]

    def profile_slots(self, user: int, exclude: int | None = None) -> np.ndarray:
        """Profile padded to N slots with -1."""
        slots = np.full(self.N, -1, dtype=np.int64)
        chosen = self.profile(user, exclude)
        slots[:chosen.size] = chosen
        return slots

    def list_vector(self, lst: int) -> tuple[np.ndarray, np.ndarray]:
        return self.list_matrix[lst], self.list_mask[lst]

    def profile_matrix(self, slots: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Item IDs (B, N, M), item mask and slot mask for padded profile slots (B, N)."""
        slot_mask = slots >= 0
        items = np.where(slot_mask[..., None], self.list_matrix[np.maximum(slots, 0)], PAD)
        return items, items != PAD, slot_mask

    def user_profiles(self, users) -> np.ndarray:
        """Full (nothing excluded) profile slots for inference."""
        users = np.asarray(users, dtype=np.int64)
        if not users.size:
            return np.zeros((0, self.N), dtype=np.int64)
        return np.stack([self.profile_slots(u) for u in users])

    def _assemble(self, users, lists, labels, slots) -> PaddedProfileBatch:
        profile_items, item_mask, slot_mask = self.profile_matrix(slots)
        return PaddedProfileBatch(
            users=np.asarray(users, dtype=np.int64),
            lists=lists,
            labels=np.asarray(labels, dtype=np.float64),
            profile_items=profile_items,
            profile_slot_mask=slot_mask,
            profile_item_mask=item_mask,
            list_items=self.list_matrix[lists],
            list_item_mask=self.list_mask[lists],
            positions=self.positions,
            profile_lists=slots,
        )

    def batch(self, users, lists, labels=None) -> PaddedProfileBatch:
        """Training / scoring examples; the candidate never appears in its own profile."""
        users = np.asarray(users, dtype=np.int64)
        lists = np.asarray(lists, dtype=np.int64)
        labels = np.zeros(users.size) if labels is None else labels
        if users.size:
            slots = np.stack([self.profile_slots(u, exclude=l) for u, l in zip(users, lists)])
        else:
            slots = np.zeros((0, self.N), dtype=np.int64)
        return self._assemble(users, lists, labels, slots)

    def lists_only(self, lists) -> PaddedProfileBatch:
        """Candidate lists with no user attached (empty profiles, user -1)."""
        lists = np.asarray(lists, dtype=np.int64)
        slots = np.full((lists.size, self.N), -1, dtype=np.int64)
        return self._assemble(np.full(lists.size, -1), lists, np.zeros(lists.size), slots)

    def users_only(self, users) -> PaddedProfileBatch:
        """Full user profiles with no candidate (all-padding list, list -1)."""
        users = np.asarray(users, dtype=np.int64)
        batch = self._assemble(
            users, np.zeros(users.size, dtype=np.int64), np.zeros(users.size),
            self.user_profiles(users),
        )
        batch.lists = np.full(users.size, -1, dtype=np.int64)
        batch.list_items = np.full((users.size, self.M), PAD, dtype=np.int64)
        batch.list_item_mask = batch.list_items != PAD
        return batch


def build_profiles(ds: InteractionDataset, N: int, M: int) -> ProfileBuilder:
    return ProfileBuilder(ds, N, M)


def epoch_seed(seed: int, epoch: int) -> int:
    """Fold a run seed and an epoch number into one sampling seed."""
    return int(np.random.SeedSequence([int(seed), int(epoch)]).generate_state(1)[0])


def sample_negatives(ds: InteractionDataset, user: int, rho: int, epoch_seed: int) -> np.ndarray:
    """
    Draw rho negatives per train positive, uniformly from lists the user never
    touched in any split, capped by how many such lists exist.
    """
    if rho < 1:
        raise ConfigurationError("must be at least 1", field="rho")
    positives = ds.positives(user)
    n_train = ds.user_lists(user, (Split.train,)).size
    available = ds.n_lists - len(positives)
    k = min(rho * n_train, available)
    if k <= 0:
        if available == 0:
            logger.info("user %d has no candidate negatives", user)
        return np.empty(0, dtype=np.int64)

    rng = make_rng(epoch_seed, NEGATIVE_STREAM, user)
    if 2 * k >= available:
        pool = np.setdiff1d(np.arange(ds.n_lists), np.fromiter(positives, dtype=np.int64))
        return np.sort(rng.choice(pool, size=k, replace=False))

    # sparse case: rejection sampling is much cheaper than building the pool
    chosen: set[int] = set()
    while len(chosen) < k:
        for lst in rng.integers(0, ds.n_lists, size=2 * k).tolist():
            if lst not in positives and lst not in chosen:
                chosen.add(lst)
                if len(chosen) == k:
                    break
    return np.sort(np.fromiter(chosen, dtype=np.int64))
