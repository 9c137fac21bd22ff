import logging
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Protocol

import numpy as np

from attlist.errors import ConfigurationError
from attlist.models import InteractionDataset, MetricsReport, RankedCandidates, Split

logger = logging.getLogger(__name__)

CANDIDATE_POLICIES = ("all", "exclude-seen")


class Scorer(Protocol):
    """Anything that can score every list for one user."""
    name: str

    def score_user(self, user: int) -> np.ndarray: ...


def seen_splits(split: Split) -> tuple[Split, ...]:
    """Splits whose positives are hidden from the candidates when ranking `split`."""
    return tuple(s for s in Split if s < split)


def rank_for_user(
    user: int,
    scorer: Scorer,
    ds: InteractionDataset,
    policy: str = "exclude-seen",
    split: Split = Split.test,
) -> RankedCandidates:
    """
    Score every candidate list and sort best first.
    Ties go to the lower list index, so the order is fully deterministic.
    """
    if policy not in CANDIDATE_POLICIES:
        raise ConfigurationError(f"unknown candidate policy '{policy}'", field="policy")
    scores = np.asarray(scorer.score_user(user), dtype=np.float64)
    candidates = np.arange(ds.n_lists)
    if policy == "exclude-seen":
        seen = ds.user_lists(user, seen_splits(split))
        candidates = np.setdiff1d(candidates, seen)
    cand_scores = scores[candidates]
    order = np.lexsort((candidates, -cand_scores))
    return RankedCandidates(
        user=user,
        lists=candidates[order],
        scores=cand_scores[order],
        truth=set(ds.user_lists(user, (split,)).tolist()),
    )


def _check_cutoff(k: int):
    if k < 1:
        raise ConfigurationError(f"cutoff must be at least 1, got {k}", field="k")


def ndcg_at_k(ranked, truth: set, k: int) -> float:
    """Binary-relevance NDCG with a log2(i + 1) discount; 0 when there is no truth."""
    _check_cutoff(k)
    if not truth:
        return 0.0
    top = list(ranked[:k])
    dcg = sum(1.0 / math.log2(i + 2) for i, lst in enumerate(top) if lst in truth)
    idcg = sum(1.0 / math.log2(i + 2) for i in range(min(len(truth), k)))
    return dcg / idcg


def precision_recall_at_k(ranked, truth: set, k: int) -> tuple[float, float]:
    _check_cutoff(k)
    hits = sum(1 for lst in list(ranked[:k]) if lst in truth)
    recall = hits / len(truth) if truth else 0.0
    return hits / k, recall


def user_metrics(ranked: RankedCandidates, cutoffs=(5, 10)) -> dict[str, float]:
    row = {}
    for k in cutoffs:
        p, r = precision_recall_at_k(ranked.lists, ranked.truth, k)
        row[f"P@{k}"] = p
        row[f"R@{k}"] = r
        row[f"N@{k}"] = ndcg_at_k(ranked.lists, ranked.truth, k)
    return row


def evaluate(
    scorer: Scorer,
    ds: InteractionDataset,
    split: Split = Split.test,
    cutoffs=(5, 10),
    policy: str = "exclude-seen",
    threads: int = 1,
    config_hash: str = "",
) -> MetricsReport:
    """
    Mean metrics over every user, in percent. Users with nothing in the split
    still count, and score 0.
    """
    if not np.any(ds.split == int(split)):
        raise ConfigurationError(f"the {split.name} split has no interactions", field="split")

    def run(users):
        return [user_metrics(rank_for_user(u, scorer, ds, policy, split), cutoffs) for u in users]

    chunks = np.array_split(np.arange(ds.n_users), max(1, min(threads, ds.n_users)))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(chunk) for chunk in chunks]

    # fold in user order so the result doesn't depend on thread timing
    rows = [row for part in parts for row in part]
    metrics = {
        key: 100.0 * float(np.mean([row[key] for row in rows]))
        for key in rows[0]
    }
    report = MetricsReport(
        model=scorer.name,
        split=split.name,
        metrics=metrics,
        user_count=len(rows),
        config_hash=config_hash,
    )
    logger.info(
        "%s on %s: N@10 %.3f P@10 %.3f R@10 %.3f",
        scorer.name, split.name,
        metrics.get("N@10", 0.0), metrics.get("P@10", 0.0), metrics.get("R@10", 0.0),
    )
    return report
