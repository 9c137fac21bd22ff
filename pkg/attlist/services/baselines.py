"""
Reference rankers: ItemPop, matrix factorization with sampled squared error,
and BPR. MF and BPR train through the same loop as AttList.
"""
import logging
from dataclasses import dataclass

import numpy as np

from attlist.config import TrainConfig
from attlist.models import InteractionDataset, Split
from attlist.services.dataio import epoch_seed, sample_negatives
from attlist.services.network import ParameterSet
from attlist.services.tensor import (
    Tensor,
    add,
    gather,
    log_sigmoid,
    make_rng,
    multiply,
    reduce_sum,
    reshape,
    scale,
)
from attlist.services.training import (
    SHUFFLE_STREAM,
    Checkpoint,
    TrainResult,
    epoch_examples,
    fit,
)

logger = logging.getLogger(__name__)

FACTOR_STREAM = 51
FACTOR_KINDS = ("mf", "bpr")

# factors start small so early scores sit near zero
FACTOR_STD = 0.01


@dataclass
class PopularityTable:
    """Train-split interaction count per list."""
    counts: np.ndarray

    @classmethod
    def from_dataset(cls, ds: InteractionDataset) -> "PopularityTable":
        _, lists = ds.interactions(Split.train)
        return cls(np.bincount(lists, minlength=ds.n_lists).astype(np.int64))


class ItemPopScorer:
    """Same score for every user: how often the list was interacted with."""
    name = "itempop"

    def __init__(self, table: PopularityTable):
        self.table = table
        self._scores = table.counts.astype(np.float64)

    def score_user(self, user: int) -> np.ndarray:
        return self._scores.copy()


def itempop_rank(ds: InteractionDataset) -> ItemPopScorer:
    return ItemPopScorer(PopularityTable.from_dataset(ds))


@dataclass
class FactorModel:
    """
    User and list factors, plus a per-list bias for MF.
    Scores are x_ul = p_u . q_l (+ b_l).
    """
    kind: str
    params: ParameterSet

    @classmethod
    def initialize(cls, kind: str, n_users: int, n_lists: int, d: int, seed: int) -> "FactorModel":
        rng = make_rng(seed, FACTOR_STREAM)
        arrays = {
            "user_factors": rng.normal(0.0, FACTOR_STD, size=(n_users, d)),
            "list_factors": rng.normal(0.0, FACTOR_STD, size=(n_lists, d)),
        }
        if kind == "mf":
            arrays["list_bias"] = np.zeros((n_lists, 1))
        return cls(kind, ParameterSet.from_arrays(arrays))

    def score(self, users, lists) -> Tensor:
        p = gather(self.params["user_factors"], users)
        q = gather(self.params["list_factors"], lists)
        x = reduce_sum(multiply(p, q), axis=-1)
        if "list_bias" in self.params:
            bias = gather(self.params["list_bias"], lists)
            x = add(x, reshape(bias, (bias.shape[0],)))
        return x


class FactorScorer:
    def __init__(self, model: FactorModel):
        self.name = model.kind
        self.P = model.params["user_factors"].values
        self.Q = model.params["list_factors"].values
        self.bias = None
        if "list_bias" in model.params:
            self.bias = model.params["list_bias"].values[:, 0]

    def score_user(self, user: int) -> np.ndarray:
        scores = self.Q @ self.P[user]
        return scores if self.bias is None else scores + self.bias


def bpr_triple_loss(pos: Tensor, neg: Tensor) -> Tensor:
    """Sum over triples of -log sigmoid(x+ - x-)."""
    return scale(reduce_sum(log_sigmoid(add(pos, scale(neg, -1.0)))), -1.0)


def bpr_triples(ds: InteractionDataset, seed: int, epoch: int):
    """
    One (user, positive, negative) triple per train positive, while the user
    still has unseen lists to pair with. Shuffled under (seed, epoch).
    """
    es = epoch_seed(seed, epoch)
    users, pos, neg = [], [], []
    for user in range(ds.n_users):
        positives = ds.user_lists(user, (Split.train,))
        if positives.size == 0:
            continue
        negatives = sample_negatives(ds, user, 1, es)
        if negatives.size == 0:
            continue
        # negatives come back sorted; shuffle both sides before pairing
        rng = make_rng(es, FACTOR_STREAM, user)
        negatives = rng.permutation(negatives)
        k = negatives.size
        users.append(np.full(k, user, dtype=np.int64))
        pos.append(rng.permutation(positives)[:k])
        neg.append(negatives)
    if not users:
        return (np.empty(0, dtype=np.int64),) * 3
    users, pos, neg = np.concatenate(users), np.concatenate(pos), np.concatenate(neg)
    order = make_rng(seed, SHUFFLE_STREAM, epoch).permutation(users.size)
    return users[order], pos[order], neg[order]


class FactorLearner:
    """MF or BPR plugged into the generic training loop."""

    def __init__(self, kind: str, ds: InteractionDataset, config: TrainConfig, params=None):
        self.kind = kind
        self.ds = ds
        self.config = config
        if params is None:
            self.model = FactorModel.initialize(kind, ds.n_users, ds.n_lists, config.d, config.seed)
        else:
            self.model = FactorModel(kind, ParameterSet.from_arrays(params))

    @property
    def params(self) -> ParameterSet:
        return self.model.params

    def batches(self, epoch: int):
        size = self.config.batch_size
        if self.kind == "mf":
            columns = epoch_examples(self.ds, self.config.rho, self.config.seed, epoch)
        else:
            columns = bpr_triples(self.ds, self.config.seed, epoch)
        n = columns[0].size
        for start in range(0, n, size):
            yield tuple(c[start:start + size] for c in columns)

    def loss(self, batch, epoch: int, index: int):
        if self.kind == "mf":
            users, lists, labels = batch
            diff = add(self.model.score(users, lists), Tensor(-labels))
            data_loss = reduce_sum(multiply(diff, diff))
            return data_loss, data_loss, users.size

        users, pos, neg = batch
        data_loss = bpr_triple_loss(self.model.score(users, pos), self.model.score(users, neg))
        reg = Tensor(np.zeros(()))
        for table, ids in (("user_factors", users), ("list_factors", pos), ("list_factors", neg)):
            rows = gather(self.params[table], ids)
            reg = add(reg, reduce_sum(multiply(rows, rows)))
        return add(data_loss, scale(reg, self.config.lam)), data_loss, users.size

    def after_backward(self):
        pass

    def scorer(self) -> FactorScorer:
        return FactorScorer(self.model)


def _train_factor(kind, ds, config, out_dir, resume, threads, config_hash) -> TrainResult:
    learner = FactorLearner(kind, ds, config, params=None if resume is None else resume.params)
    return fit(learner, ds, config, out_dir, resume, threads, config_hash)


def mf_train(
    ds: InteractionDataset,
    config: TrainConfig,
    out_dir: str | None = None,
    resume: Checkpoint | None = None,
    threads: int = 1,
    config_hash: str = "",
) -> TrainResult:
    """Squared error against 1 for positives and 0 for rho sampled negatives each."""
    return _train_factor("mf", ds, config, out_dir, resume, threads, config_hash)


def bpr_train(
    ds: InteractionDataset,
    config: TrainConfig,
    out_dir: str | None = None,
    resume: Checkpoint | None = None,
    threads: int = 1,
    config_hash: str = "",
) -> TrainResult:
    """Pairwise -log sigmoid(x+ - x-) with L2 on the factors touched by each triple."""
    return _train_factor("bpr", ds, config, out_dir, resume, threads, config_hash)


def factor_model(checkpoint: Checkpoint) -> FactorModel:
    return FactorModel(checkpoint.model_kind, ParameterSet.from_arrays(checkpoint.params))
