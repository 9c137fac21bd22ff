"""
Training loop: negative sampling per epoch, minibatch Adam, validation after
every epoch, early stopping and checkpoints.

The loop itself is model-agnostic. A learner supplies batches, a loss and a
scorer; AttListLearner lives here and the factor baselines bring their own.
"""
import logging
import math
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from attlist.config import TrainConfig
from attlist.errors import ConfigurationError, DivergenceError, LabelValidationError
from attlist.logging import RecordWriter
from attlist.models import InteractionDataset, Split
from attlist.services.dataio import ProfileBuilder, epoch_seed, sample_negatives
from attlist.services.evaluation import evaluate
from attlist.services.network import AttListScorer, ParameterSet, forward
from attlist.services.tensor import (
    AdamState,
    ComputeTape,
    Tensor,
    add,
    adam_step,
    binary_cross_entropy,
    make_rng,
    multiply,
    reduce_sum,
    scale,
)

logger = logging.getLogger(__name__)

SHUFFLE_STREAM = 41
PREFETCH_THREAD = "batch-prefetch"

# weight matrices of the vanilla attention layers, the only ones regularized
REGULARIZED = ("W_I", "W_L")


def bce_loss(predictions: Tensor, labels) -> Tensor:
    """Summed binary cross-entropy over the batch."""
    labels = np.asarray(labels, dtype=np.float64)
    if not np.isin(labels, (0.0, 1.0)).all():
        raise LabelValidationError(f"labels must be 0 or 1, got {sorted(set(labels.tolist()))}")
    return binary_cross_entropy(predictions, labels)


def l2_penalty(params, lam: float) -> Tensor:
    """lam * (||W_I||^2 + ||W_L||^2)."""
    if lam < 0:
        raise ConfigurationError("must be non-negative", field="lambda")
    total = Tensor(np.zeros(()))
    for name in REGULARIZED:
        if name in params:
            W = params[name]
            total = add(total, reduce_sum(multiply(W, W)))
    return scale(total, lam)


def clip_gradients(params, threshold: float) -> float:
    """Rescale all gradients together so their global norm is at most threshold."""
    norm = math.sqrt(sum(float((p.grad ** 2).sum()) for p in params.values() if p.grad is not None))
    if norm > threshold:
        for p in params.values():
            if p.grad is not None:
                p.grad *= threshold / norm
    return norm


def epoch_examples(ds: InteractionDataset, rho: int, seed: int, epoch: int):
    """
    Train positives plus freshly drawn negatives, shuffled.
    Returns parallel (users, lists, labels) arrays.
    """
    pos_users, pos_lists = ds.interactions(Split.train)
    es = epoch_seed(seed, epoch)
    neg_users, neg_lists = [], []
    for user in np.unique(pos_users).tolist():
        negatives = sample_negatives(ds, user, rho, es)
        neg_users.append(np.full(negatives.size, user, dtype=np.int64))
        neg_lists.append(negatives)
    users = np.concatenate([pos_users, *neg_users])
    lists = np.concatenate([pos_lists, *neg_lists])
    labels = np.concatenate([np.ones(pos_users.size), np.zeros(users.size - pos_users.size)])
    order = make_rng(seed, SHUFFLE_STREAM, epoch).permutation(users.size)
    return users[order], lists[order], labels[order]


class EarlyStopping:
    """Tracks the best validation metric and how long since it improved."""

    def __init__(self, patience: int, best: float | None = None, best_epoch: int = 0,
                 bad_epochs: int = 0):
        self.patience = patience
        self.best = best
        self.best_epoch = best_epoch
        self.bad_epochs = bad_epochs

    def update(self, epoch: int, metric: float) -> bool:
        """Record an epoch's metric. True when it is a new best."""
        if self.best is None or metric > self.best:
            self.best = metric
            self.best_epoch = epoch
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


@dataclass
class Checkpoint:
    """Everything needed to resume a run or score with its model."""
    model_kind: str
    params: dict[str, np.ndarray]
    adam: AdamState
    epoch: int
    config: TrainConfig
    config_hash: str = ""
    best_metric: float | None = None
    best_epoch: int = 0
    bad_epochs: int = 0


@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    log: list[dict] = field(default_factory=list)
    stopped_early: bool = False


class BatchPrefetcher:
    """
    Builds batches on a producer thread and hands them over through a bounded
    queue. Batches depend only on (seed, epoch), so timing can't change them.
    """
    _DONE = object()

    def __init__(self, make_batches, depth: int):
        self.make_batches = make_batches
        self.depth = depth

    def __iter__(self):
        if self.depth <= 0:
            yield from self.make_batches()
            return
        handoff = queue.Queue(maxsize=self.depth)
        stop = threading.Event()

        def offer(item) -> bool:
            # gives up once the consumer has gone away
            while not stop.is_set():
                try:
                    handoff.put(item, timeout=0.1)
                    return True
                except queue.Full:
                    continue
            return False

        def produce():
            try:
                for batch in self.make_batches():
                    if not offer(batch):
                        return
                offer(self._DONE)
            except BaseException as e:  # hand the failure to the consumer
                offer(e)

        worker = threading.Thread(target=produce, name=PREFETCH_THREAD, daemon=True)
        worker.start()
        try:
            while True:
                item = handoff.get()
                if item is self._DONE:
                    break
                if isinstance(item, BaseException):
                    raise item
                yield item
        finally:
            stop.set()
            worker.join(timeout=1.0)


class AttListLearner:
    """Plugs the AttList network into the generic loop."""
    kind = "attlist"

    def __init__(self, ds: InteractionDataset, config: TrainConfig, params=None):
        self.ds = ds
        self.config = config
        self.builder = ProfileBuilder(ds, config.N, config.M)
        if params is None:
            self.params = ParameterSet.initialize(ds.n_users, ds.n_lists, ds.n_items, config)
        else:
            self.params = ParameterSet.from_arrays(params)
            self.params.check_shapes(ds.n_users, ds.n_lists, ds.n_items, config)

    def batches(self, epoch: int):
        users, lists, labels = epoch_examples(self.ds, self.config.rho, self.config.seed, epoch)
        size = self.config.batch_size
        for start in range(0, users.size, size):
            end = start + size
            yield self.builder.batch(users[start:end], lists[start:end], labels[start:end])

    def loss(self, batch, epoch: int, index: int) -> tuple[Tensor, Tensor, int]:
        trace = forward(batch, self.params, self.config, training=True,
                        seed=(self.config.seed, epoch, index))
        data_loss = bce_loss(trace.prediction, batch.labels)
        return add(data_loss, l2_penalty(self.params, self.config.lam)), data_loss, len(batch)

    def after_backward(self):
        self.params.freeze_padding()

    def scorer(self):
        return AttListScorer(self.params, self.config, self.builder)


def _snapshot(learner, state: AdamState, epoch: int, stopper: EarlyStopping, config, config_hash):
    return Checkpoint(
        model_kind=learner.kind,
        params=learner.params.arrays(),
        adam=AdamState(
            lr=state.lr, beta1=state.beta1, beta2=state.beta2, epsilon=state.epsilon,
            step=state.step,
            m={k: v.copy() for k, v in state.m.items()},
            v={k: v.copy() for k, v in state.v.items()},
        ),
        epoch=epoch,
        config=config,
        config_hash=config_hash,
        best_metric=stopper.best,
        best_epoch=stopper.best_epoch,
        bad_epochs=stopper.bad_epochs,
    )


def fit(
    learner,
    ds: InteractionDataset,
    config: TrainConfig,
    out_dir: str | None = None,
    resume: Checkpoint | None = None,
    threads: int = 1,
    config_hash: str = "",
) -> TrainResult:
    """
    Run epochs until max_epochs or until validation NDCG@10 hasn't improved
    for `patience` epochs. Without a validation split every epoch counts as
    an improvement and the last epoch is kept.
    """
    # local import keeps storage (which knows Checkpoint) out of the import cycle
    from attlist.storage import load_checkpoint, save_checkpoint

    if resume is not None:
        state = resume.adam
        start = resume.epoch + 1
        stopper = EarlyStopping(config.patience, resume.best_metric, resume.best_epoch,
                                resume.bad_epochs)
    else:
        state = AdamState(lr=config.lr)
        start = 1
        stopper = EarlyStopping(config.patience)
    state.lr = config.lr

    has_validation = bool(np.any(ds.split == int(Split.validation)))
    writer = None
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        writer = RecordWriter(Path(out_dir) / "train_log.jsonl", append=resume is not None)

    log: list[dict] = []
    if resume is None:
        best = last = _snapshot(learner, state, 0, stopper, config, config_hash)
    else:
        best = last = resume
        stored_best = None if out_dir is None else Path(out_dir) / "best.npz"
        if stored_best is not None and stored_best.exists():
            best = load_checkpoint(stored_best)
    stopped_early = False
    try:
        for epoch in range(start, config.max_epochs + 1):
            began = time.perf_counter()
            total, count = 0.0, 0
            batches = BatchPrefetcher(lambda e=epoch: learner.batches(e), config.prefetch)
            for index, batch in enumerate(batches):
                learner.params.zero_grad()
                with ComputeTape() as tape:
                    loss, data_loss, n = learner.loss(batch, epoch, index)
                    value = loss.item()
                    if not math.isfinite(value):
                        raise DivergenceError(epoch, index, value)
                    tape.backward(loss)
                learner.after_backward()
                if config.clip_grad:
                    clip_gradients(learner.params, config.clip_threshold)
                adam_step(learner.params, state)
                total += data_loss.item()
                count += n

            record = {
                "epoch": epoch,
                "train_loss": total / max(count, 1),
                "val_ndcg10": None,
                "val_p10": None,
            }
            if has_validation:
                report = evaluate(learner.scorer(), ds, Split.validation, cutoffs=(10,),
                                  threads=threads)
                record["val_ndcg10"] = report.metrics["N@10"]
                record["val_p10"] = report.metrics["P@10"]
                improved = stopper.update(epoch, report.metrics["N@10"])
            else:
                improved = True
                stopper.best_epoch = epoch
            record["elapsed"] = time.perf_counter() - began
            log.append(record)
            logger.info(
                "epoch %d: loss %.5f, val N@10 %s", epoch, record["train_loss"],
                "n/a" if record["val_ndcg10"] is None else f"{record['val_ndcg10']:.3f}",
            )

            last = _snapshot(learner, state, epoch, stopper, config, config_hash)
            if improved:
                best = last
            if writer is not None:
                writer.write(record)
                save_checkpoint(last, Path(out_dir) / "last.npz")
                if improved:
                    save_checkpoint(best, Path(out_dir) / "best.npz")
            if has_validation and stopper.should_stop:
                logger.info("early stop after epoch %d (best epoch %d)", epoch, stopper.best_epoch)
                stopped_early = True
                break
    finally:
        if writer is not None:
            writer.close()

    return TrainResult(best=best, last=last, log=log, stopped_early=stopped_early)


def train(
    ds: InteractionDataset,
    config: TrainConfig,
    out_dir: str | None = None,
    resume: Checkpoint | None = None,
    threads: int = 1,
    config_hash: str = "",
) -> TrainResult:
    """Train AttList on a split dataset."""
    learner = AttListLearner(ds, config, params=None if resume is None else resume.params)
    return fit(learner, ds, config, out_dir, resume, threads, config_hash)
