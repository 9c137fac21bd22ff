"""
On-disk formats: raw input files, prepared datasets with their manifest, and
checkpoints.

A prepared dataset directory holds dense-index TSVs plus manifest.json. The
manifest hash is what ties checkpoints and reports to the exact data they
came from.
"""
import hashlib
import json
import logging
import os
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict

from attlist.config import TrainConfig
from attlist.errors import CheckpointMismatchError, StorageError
from attlist.models import InteractionDataset, Split
from attlist.services.dataio import PROFILE_SELECTION
from attlist.services.tensor import AdamState
from attlist.services.training import Checkpoint

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
CHECKPOINT_VERSION = 1

INTERACTIONS_FILE = "interactions.tsv"
CONTAINMENT_FILE = "containment.tsv"
TOPICS_FILE = "topics.tsv"
MANIFEST_FILE = "manifest.json"


class DatasetManifest(BaseModel):
    """Index maps and the settings a prepared dataset was built with."""
    model_config = ConfigDict(extra="forbid")

    version: int = MANIFEST_VERSION
    user_ids: list[str]
    list_ids: list[str]
    item_ids: list[str]
    split_seed: int
    fractions: tuple[float, float, float]
    N: int
    M: int
    min_item_frequency: int
    min_user_interactions: int
    profile_selection: str = PROFILE_SELECTION
    counts: dict[str, int]
    has_topics: bool = False
    data_sha256: str = ""

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True)

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()[:16]


def dataset_counts(ds: InteractionDataset) -> dict[str, int]:
    per_split = np.bincount(ds.split, minlength=3)
    return {
        "users": ds.n_users,
        "lists": ds.n_lists,
        "items": ds.n_items,
        "unique_items": ds.unique_items,
        "interactions": ds.n_interactions,
        "train": int(per_split[Split.train]),
        "validation": int(per_split[Split.validation]),
        "test": int(per_split[Split.test]),
    }


def write_text(path: Path, text: str):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as e:
        raise StorageError(f"can't write {path}: {e.strerror}") from e


def _save_ints(path: Path, rows: np.ndarray):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savetxt(path, rows, fmt="%d", delimiter="\t")
    except OSError as e:
        raise StorageError(f"can't write {path}: {e.strerror}") from e


def _load_ints(path: Path, columns: int) -> np.ndarray:
    try:
        if path.stat().st_size == 0:
            return np.empty((0, columns), dtype=np.int64)
        return np.loadtxt(path, dtype=np.int64, delimiter="\t", ndmin=2)
    except OSError as e:
        raise StorageError(f"can't read {path}: {e.strerror}") from e


def _containment_rows(ds: InteractionDataset) -> np.ndarray:
    rows = [
        (lst, int(item), pos)
        for lst, items in enumerate(ds.containment)
        for pos, item in enumerate(items.tolist())
    ]
    return np.array(rows, dtype=np.int64).reshape(-1, 3)


def write_topics(path: Path, ds: InteractionDataset):
    lines = [f"list\t{ds.list_ids[lst]}\t{t}" for lst, t in enumerate(ds.list_topics.tolist())]
    lines += [f"item\t{ds.item_id(i)}\t{t}" for i, t in enumerate(ds.item_topics.tolist()) if i]
    write_text(path, "\n".join(lines) + "\n")


def read_topics(path: Path, ds: InteractionDataset) -> InteractionDataset:
    """Attach planted topics from a topics file; IDs absent from ds are skipped."""
    list_index = {lst: i for i, lst in enumerate(ds.list_ids)}
    item_index = {item: i + 1 for i, item in enumerate(ds.item_ids)}
    list_topics = np.full(ds.n_lists, -1, dtype=np.int64)
    item_topics = np.full(ds.n_items + 1, -1, dtype=np.int64)
    try:
        with open(path, encoding="utf-8") as f:
            for line in f:
                if not line.strip():
                    continue
                kind, entity, topic = line.rstrip("\n").split("\t")
                if kind == "list" and entity in list_index:
                    list_topics[list_index[entity]] = int(topic)
                elif kind == "item" and entity in item_index:
                    item_topics[item_index[entity]] = int(topic)
    except OSError as e:
        raise StorageError(f"can't read {path}: {e.strerror}") from e
    ds.list_topics = list_topics
    ds.item_topics = item_topics
    return ds


def write_raw(ds: InteractionDataset, out_dir: str) -> dict[str, Path]:
    """
    Write a dataset in the raw input format (string IDs, file order kept), as
    `prepare` expects it. Topics are written too when the dataset has them.
    """
    out = Path(out_dir)
    order = np.argsort(ds.order, kind="stable")
    interactions = "".join(
        f"{ds.user_ids[u]}\t{ds.list_ids[lst]}\n"
        for u, lst in zip(ds.users[order].tolist(), ds.lists[order].tolist())
    )
    containment = "".join(
        f"{ds.list_ids[lst]}\t{ds.item_id(item)}\t{pos}\n"
        for lst, items in enumerate(ds.containment)
        for pos, item in enumerate(items.tolist())
    )
    paths = {"interactions": out / INTERACTIONS_FILE, "containment": out / CONTAINMENT_FILE}
    write_text(paths["interactions"], interactions)
    write_text(paths["containment"], containment)
    if ds.list_topics is not None:
        paths["topics"] = out / TOPICS_FILE
        write_topics(paths["topics"], ds)
    return paths


def save_prepared(
    ds: InteractionDataset,
    out_dir: str,
    split_seed: int,
    fractions: tuple[float, float, float],
    N: int,
    M: int,
    min_item_frequency: int,
    min_user_interactions: int,
) -> DatasetManifest:
    """Persist a split dataset with dense indices and write its manifest."""
    out = Path(out_dir)
    interactions = np.stack([ds.users, ds.lists, ds.order, ds.split.astype(np.int64)], axis=1)
    _save_ints(out / INTERACTIONS_FILE, interactions)
    _save_ints(out / CONTAINMENT_FILE, _containment_rows(ds))
    if ds.list_topics is not None:
        write_topics(out / TOPICS_FILE, ds)

    digest = hashlib.sha256()
    for name in (INTERACTIONS_FILE, CONTAINMENT_FILE):
        digest.update((out / name).read_bytes())

    manifest = DatasetManifest(
        user_ids=ds.user_ids,
        list_ids=ds.list_ids,
        item_ids=ds.item_ids,
        split_seed=split_seed,
        fractions=fractions,
        N=N,
        M=M,
        min_item_frequency=min_item_frequency,
        min_user_interactions=min_user_interactions,
        counts=dataset_counts(ds),
        has_topics=ds.list_topics is not None,
        data_sha256=digest.hexdigest(),
    )
    write_text(out / MANIFEST_FILE, manifest.canonical_json() + "\n")
    logger.info("prepared dataset written to %s (manifest %s)", out, manifest.hash)
    return manifest


def load_manifest(data_dir: str) -> DatasetManifest:
    path = Path(data_dir) / MANIFEST_FILE
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise StorageError(f"can't read {path}: {e.strerror}") from e
    except json.JSONDecodeError as e:
        raise StorageError(f"{path} is not valid JSON: {e}") from e
    return DatasetManifest.model_validate(data)


def load_prepared(data_dir: str) -> tuple[InteractionDataset, DatasetManifest]:
    """Read back what save_prepared wrote."""
    manifest = load_manifest(data_dir)
    out = Path(data_dir)
    interactions = _load_ints(out / INTERACTIONS_FILE, 4)
    containment_rows = _load_ints(out / CONTAINMENT_FILE, 3)

    n_lists = len(manifest.list_ids)
    containment = [np.empty(0, dtype=np.int64) for _ in range(n_lists)]
    if containment_rows.size:
        for lst in np.unique(containment_rows[:, 0]).tolist():
            rows = containment_rows[containment_rows[:, 0] == lst]
            containment[lst] = rows[np.argsort(rows[:, 2]), 1]

    ds = InteractionDataset(
        n_users=len(manifest.user_ids),
        n_lists=n_lists,
        n_items=len(manifest.item_ids),
        containment=containment,
        users=interactions[:, 0].copy(),
        lists=interactions[:, 1].copy(),
        order=interactions[:, 2].copy(),
        split=interactions[:, 3].astype(np.int8),
        user_ids=manifest.user_ids,
        list_ids=manifest.list_ids,
        item_ids=manifest.item_ids,
    )
    if manifest.has_topics:
        read_topics(out / TOPICS_FILE, ds)
    return ds, manifest


def save_checkpoint(checkpoint: Checkpoint, path) -> Path:
    """Write parameters, optimizer state and metadata into one .npz file."""
    path = Path(path)
    meta = {
        "version": CHECKPOINT_VERSION,
        "model_kind": checkpoint.model_kind,
        "epoch": checkpoint.epoch,
        "config": checkpoint.config.model_dump(mode="json", by_alias=True),
        "config_hash": checkpoint.config_hash,
        "best_metric": checkpoint.best_metric,
        "best_epoch": checkpoint.best_epoch,
        "bad_epochs": checkpoint.bad_epochs,
        "adam": {
            "lr": checkpoint.adam.lr,
            "beta1": checkpoint.adam.beta1,
            "beta2": checkpoint.adam.beta2,
            "epsilon": checkpoint.adam.epsilon,
            "step": checkpoint.adam.step,
        },
    }
    arrays = {"meta": np.array(json.dumps(meta, sort_keys=True))}
    arrays.update({f"param.{k}": v for k, v in checkpoint.params.items()})
    arrays.update({f"adam_m.{k}": v for k, v in checkpoint.adam.m.items()})
    arrays.update({f"adam_v.{k}": v for k, v in checkpoint.adam.v.items()})

    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, "wb") as f:
            np.savez(f, **arrays)
        os.replace(tmp, path)
    except OSError as e:
        raise StorageError(f"can't write checkpoint {path}: {e.strerror}") from e
    logger.debug("checkpoint written to %s (epoch %d)", path, checkpoint.epoch)
    return path


def load_checkpoint(path, expected_hash: str | None = None, force: bool = False) -> Checkpoint:
    """
    Load a checkpoint. When expected_hash is given and differs from the stored
    config hash, refuse unless force is set.
    """
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["meta"]))
            params, m, v = {}, {}, {}
            for key in data.files:
                group, _, name = key.partition(".")
                target = {"param": params, "adam_m": m, "adam_v": v}.get(group)
                if target is not None:
                    target[name] = data[key].copy()
    except (OSError, ValueError, KeyError) as e:
        raise StorageError(f"can't read checkpoint {path}: {e}") from e

    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointMismatchError(
            f"{path}: checkpoint version {meta.get('version')}, expected {CHECKPOINT_VERSION}"
        )

    checkpoint = Checkpoint(
        model_kind=meta["model_kind"],
        params=params,
        adam=AdamState(m=m, v=v, **meta["adam"]),
        epoch=meta["epoch"],
        config=TrainConfig.model_validate(meta["config"]),
        config_hash=meta["config_hash"],
        best_metric=meta["best_metric"],
        best_epoch=meta["best_epoch"],
        bad_epochs=meta["bad_epochs"],
    )
    if expected_hash is not None:
        check_checkpoint(checkpoint, expected_hash, force, source=str(path))
    return checkpoint


def check_checkpoint(checkpoint: Checkpoint, expected_hash: str, force: bool = False,
                     source: str = "checkpoint"):
    """Refuse a checkpoint built for other data or another model shape, unless forced."""
    if checkpoint.config_hash == expected_hash:
        return
    message = f"{source}: config hash {checkpoint.config_hash} does not match {expected_hash}"
    if not force:
        raise CheckpointMismatchError(message)
    logger.warning("%s (loading anyway)", message)
