import logging
from pathlib import Path

from attlist.commands.common import (
    add_common_flags,
    build_run_config,
    require,
    write_effective_config,
)
from attlist.services.dataio import load_dataset, split_dataset
from attlist.storage import TOPICS_FILE, read_topics, save_prepared

logger = logging.getLogger(__name__)

SPLIT_FRACTIONS = (0.8, 0.1, 0.1)


def register(subparsers):
    parser = subparsers.add_parser(
        "prepare", help="load raw files, filter, split and write a prepared dataset",
        allow_abbrev=False,
    )
    add_common_flags(parser)
    parser.add_argument("--interactions", help="TSV of user_id, list_id")
    parser.add_argument("--containment", help="TSV of list_id, item_id, position")
    parser.add_argument("--seed", dest="train_seed", type=int, help="split seed (default: 0)")
    parser.add_argument("--N", dest="train_N", type=int, help="profile size (default: 15)")
    parser.add_argument("--M", dest="train_M", type=int, help="list length (default: 32)")
    parser.add_argument(
        "--min-item-frequency", type=int,
        help="drop items in fewer lists than this (default: 5)",
    )
    parser.add_argument(
        "--min-user-interactions", type=int,
        help="drop users with fewer interactions (default: 0, keep all)",
    )
    parser.set_defaults(run=run)


def summary_lines(counts: dict[str, int], density: float) -> list[str]:
    return [
        f"{'users':<14}{counts['users']:>12,}",
        f"{'lists':<14}{counts['lists']:>12,}",
        f"{'interactions':<14}{counts['interactions']:>12,}",
        f"{'density':<14}{100 * density:>11.4f}%",
        f"{'unique items':<14}{counts['unique_items']:>12,}",
    ]


def run(args) -> int:
    config = build_run_config(args, "prepare")
    interactions = require(config.interactions, "interactions")
    containment = require(config.containment, "containment")

    ds = load_dataset(
        interactions, containment,
        min_item_frequency=config.min_item_frequency,
        min_user_interactions=config.min_user_interactions,
    )
    topics = Path(interactions).parent / TOPICS_FILE
    if topics.exists():
        read_topics(topics, ds)
    ds = split_dataset(ds, SPLIT_FRACTIONS, seed=config.train.seed)

    manifest = save_prepared(
        ds, config.out,
        split_seed=config.train.seed,
        fractions=SPLIT_FRACTIONS,
        N=config.train.N,
        M=config.train.M,
        min_item_frequency=config.min_item_frequency,
        min_user_interactions=config.min_user_interactions,
    )
    write_effective_config(config.model_copy(update={"data": config.out}))
    for line in summary_lines(manifest.counts, ds.density):
        print(line)
    print(f"manifest {manifest.hash}")
    return 0
