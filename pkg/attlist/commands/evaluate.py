import logging
from pathlib import Path

from attlist.commands.common import (
    add_common_flags,
    add_data_flag,
    add_exclude_seen_flag,
    build_run_config,
    load_for,
    make_scorer,
    require,
    write_effective_config,
)
from attlist.config import config_hash
from attlist.logging import RecordWriter
from attlist.models import Split, format_table
from attlist.services.evaluation import evaluate
from attlist.storage import load_prepared, write_text

logger = logging.getLogger(__name__)

EVALUABLE = ("attlist", "itempop", "mf", "bpr")


def register(subparsers):
    parser = subparsers.add_parser(
        "evaluate", help="rank every candidate list and report P/R/NDCG at 5 and 10",
        allow_abbrev=False,
    )
    add_common_flags(parser)
    add_data_flag(parser)
    add_exclude_seen_flag(parser)
    parser.add_argument("--model", choices=EVALUABLE, help="model to score with (default: attlist)")
    parser.add_argument("--checkpoint", help="trained checkpoint (not needed for itempop)")
    parser.add_argument(
        "--split", choices=("validation", "test"), help="split to rank against (default: test)"
    )
    parser.add_argument(
        "--force", action="store_true",
        help="load the checkpoint even if its config hash doesn't match",
    )
    parser.set_defaults(run=run)


def run(args) -> int:
    config = build_run_config(args, "evaluate")
    ds, manifest = load_prepared(require(config.data, "data"))

    if config.model == "itempop":
        scorer = make_scorer("itempop", ds)
        fingerprint = config_hash(config.train, "itempop", manifest.hash)
    else:
        checkpoint = load_for(
            require(config.checkpoint, "checkpoint"), config.model, manifest.hash, args.force
        )
        scorer = make_scorer(config.model, ds, checkpoint)
        fingerprint = checkpoint.config_hash

    report = evaluate(
        scorer, ds, Split[config.split],
        policy="exclude-seen" if config.exclude_seen else "all",
        threads=config.threads,
        config_hash=fingerprint,
    )
    out = Path(config.out)
    write_effective_config(config)
    with RecordWriter(out / "metrics.jsonl") as writer:
        writer.write(report.model_dump(mode="json"))
    table = format_table([(config.model, report)])
    write_text(out / "metrics.txt", table + "\n")
    print(table)
    return 0
