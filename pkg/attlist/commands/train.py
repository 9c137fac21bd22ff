import logging
from pathlib import Path

from attlist.commands.common import (
    add_common_flags,
    add_data_flag,
    add_exclude_seen_flag,
    add_train_flags,
    build_run_config,
    require,
    write_effective_config,
)
from attlist.config import config_hash
from attlist.errors import CheckpointMismatchError, ConfigurationError
from attlist.logging import RecordWriter
from attlist.models import Split, format_table
from attlist.services.baselines import FactorLearner
from attlist.services.evaluation import evaluate
from attlist.services.training import AttListLearner, fit
from attlist.storage import load_checkpoint, load_prepared, save_checkpoint

logger = logging.getLogger(__name__)

TRAINABLE = ("attlist", "mf", "bpr")


def register(subparsers):
    parser = subparsers.add_parser(
        "train", help="train AttList (or the MF / BPR baselines) on a prepared dataset",
        allow_abbrev=False,
    )
    add_common_flags(parser)
    add_data_flag(parser)
    add_train_flags(parser)
    add_exclude_seen_flag(parser)
    parser.add_argument("--model", choices=TRAINABLE, help="model to train (default: attlist)")
    parser.add_argument("--resume", help="checkpoint to continue from")
    parser.add_argument(
        "--force", action="store_true",
        help="resume even if the checkpoint's config hash doesn't match",
    )
    parser.set_defaults(run=run)


def make_learner(kind: str, ds, train_config, params=None):
    if kind == "attlist":
        return AttListLearner(ds, train_config, params=params)
    return FactorLearner(kind, ds, train_config, params=params)


def check_resumable(checkpoint, kind: str, ds, train_config, source: str):
    """A forced resume still needs the same model kind and parameter shapes."""
    if checkpoint.model_kind != kind:
        raise CheckpointMismatchError(
            f"{source}: holds a {checkpoint.model_kind} model, not {kind}"
        )
    expected = {name: t.shape for name, t in make_learner(kind, ds, train_config).params.items()}
    stored = {name: values.shape for name, values in checkpoint.params.items()}
    if stored != expected:
        raise CheckpointMismatchError(f"{source}: parameter shapes don't fit this config")


def run(args) -> int:
    config = build_run_config(args, "train")
    if config.model not in TRAINABLE:
        raise ConfigurationError(f"can't train '{config.model}'", field="model")
    ds, manifest = load_prepared(require(config.data, "data"))
    if (config.train.N, config.train.M) != (manifest.N, manifest.M):
        logger.warning(
            "training with N=%d M=%d, dataset was prepared with N=%d M=%d",
            config.train.N, config.train.M, manifest.N, manifest.M,
        )

    fingerprint = config_hash(config.train, config.model, manifest.hash)
    resume = None
    if args.resume:
        resume = load_checkpoint(args.resume, expected_hash=fingerprint, force=args.force)
        check_resumable(resume, config.model, ds, config.train, args.resume)
        logger.info("resuming from epoch %d", resume.epoch)

    write_effective_config(config)
    learner = make_learner(config.model, ds, config.train, None if resume is None else resume.params)
    result = fit(learner, ds, config.train, config.out, resume, config.threads, fingerprint)

    best_path = save_checkpoint(result.best, Path(config.out) / "best.npz")
    if manifest.counts["validation"]:
        final = make_learner(config.model, ds, config.train, result.best.params).scorer()
        report = evaluate(
            final, ds, Split.validation,
            policy="exclude-seen" if config.exclude_seen else "all",
            threads=config.threads, config_hash=fingerprint,
        )
        with RecordWriter(Path(config.out) / "validation.jsonl") as writer:
            writer.write(report.model_dump(mode="json"))
        print(format_table([(config.model, report)]))
    print(f"best epoch {result.best.epoch}, checkpoint {best_path}")
    return 0
