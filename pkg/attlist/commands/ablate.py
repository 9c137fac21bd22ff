import logging
from pathlib import Path

from attlist.commands.common import (
    add_common_flags,
    add_data_flag,
    add_exclude_seen_flag,
    add_train_flags,
    build_run_config,
    require,
    split_csv,
    write_effective_config,
)
from attlist.config import (
    ABLATION_VARIANTS,
    SWEEPABLE,
    ablation_variant,
    config_hash,
    parse_sweep,
    sweep_variant,
)
from attlist.errors import ConfigurationError
from attlist.logging import RecordWriter
from attlist.models import MetricsReport, Split
from attlist.services.evaluation import evaluate
from attlist.services.training import AttListLearner, fit
from attlist.storage import load_prepared, write_text

logger = logging.getLogger(__name__)


def register(subparsers):
    parser = subparsers.add_parser(
        "ablate", help="train and test ablation variants against the full model",
        allow_abbrev=False,
    )
    add_common_flags(parser)
    add_data_flag(parser)
    add_train_flags(parser)
    add_exclude_seen_flag(parser)
    parser.add_argument(
        "--variants", dest="variant_names",
        help=f"comma-separated variants (default: all of {', '.join(ABLATION_VARIANTS)})",
    )
    parser.add_argument(
        "--sweep",
        help=f"vary one hyperparameter instead, e.g. d=32,64,96; the first value is the "
             f"reference row (one of {', '.join(SWEEPABLE)})",
    )
    parser.set_defaults(run=run)


def percent_change(value: float, reference: float) -> float | None:
    if reference == 0:
        return None
    return 100.0 * (value - reference) / reference


def change_table(rows: list[tuple[str, MetricsReport]]) -> str:
    """P@10 and R@10 per variant with the change relative to the first row."""
    reference = rows[0][1].metrics

    def change(value, key):
        delta = percent_change(value, reference[key])
        return f"{'n/a':>10}" if delta is None else f"{delta:>+9.2f}%"

    header = f"{'variant':<24}{'P@10':>10}{'change':>10}{'R@10':>10}{'change':>10}"
    lines = [header, "-" * len(header)]
    for name, report in rows:
        p, r = report.metrics["P@10"], report.metrics["R@10"]
        lines.append(f"{name:<24}{p:>10.3f}{change(p, 'P@10')}{r:>10.3f}{change(r, 'R@10')}")
    return "\n".join(lines)


def run(args) -> int:
    if args.sweep is not None:
        if args.variant_names is not None:
            raise ConfigurationError("can't be combined with --sweep", field="variants")
        config = build_run_config(args, "ablate")
        name, values = parse_sweep(config.sweep)
        variants = [(f"{name}={value}", sweep_variant(config.train, name, value))
                    for value in values]
        stem = "sweep"
    else:
        names = split_csv(args.variant_names) or list(ABLATION_VARIANTS)
        # the full model is always the reference row
        names = ["full"] + [n for n in names if n != "full"]
        config = build_run_config(args, "ablate", extra={"variants": names})
        variants = [(name, ablation_variant(config.train, name)) for name in names]
        stem = "ablation"

    ds, manifest = load_prepared(require(config.data, "data"))
    out = Path(config.out)
    write_effective_config(config)

    rows = []
    for name, train_config in variants:
        logger.info("%s variant %s", stem, name)
        fingerprint = config_hash(train_config, "attlist", manifest.hash)
        learner = AttListLearner(ds, train_config)
        result = fit(learner, ds, train_config, str(out / name), None, config.threads, fingerprint)
        scorer = AttListLearner(ds, train_config, params=result.best.params).scorer()
        report = evaluate(
            scorer, ds, Split[config.split],
            policy="exclude-seen" if config.exclude_seen else "all",
            threads=config.threads,
            config_hash=fingerprint,
        )
        rows.append((name, report))

    with RecordWriter(out / f"{stem}.jsonl") as writer:
        reference = rows[0][1].metrics
        for name, report in rows:
            writer.write({
                "variant": name,
                **report.model_dump(mode="json"),
                "change_p10": percent_change(report.metrics["P@10"], reference["P@10"]),
                "change_r10": percent_change(report.metrics["R@10"], reference["R@10"]),
            })
    table = change_table(rows)
    write_text(out / f"{stem}.txt", table + "\n")
    print(table)
    return 0
