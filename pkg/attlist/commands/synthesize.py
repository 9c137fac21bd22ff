from attlist.commands.common import add_common_flags, build_run_config, write_effective_config
from attlist.config import SyntheticSpec
from attlist.services.synthetic import generate_synthetic
from attlist.storage import write_raw

# flag -> SyntheticSpec field
SYNTHETIC_FLAGS = {
    "--users": "n_users",
    "--lists": "n_lists",
    "--items": "n_items",
    "--topics": "n_topics",
    "--activity-exponent": "activity_exponent",
    "--length-exponent": "length_exponent",
    "--min-list-length": "min_list_length",
    "--max-list-length": "max_list_length",
    "--max-user-activity": "max_user_activity",
    "--noise": "noise",
    "--seed": "seed",
}


def register(subparsers):
    parser = subparsers.add_parser(
        "synthesize", help="generate a planted-topic dataset in the raw input format",
        allow_abbrev=False,
    )
    add_common_flags(parser)
    for flag, field in SYNTHETIC_FLAGS.items():
        info = SyntheticSpec.model_fields[field]
        parser.add_argument(
            flag, dest=f"synthetic_{field}", type=info.annotation,
            help=f"(default: {info.default})",
        )
    parser.set_defaults(run=run)


def run(args) -> int:
    given = {
        k[len("synthetic_"):]: v for k, v in vars(args).items()
        if k.startswith("synthetic_") and v is not None
    }
    config = build_run_config(args, "synthesize", extra={"synthetic": given})
    spec = config.synthetic or SyntheticSpec()

    ds = generate_synthetic(spec)
    paths = write_raw(ds, config.out)
    write_effective_config(config.model_copy(update={"synthetic": spec}))
    for name, path in paths.items():
        print(f"{name:<14}{path}")
    return 0
