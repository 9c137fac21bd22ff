from pathlib import Path

from attlist.commands.common import (
    add_common_flags,
    add_data_flag,
    build_run_config,
    load_for,
    require,
    resolve_ids,
    split_csv,
    write_effective_config,
)
from attlist.errors import ConfigurationError
from attlist.services.attention import export_attention, trace_lists, trace_users
from attlist.services.dataio import ProfileBuilder
from attlist.services.network import ParameterSet
from attlist.storage import load_prepared


def register(subparsers):
    parser = subparsers.add_parser(
        "export-attention", help="write self-attention score grids for lists or users",
        allow_abbrev=False,
    )
    add_common_flags(parser)
    add_data_flag(parser)
    parser.add_argument("--checkpoint", help="trained AttList checkpoint")
    parser.add_argument("--lists", help="comma-separated list IDs to trace")
    parser.add_argument("--users", help="comma-separated user IDs to trace")
    parser.add_argument("--force", action="store_true", help="ignore a config hash mismatch")
    parser.set_defaults(run=run)


def run(args) -> int:
    config = build_run_config(args, "export-attention")
    list_ids, user_ids = split_csv(args.lists), split_csv(args.users)
    if not list_ids and not user_ids:
        raise ConfigurationError("give at least one of --lists or --users", field="lists")

    ds, manifest = load_prepared(require(config.data, "data"))
    lists = resolve_ids(list_ids, ds.list_ids, "list")
    users = resolve_ids(user_ids, ds.user_ids, "user")
    checkpoint = load_for(
        require(config.checkpoint, "checkpoint"), "attlist", manifest.hash, args.force
    )
    train_config = checkpoint.config
    params = ParameterSet.from_arrays(checkpoint.params)
    builder = ProfileBuilder(ds, train_config.N, train_config.M)

    out = Path(config.out)
    write_effective_config(config)
    sink = out / "attention.jsonl"
    count = 0
    if lists.size:
        count += export_attention(trace_lists(lists, params, train_config, builder), sink, ds,
                                  train_config)
    if users.size:
        count += export_attention(trace_users(users, params, train_config, builder), sink, ds,
                                  train_config, append=bool(lists.size))
    print(f"{count} records written to {out / 'attention.jsonl'}")
    return 0
