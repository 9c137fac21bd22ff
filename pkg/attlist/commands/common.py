"""
Flags and plumbing shared by several subcommands.

Config precedence is flags > --config file > --preset > defaults. Flags are
registered with default None so "not given" can be told apart from a value.
"""
import argparse
import json
import logging
from pathlib import Path

import numpy as np

from attlist.config import (
    PRESETS,
    AblationConfig,
    RunConfig,
    TrainConfig,
    config_hash,
    merge_config,
    settings,
    validate,
)
from attlist.errors import CheckpointMismatchError, ConfigurationError, UnknownEntityError
from attlist.models import InteractionDataset
from attlist.services.baselines import FactorScorer, factor_model, itempop_rank
from attlist.services.dataio import ProfileBuilder
from attlist.services.network import AttListScorer, ParameterSet
from attlist.storage import check_checkpoint, load_checkpoint, write_text

logger = logging.getLogger(__name__)

CONFIG_FILE = "config.json"

# flag -> TrainConfig field
TRAIN_FLAGS = {
    "--seed": "seed",
    "--d": "d",
    "--D": "D",
    "--N": "N",
    "--M": "M",
    "--rho": "rho",
    "--gamma": "gamma",
    "--lambda": "lam",
    "--lr": "lr",
    "--batch": "batch_size",
    "--patience": "patience",
    "--max-epochs": "max_epochs",
    "--prefetch": "prefetch",
}

# flag -> (AblationConfig field, value when given)
ABLATION_FLAGS = {
    "--no-vanilla-attention": ("use_vanilla_attention", False),
    "--no-self-attention": ("use_self_attention", False),
    "--no-residual": ("use_residual", False),
    "--no-position": ("use_position", False),
    "--no-id-embeddings": ("use_id_embeddings", False),
    "--linear-projections": ("use_linear_projections", True),
    "--no-padding-mask": ("mask_padding", False),
    "--aggregate-refined": ("aggregate_refined_at_list_level", True),
}


def _default(model_cls, name):
    return model_cls.model_fields[name].default


def add_common_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="JSON run config to start from")
    parser.add_argument("--out", help=f"output directory (default: {settings.output_dir})")
    parser.add_argument(
        "--threads", type=int,
        help=f"evaluation worker threads (default: {settings.threads})",
    )


def add_data_flag(parser: argparse.ArgumentParser):
    parser.add_argument("--data", help="directory written by `attlist prepare`")


def add_train_flags(parser: argparse.ArgumentParser):
    parser.add_argument(
        "--preset", choices=sorted(PRESETS),
        help="tuned per-platform values for lr, d and rho",
    )
    for flag, field in TRAIN_FLAGS.items():
        info = TrainConfig.model_fields[field]
        kind = info.annotation if info.annotation in (int, float) else float
        parser.add_argument(
            flag, dest=f"train_{field}", type=kind,
            help=f"(default: {_default(TrainConfig, field)})",
        )
    parser.add_argument(
        "--clip-grad", dest="train_clip_grad", action="store_const", const=True,
        help="clip gradients by global norm (default: off)",
    )
    for flag, (field, value) in ABLATION_FLAGS.items():
        parser.add_argument(
            flag, dest=f"ablation_{field}", action="store_const", const=value,
            help=f"set {field}={value} (default: {_default(AblationConfig, field)})",
        )


def add_exclude_seen_flag(parser: argparse.ArgumentParser):
    parser.add_argument(
        "--exclude-seen", action=argparse.BooleanOptionalAction, default=None,
        help=f"rank only lists the user hasn't seen in earlier splits "
             f"(default: {settings.exclude_seen})",
    )


def _flag_overrides(args: argparse.Namespace) -> dict:
    given = {k: v for k, v in vars(args).items() if v is not None}
    train = {k[len("train_"):]: v for k, v in given.items() if k.startswith("train_")}
    # config files carry the alias, so flags must too
    if "lam" in train:
        train["lambda"] = train.pop("lam")
    ablation = {k[len("ablation_"):]: v for k, v in given.items() if k.startswith("ablation_")}
    if ablation:
        train["ablation"] = ablation
    top = {
        k: v for k, v in given.items()
        if k in RunConfig.model_fields and k not in ("train", "synthetic", "command")
    }
    if train:
        top["train"] = train
    return top


def build_run_config(args: argparse.Namespace, command: str, extra: dict | None = None) -> RunConfig:
    """Layer defaults, preset, config file and flags into one validated RunConfig."""
    merged: dict = {"command": command}
    preset = getattr(args, "preset", None)
    if preset is not None:
        merged = merge_config(merged, {"preset": preset, "train": PRESETS[preset]})

    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as f:
                from_file = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigurationError(f"can't read config file: {e}", field="config") from e
        if not isinstance(from_file, dict):
            raise ConfigurationError("must be a JSON object", field="config")
        from_file.pop("command", None)
        merged = merge_config(merged, from_file)

    merged = merge_config(merged, _flag_overrides(args))
    merged = merge_config(merged, extra or {})
    if merged.get("out") is None:
        merged["out"] = str(Path(settings.output_dir) / command)
    return validate(RunConfig, merged)


def write_effective_config(run: RunConfig) -> Path:
    path = Path(run.out) / CONFIG_FILE
    write_text(path, run.canonical_json() + "\n")
    return path


def require(value, field: str):
    if value is None:
        raise ConfigurationError("is required", field=field)
    return value


def make_scorer(kind: str, ds: InteractionDataset, checkpoint=None):
    """A ranking scorer for a trained checkpoint, or ItemPop which needs none."""
    if kind == "itempop":
        return itempop_rank(ds)
    if checkpoint.model_kind != kind:
        raise CheckpointMismatchError(
            f"checkpoint holds a '{checkpoint.model_kind}' model, not '{kind}'"
        )
    if kind == "attlist":
        config = checkpoint.config
        builder = ProfileBuilder(ds, config.N, config.M)
        params = ParameterSet.from_arrays(checkpoint.params)
        params.check_shapes(ds.n_users, ds.n_lists, ds.n_items, config)
        return AttListScorer(params, config, builder)
    return FactorScorer(factor_model(checkpoint))


def load_for(path: str, kind: str, manifest_hash: str, force: bool):
    """Load a checkpoint and check it belongs to this dataset and model kind."""
    checkpoint = load_checkpoint(path)
    expected = config_hash(checkpoint.config, kind, manifest_hash)
    check_checkpoint(checkpoint, expected, force, source=str(path))
    return checkpoint


def resolve_ids(requested: list[str], known: list[str], kind: str) -> np.ndarray:
    """Map external IDs to indices; the first unknown one is an error."""
    index = {entity: i for i, entity in enumerate(known)}
    for entity in requested:
        if entity not in index:
            raise UnknownEntityError(kind, entity)
    return np.array([index[e] for e in requested], dtype=np.int64)


def split_csv(value: str | None) -> list[str]:
    if not value:
        return []
    return [part.strip() for part in value.split(",") if part.strip()]
