import hashlib
import json
import os

from pydantic import BaseModel, ConfigDict, Field, ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from attlist.errors import ConfigurationError


class Settings(BaseSettings):
    # App info
    app_name: str = "attlist"
    log_level: str = "INFO"

    # where runs land when --out isn't given
    output_dir: str = "runs"

    # evaluation fan-out, defaults to every core we have
    threads: int = os.cpu_count() or 1

    # items that show up in fewer than this many lists are dropped
    min_item_frequency: int = 5
    min_user_interactions: int = 0

    # rank against unseen lists only
    exclude_seen: bool = True

    model_config = SettingsConfigDict(env_prefix="ATTLIST_", env_file=".env", extra="ignore")


# single instance we'll use throughout the package
settings = Settings()


class AblationConfig(BaseModel):
    """
    Switches for each ablation variant.
    The defaults are the full model.
    """
    model_config = ConfigDict(extra="forbid")

    use_vanilla_attention: bool = True
    use_self_attention: bool = True
    use_residual: bool = True
    use_position: bool = True
    use_id_embeddings: bool = True
    use_linear_projections: bool = False
    mask_padding: bool = True
    aggregate_refined_at_list_level: bool = False


class TrainConfig(BaseModel):
    """Hyperparameters for training AttList and the factor baselines."""
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    batch_size: int = Field(32, gt=0)
    lr: float = Field(0.001, gt=0)
    d: int = Field(96, gt=0)
    D: int = Field(100, gt=0)
    N: int = Field(15, gt=0)
    M: int = Field(32, gt=0)
    rho: int = Field(3, ge=1)
    gamma: float = Field(0.3, ge=0, lt=1)
    lam: float = Field(0.01, ge=0, alias="lambda")
    max_epochs: int = Field(100, ge=0)
    patience: int = Field(10, gt=0)
    seed: int = 0

    # off unless a run needs rescuing
    clip_grad: bool = False
    clip_threshold: float = Field(5.0, gt=0)

    # how many batches the producer thread may build ahead
    prefetch: int = Field(2, ge=0)

    ablation: AblationConfig = Field(default_factory=AblationConfig)


class SyntheticSpec(BaseModel):
    """Knobs for the planted-topic generator."""
    model_config = ConfigDict(extra="forbid")

    n_users: int = Field(500, gt=0)
    n_lists: int = Field(300, gt=0)
    n_items: int = Field(2000, gt=0)
    n_topics: int = Field(5, gt=0)
    activity_exponent: float = Field(2.0, gt=0)
    length_exponent: float = Field(1.5, gt=0)
    min_list_length: int = Field(3, gt=0)
    max_list_length: int = Field(40, gt=0)
    max_user_activity: int = Field(60, gt=0)
    noise: float = Field(0.1, ge=0, le=1)
    seed: int = 0


class RunConfig(BaseModel):
    """Everything one CLI invocation ran with. Written next to its outputs."""
    model_config = ConfigDict(extra="forbid")

    command: str
    model: str = "attlist"
    preset: str | None = None
    interactions: str | None = None
    containment: str | None = None
    data: str | None = None
    out: str | None = None
    checkpoint: str | None = None
    split: str = "test"
    variants: list[str] | None = None
    sweep: str | None = None
    threads: int = Field(settings.threads, gt=0)
    exclude_seen: bool = settings.exclude_seen
    min_item_frequency: int = Field(settings.min_item_frequency, ge=0)
    min_user_interactions: int = Field(settings.min_user_interactions, ge=0)
    train: TrainConfig = Field(default_factory=TrainConfig)
    synthetic: SyntheticSpec | None = None

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json", by_alias=True), indent=2, sort_keys=True)


# tuned values per platform
PRESETS = {
    "goodreads": {"lr": 0.001, "d": 96, "rho": 3},
    "spotify": {"lr": 0.0001, "d": 96, "rho": 5},
    "zhihu": {"lr": 0.0001, "d": 64, "rho": 7},
}


ABLATION_VARIANTS = {
    "full": {},
    "-VanillaAttention": {"use_vanilla_attention": False},
    "-SelfAttention": {"use_self_attention": False},
    "-AttentionMechanism": {"use_vanilla_attention": False, "use_self_attention": False},
    "-Residual": {"use_residual": False},
    "-Position": {"use_position": False},
    "-IDEmbeddings": {"use_id_embeddings": False},
    "+LinearProjections": {"use_linear_projections": True},
}


def ablation_variant(base: TrainConfig, name: str) -> TrainConfig:
    """The base config with one named ablation applied on top."""
    if name not in ABLATION_VARIANTS:
        valid = ", ".join(ABLATION_VARIANTS)
        raise ConfigurationError(f"unknown variant '{name}' (valid: {valid})", field="variants")
    ablation = base.ablation.model_copy(update=ABLATION_VARIANTS[name])
    return base.model_copy(update={"ablation": ablation})


# hyperparameters a sensitivity sweep may vary, by their flag/config name
SWEEPABLE = ("d", "D", "N", "M", "rho", "gamma", "lambda", "lr", "batch_size")


def parse_sweep(text: str) -> tuple[str, list[str]]:
    """'d=32,64,96' -> ('d', ['32', '64', '96']). Values are typed by TrainConfig."""
    name, sep, raw = text.partition("=")
    name = name.strip()
    values = [v.strip() for v in raw.split(",") if v.strip()]
    if not sep or not values:
        raise ConfigurationError(f"expected NAME=V1,V2,..., got '{text}'", field="sweep")
    if name not in SWEEPABLE:
        raise ConfigurationError(
            f"can't sweep '{name}' (valid: {', '.join(SWEEPABLE)})", field="sweep"
        )
    if len(set(values)) != len(values):
        raise ConfigurationError(f"repeated value in '{text}'", field="sweep")
    return name, values


def sweep_variant(base: TrainConfig, name: str, value) -> TrainConfig:
    """The base config with one hyperparameter replaced, re-validated."""
    data = base.model_dump(by_alias=True)
    data[name] = value
    return validate(TrainConfig, data)


def validate(model_cls, data: dict):
    """
    Build a config model, turning pydantic's error into ours.
    The first failing field is named in the message.
    """
    try:
        return model_cls.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        field = ".".join(str(part) for part in first["loc"]) or model_cls.__name__
        raise ConfigurationError(first["msg"], field=field) from e


def load_run_config(path: str) -> RunConfig:
    """Read a config file written by any command (or by hand)."""
    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"can't read config file: {e}", field="config") from e
    return validate(RunConfig, data)


def merge_config(base: dict, overrides: dict) -> dict:
    """Recursively lay overrides over base. None means 'not given'."""
    merged = dict(base)
    for key, value in overrides.items():
        if value is None:
            continue
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = merge_config(merged[key], value)
        else:
            merged[key] = value
    return merged


def config_hash(train: TrainConfig, model: str, manifest_hash: str) -> str:
    """
    Fingerprint of everything that shapes a trained model.
    Optimizer settings are left out so a resumed run keeps its hash.
    """
    shaping = {
        "model": model,
        "d": train.d,
        "D": train.D,
        "N": train.N,
        "M": train.M,
        "ablation": train.ablation.model_dump(),
        "manifest": manifest_hash,
    }
    blob = json.dumps(shaping, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]
