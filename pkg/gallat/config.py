"""Training configuration and the flat ``key = value`` config file format."""
import logging
from importlib import resources
from pathlib import Path
from typing import Any, Dict, Iterable, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from gallat.errors import ConfigError

logger = logging.getLogger(__name__)

DEFAULT_CONF = "default.conf"


class TrainConfig(BaseModel):
    """Every hyperparameter of a training run."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    batch_size: int = Field(default=20, ge=1, description="Target slots per optimisation step")
    epochs: int = Field(default=200, ge=0, description="Joint-training epochs")
    pretrain_epochs: int = Field(default=50, ge=0, description="Demand-task pretraining epochs")
    learning_rate: float = Field(default=1e-3, gt=0, description="Adam step size")
    beta1: float = Field(default=0.9, ge=0, lt=1, description="Adam first-moment decay")
    beta2: float = Field(default=0.999, ge=0, lt=1, description="Adam second-moment decay")
    adam_eps: float = Field(default=1e-8, gt=0, description="Adam denominator term")
    seed: int = Field(default=0, description="Seed for initialisation and shuffling")
    threads: int = Field(default=1, ge=1, description="Worker threads for per-target passes")

    d_e: int = Field(default=16, ge=1, description="Spatial embedding width per segment")
    P: int = Field(default=7, ge=1, description="History length per temporal channel")
    eta_d: float = Field(default=0.8, ge=0, description="Demand-task loss weight")
    eta_o: float = Field(default=0.2, ge=0, description="OD-task loss weight")
    node_embed_dim: int = Field(default=8, ge=0, description="Node-ID embedding width")
    slot_embed_dim: int = Field(default=8, ge=0, description="Time-of-day embedding width")
    dow_embed_dim: int = Field(default=8, ge=0, description="Day-of-week embedding width")
    leaky_slope: float = Field(default=0.2, ge=0, description="LeakyReLU negative slope")
    epsilon: float = Field(default=1e-8, gt=0, description="Pre-weight denominator term")
    geo_threshold_km: Optional[float] = Field(
        default=None, gt=0, description="Geographical neighbourhood radius L (default 1.05 x cell diagonal)"
    )
    temporal_mean: bool = Field(default=False, description="Divide each channel's attention sum by P")
    spatial_aggregator: Literal["attention", "mean"] = Field(
        default="attention", description="Neighbourhood aggregator in the spatial layer"
    )
    temporal_aggregator: Literal["attention", "mean"] = Field(
        default="attention", description="Aggregator in the temporal layer"
    )
    spatial_layer: Literal["ddw", "semantic", "gat"] = Field(
        default="ddw",
        description="Neighbourhoods of the spatial layer: forward/backward/geo, merged flow neighbours plus geo, or plain GAT",
    )
    transfer_layer: Literal["attention", "dense"] = Field(
        default="attention", description="Transfer probabilities from attention scores or from one dense layer"
    )

    test_days: int = Field(default=14, ge=1, description="Trailing days held out for testing")
    val_fraction: float = Field(default=0.1, ge=0, lt=1, description="Trailing share of training slots used for validation")


def parse_conf(text: str, source: str = "<string>", allowed: Optional[Iterable[str]] = None) -> Dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment. Keys outside ``allowed`` are rejected."""
    allowed = set(allowed) if allowed is not None else None
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if allowed is not None and key not in allowed:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = value
    return values


def load_conf(path: Union[str, Path], allowed: Optional[Iterable[str]] = None) -> Dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_conf(path.read_text(), str(path), allowed)


def default_conf() -> Dict[str, str]:
    text = resources.files("gallat").joinpath(DEFAULT_CONF).read_text()
    return parse_conf(text, DEFAULT_CONF, TrainConfig.model_fields)


def resolve_train_config(
    config_path: Optional[Union[str, Path]] = None, overrides: Optional[Dict[str, Any]] = None
) -> TrainConfig:
    """Packaged defaults, then the config file, then explicit overrides."""
    merged: Dict[str, Any] = dict(default_conf())
    if config_path is not None:
        merged.update(load_conf(config_path, TrainConfig.model_fields))
    unknown = sorted(set(overrides or {}) - set(TrainConfig.model_fields))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    merged = {k: None if isinstance(v, str) and v.lower() == "none" else v for k, v in merged.items()}
    try:
        cfg = TrainConfig(**merged)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(part) for part in first["loc"]) or "config"
        raise ConfigError(f"invalid configuration: {where}: {first['msg']}") from e
    logger.debug(f"[Config] resolved {cfg.model_dump()}")
    return cfg
