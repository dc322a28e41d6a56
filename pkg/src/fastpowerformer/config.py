"""Run configuration: a TOML file with [model], [data] and [train] sections."""
from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .data import DEFAULT_SCHEMA, Schema
from .model import ABLATION_ROWS, ConfigError, ModelConfig
from .train import TrainConfig

__all__ = ["DataConfig", "RunConfig", "load_config", "parse_flags"]


@dataclass(frozen=True)
class DataConfig:
    stride: int = 1
    encode_directions: bool = True
    include_power: bool = True
    # column overrides; empty means the standard wind-farm schema
    time_column: Optional[str] = None
    covariates: tuple[str, ...] = ()
    power: Optional[str] = None
    directions: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.stride < 1:
            raise ConfigError("data.stride", "must be >= 1")
        object.__setattr__(self, "covariates", tuple(self.covariates))
        object.__setattr__(self, "directions", tuple(self.directions))

    def schema(self) -> Schema:
        if not self.covariates:
            if self.time_column or self.power or self.directions:
                raise ConfigError("data.covariates", "column overrides need the covariate list")
            return DEFAULT_SCHEMA
        base = Schema.generic(self.covariates, self.power or DEFAULT_SCHEMA.power,
                              self.time_column or DEFAULT_SCHEMA.time_column)
        missing = set(self.directions) - set(self.covariates)
        if missing:
            raise ConfigError("data.directions", f"not among the covariates: {sorted(missing)}")
        return replace(base, directions=self.directions)


@dataclass(frozen=True)
class RunConfig:
    model: dict = field(default_factory=dict)  # ModelConfig overrides; n_channels may be left to the data
    data: DataConfig = DataConfig()
    train: TrainConfig = TrainConfig()

    def model_config(self, n_channels: Optional[int] = None) -> ModelConfig:
        opts = dict(self.model)
        if n_channels is not None:
            opts.setdefault("n_channels", n_channels)
        try:
            return ModelConfig.from_dict(opts)
        except TypeError as exc:
            raise ConfigError("model", str(exc)) from None

    @property
    def seq_len(self) -> int:
        return self.model.get("seq_len", ModelConfig.seq_len)

    @property
    def pred_len(self) -> int:
        return self.model.get("pred_len", ModelConfig.pred_len)

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, model={**self.model, "seed": seed}, train=replace(self.train, seed=seed))

    def with_flags(self, flags: tuple[bool, bool, bool]) -> "RunConfig":
        t, f, l = flags
        return replace(self, model={**self.model, "use_transpose": t, "use_fecam": f, "use_lstm": l})

    def to_dict(self) -> dict:
        return {"model": dict(self.model), "data": asdict(self.data), "train": self.train.to_dict()}


def _section(cls, raw: dict, name: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{name}.{unknown[0]}", "unknown option")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(name, str(exc)) from None


def load_config(path=None) -> RunConfig:
    """Parse and validate a config file; ``None`` gives all defaults."""
    if path is None:
        return RunConfig()
    try:
        raw = tomllib.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError("config", f"{path}: no such file") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("config", f"{path}: {exc}") from None
    extra = sorted(set(raw) - {"model", "data", "train"})
    if extra:
        raise ConfigError(extra[0], "unknown section")
    model = dict(raw.get("model", {}))
    known = {f.name for f in fields(ModelConfig)}
    unknown = sorted(set(model) - known)
    if unknown:
        raise ConfigError(f"model.{unknown[0]}", "unknown option")
    run = RunConfig(model, _section(DataConfig, raw.get("data", {}), "data"), _section(TrainConfig, raw.get("train", {}), "train"))
    # validate everything that does not depend on the data now
    run.model_config(n_channels=model.get("n_channels", 1))
    run.data.schema()
    return run


def parse_flags(text: str) -> tuple[bool, bool, bool]:
    """Ablation triple from a row label ("V") or transpose/fecam/lstm bits ("101")."""
    t = text.strip().upper()
    if t in ABLATION_ROWS:
        return ABLATION_ROWS[t]
    if len(t) == 3 and set(t) <= {"0", "1"}:
        return tuple(c == "1" for c in t)  # type: ignore[return-value]
    raise ConfigError("flags", f"expected a row label I..V or three 0/1 digits, got {text!r}")
