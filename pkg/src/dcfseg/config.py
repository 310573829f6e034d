"""Run configuration: a flat key=value file format plus CLI overrides.

Every field can come from a config file (``key = value`` lines, ``#``
comments) or a ``--key value`` flag, flags winning.  The fully resolved
config is written verbatim into the run directory so any run can be
reconstructed from ``config.resolved`` alone.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .competition import CompetitionConfig
from .trainer import MODES, TUTORING_POLICIES


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"config field '{field}': {message}")
        self.field = field


@dataclass
class RunConfig:
    mode: str = "dcf"
    seed: int = 0
    iterations: int = 4000
    batch_labeled: int = 2
    batch_unlabeled: int = 2
    labeled_fraction: float = 0.1
    n_train: int = 200
    n_test: int = 50
    data_seed: Optional[int] = None          # defaults to seed
    alpha: float = 0.99
    lambda_max: float = 1.0
    ramp_iters: Optional[int] = None         # defaults to 40% of iterations
    tutoring: str = "tutor_loser"
    competition: str = "dice"                # comma-separated metric names
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    ema_warmup: int = 0
    checkpoint_every: int = 1000
    out: Optional[str] = None

    @property
    def competition_config(self) -> CompetitionConfig:
        return CompetitionConfig(metrics=tuple(
            part for part in (p.strip() for p in self.competition.split("+" if "+" in self.competition else ","))
            if part))

    def validate(self) -> "RunConfig":
        if self.mode not in MODES:
            raise ConfigError("mode", f"must be one of {MODES}, got {self.mode!r}")
        if self.seed < 0:
            raise ConfigError("seed", f"must be >= 0, got {self.seed}")
        if self.iterations < 1:
            raise ConfigError("iterations", f"must be >= 1, got {self.iterations}")
        if self.batch_labeled < 1:
            raise ConfigError("batch_labeled", f"must be >= 1, got {self.batch_labeled}")
        if self.batch_unlabeled < 0:
            raise ConfigError("batch_unlabeled", f"must be >= 0, got {self.batch_unlabeled}")
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise ConfigError("labeled_fraction", f"must be in (0, 1], got {self.labeled_fraction}")
        if self.n_train < 1:
            raise ConfigError("n_train", f"must be >= 1, got {self.n_train}")
        if self.n_test < 0:
            raise ConfigError("n_test", f"must be >= 0, got {self.n_test}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha", f"must be in [0, 1], got {self.alpha}")
        if self.lambda_max < 0.0:
            raise ConfigError("lambda_max", f"must be >= 0, got {self.lambda_max}")
        if self.ramp_iters is not None and self.ramp_iters < 0:
            raise ConfigError("ramp_iters", f"must be >= 0, got {self.ramp_iters}")
        if self.tutoring not in TUTORING_POLICIES:
            raise ConfigError("tutoring", f"must be one of {TUTORING_POLICIES}, got {self.tutoring!r}")
        try:
            self.competition_config
        except ValueError as e:
            raise ConfigError("competition", str(e)) from e
        if self.learning_rate <= 0.0:
            raise ConfigError("learning_rate", f"must be > 0, got {self.learning_rate}")
        if self.weight_decay < 0.0:
            raise ConfigError("weight_decay", f"must be >= 0, got {self.weight_decay}")
        if self.ema_warmup < 0:
            raise ConfigError("ema_warmup", f"must be >= 0, got {self.ema_warmup}")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every", f"must be >= 0, got {self.checkpoint_every}")
        return self

    def resolved(self) -> "RunConfig":
        """Validated copy with all derived defaults filled in."""
        cfg = dataclasses.replace(self)
        if cfg.data_seed is None:
            cfg.data_seed = cfg.seed
        if cfg.ramp_iters is None:
            cfg.ramp_iters = max(int(round(0.4 * cfg.iterations)), 1)
        if cfg.mode == "supervised":
            cfg.batch_unlabeled = 0
        cfg.validate()
        return cfg

    def to_text(self) -> str:
        lines = ["# resolved run configuration"]
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if value is None:
                continue
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}
_INT_FIELDS = {"seed", "iterations", "batch_labeled", "batch_unlabeled", "n_train",
               "n_test", "data_seed", "ramp_iters", "ema_warmup", "checkpoint_every"}
_FLOAT_FIELDS = {"labeled_fraction", "alpha", "lambda_max", "learning_rate", "weight_decay"}


def parse_value(field: str, text: str):
    if field not in _FIELD_TYPES:
        raise ConfigError(field, "unknown configuration key")
    text = text.strip()
    try:
        if field in _INT_FIELDS:
            return int(text)
        if field in _FLOAT_FIELDS:
            return float(text)
    except ValueError as e:
        raise ConfigError(field, f"cannot parse {text!r}: {e}") from e
    return text


def read_config_file(path) -> dict:
    """Parse key = value lines; '#' starts a comment; later keys win."""
    values: dict = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError("<file>", f"{path}:{lineno}: expected 'key = value', got {raw.rstrip()!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            values[key] = parse_value(key, value)
    return values


def build_config(file_path=None, overrides: Optional[dict] = None) -> RunConfig:
    """Defaults <- config file <- overrides (last wins), then resolve."""
    values: dict = {}
    if file_path is not None:
        values.update(read_config_file(file_path))
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        values[key] = parse_value(key, str(value)) if isinstance(value, str) else value
    unknown = set(values) - set(_FIELD_TYPES)
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown configuration key")
    return RunConfig(**values).resolved()


def write_resolved(cfg: RunConfig, out_dir) -> Path:
    path = Path(out_dir) / "config.resolved"
    path.write_text(cfg.to_text(), encoding="utf-8")
    return path
