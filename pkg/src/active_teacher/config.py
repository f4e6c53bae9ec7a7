"""Experiment configuration files.

An INI-style key/value file with three sections, each mirroring one
dataclass field for field::

    [data]          ; ToyConfig: the synthetic corpus
    n_scenes = 2000
    noise = 0.5

    [train]         ; TrainConfig: lambda, alpha, tau, K, p, steps, ...
    lambda_unsup = 4.0
    ema_alpha = 0.9996
    tau = 0.7
    k_iterations = 2

    [experiment]
    budget_fractions = 0.05, 0.10
    n_test = 500

Missing keys take the dataclass defaults; unknown keys are an error.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .ssod import TrainConfig
from .toy import ToyConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    data: ToyConfig = field(default_factory=ToyConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    budget_fractions: tuple[float, ...] = (0.05, 0.10)
    n_test: int = 500

    def __post_init__(self):
        if len(self.budget_fractions) != self.train.k_iterations:
            raise ConfigError(
                f"k_iterations={self.train.k_iterations} needs that many budget fractions, got {list(self.budget_fractions)}"
            )
        if self.n_test < 1:
            raise ConfigError("n_test must be >= 1")


def _coerce(cls, section: configparser.SectionProxy, name: str):
    defaults = {f.name: f for f in fields(cls)}
    values = {}
    for key, raw in section.items():
        if key not in defaults:
            raise ConfigError(f"[{name}] unknown key {key!r}")
        default = defaults[key].default
        try:
            if isinstance(default, bool):
                values[key] = section.getboolean(key)
            elif isinstance(default, int):
                values[key] = int(raw)
            elif isinstance(default, float):
                values[key] = float(raw)
            else:
                values[key] = raw.strip()
        except ValueError as e:
            raise ConfigError(f"[{name}] {key} = {raw!r}: {e}") from e
    try:
        return cls(**values)
    except ValueError as e:
        raise ConfigError(f"[{name}] {e}") from e


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(str(e)) from e
    extra = set(parser.sections()) - {"data", "train", "experiment"}
    if extra:
        raise ConfigError(f"unknown sections: {sorted(extra)}")
    data = _coerce(ToyConfig, parser["data"], "data") if parser.has_section("data") else ToyConfig()
    train = _coerce(TrainConfig, parser["train"], "train") if parser.has_section("train") else TrainConfig()
    kwargs = {}
    if parser.has_section("experiment"):
        exp = parser["experiment"]
        for key in exp:
            if key not in ("budget_fractions", "n_test"):
                raise ConfigError(f"[experiment] unknown key {key!r}")
        try:
            if "budget_fractions" in exp:
                kwargs["budget_fractions"] = tuple(float(x) for x in exp["budget_fractions"].split(","))
            if "n_test" in exp:
                kwargs["n_test"] = int(exp["n_test"])
        except ValueError as e:
            raise ConfigError(f"[experiment] {e}") from e
    return ExperimentConfig(data, train, **kwargs)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such config file: {path}")
    return parse_config(path.read_text())


def dump_config(config: ExperimentConfig) -> str:
    parser = configparser.ConfigParser()
    parser["data"] = {k: str(v) for k, v in dataclasses.asdict(config.data).items()}
    parser["train"] = {k: str(v) for k, v in dataclasses.asdict(config.train).items()}
    parser["experiment"] = {
        "budget_fractions": ", ".join(str(f) for f in config.budget_fractions),
        "n_test": str(config.n_test),
    }
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def with_overrides(config: ExperimentConfig, budget_fractions=None, **train_overrides) -> ExperimentConfig:
    """Apply non-None overrides to the train section (and optionally the budgets)."""
    train_overrides = {k: v for k, v in train_overrides.items() if v is not None}
    try:
        train = replace(config.train, **train_overrides)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    budgets = tuple(budget_fractions) if budget_fractions is not None else config.budget_fractions
    return ExperimentConfig(config.data, train, budgets, config.n_test)
