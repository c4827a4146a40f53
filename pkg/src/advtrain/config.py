"""Run configuration: ``key=value`` files, ``ATNN_*`` environment overrides and flags.

Precedence is file < environment < flags. Keys not listed in :data:`SCHEMA`
are rejected; a repeated key keeps its last value and logs a warning.
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import os
from dataclasses import dataclass
from pathlib import Path

from .attacks import AttackConfig
from .errors import AdvTrainError, ConfigError
from .regimes import REGIMES, RegimeConfig

log = logging.getLogger(__name__)

ENV_PREFIX = "ATNN_"
DATASETS = ("mnist", "fashion-mnist")
DEFAULT_EPSILON = {"mnist": 0.3, "fashion-mnist": 0.2}


def _int(text):
    return int(text, 10)


def _float(text):
    value = float(text)
    if value != value or value in (float("inf"), float("-inf")):
        raise ValueError(f"{text!r} is not finite")
    return value


def _choice(options):
    def parse(text):
        if text not in options:
            raise ValueError(f"{text!r} not one of {', '.join(options)}")
        return text
    return parse


# key -> (parser, default); None default means "derived when resolving"
SCHEMA = {
    "dataset": (_choice(DATASETS), "mnist"),
    "data_dir": (str, ""),
    "train_subset": (_int, 0),
    "test_subset": (_int, 0),
    "regime": (_choice(REGIMES), "vanilla"),
    "epochs": (_int, 20),
    "batch_size": (_int, 128),
    "mixture": (_float, 0.5),
    "epsilon": (_float, None),
    "step_size": (_float, None),
    "iterations": (_int, None),
    "reset_period": (_int, 20),
    "seed": (_int, 0),
    "lr": (_float, 0.01),
    "momentum": (_float, 0.9),
    "output_dir": (str, "runs"),
}
PATH_KEYS = ("data_dir", "output_dir")


@dataclass(frozen=True)
class RunConfig:
    dataset: str = "mnist"
    data_dir: str = ""
    train_subset: int = 0
    test_subset: int = 0
    regime: str = "vanilla"
    epochs: int = 20
    batch_size: int = 128
    mixture: float = 0.5
    epsilon: float = 0.3
    step_size: float = 0.03
    iterations: int = 10
    reset_period: int = 20
    seed: int = 0
    lr: float = 0.01
    momentum: float = 0.9
    output_dir: str = "runs"

    @property
    def attack(self) -> AttackConfig:
        return AttackConfig(self.epsilon, self.step_size, self.iterations)

    def regime_config(self) -> RegimeConfig:
        return RegimeConfig(regime=self.regime, epochs=self.epochs, batch_size=self.batch_size,
                            mixture=self.mixture, attack=self.attack, reset_period=self.reset_period,
                            seed=self.seed, lr=self.lr, momentum=self.momentum)

    def to_text(self, include_paths=True) -> str:
        lines = []
        for f in dataclasses.fields(self):
            if not include_paths and f.name in PATH_KEYS:
                continue
            value = getattr(self, f.name)
            lines.append(f"{f.name}={value!r}" if isinstance(value, float) else f"{f.name}={value}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text(include_paths=False).encode()).hexdigest()[:10]

    @property
    def run_id(self) -> str:
        return f"s{self.seed}-{self.regime}-{self.dataset}-{self.config_hash()}"

    @property
    def model_tag(self) -> str:
        return f"bim_adv({self.iterations})" if self.regime == "bim_adv" else self.regime


def _convert(key, text, line=None, source="file"):
    parser = SCHEMA[key][0]
    try:
        return parser(text.strip())
    except ValueError as exc:
        where = f"line {line}" if line is not None else source
        raise ConfigError(f"{where}: cannot parse {key}={text.strip()!r}: {exc}", key=key, line=line) from None


def parse_lines(text: str) -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw.strip()!r}", line=lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}", key=key, line=lineno)
        if key in values:
            log.warning("line %d: duplicate key %r, last value wins", lineno, key)
        values[key] = _convert(key, value, lineno)
    return values


def env_values(env=None) -> dict:
    env = os.environ if env is None else env
    values = {}
    for name, text in env.items():
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX):].lower()
        if key not in SCHEMA:
            raise ConfigError(f"environment variable {name}: unknown key {key!r}", key=key)
        values[key] = _convert(key, text, source=f"environment variable {name}")
    return values


def resolve(values: dict, required=()) -> RunConfig:
    """Fill defaults, derive attack fields from the regime and validate ranges."""
    for key in required:
        if key not in values:
            raise ConfigError(f"missing required key {key!r}", key=key)
    merged = {k: default for k, (_, default) in SCHEMA.items()}
    merged.update(values)
    if merged["epsilon"] is None:
        merged["epsilon"] = DEFAULT_EPSILON[merged["dataset"]]
    regime, eps = merged["regime"], merged["epsilon"]
    if merged["iterations"] is None:
        merged["iterations"] = 10 if regime == "bim_adv" else 1
    if merged["step_size"] is None:
        if regime == "bim_adv":
            merged["step_size"] = eps / merged["iterations"]
        elif regime == "epoch_carried":
            merged["step_size"] = eps / 10
        else:
            merged["step_size"] = eps
    for key in ("train_subset", "test_subset"):
        if merged[key] < 0:
            raise ConfigError(f"{key} must be >= 0, got {merged[key]}", key=key)
    config = RunConfig(**merged)
    try:
        config.regime_config()
    except AdvTrainError as exc:
        raise ConfigError(str(exc)) from None
    return config


def parse_config(path=None, overrides: dict | None = None, env=None, text=None, required=(),
                 base: dict | None = None) -> RunConfig:
    """Build a resolved :class:`RunConfig` from a file (or ``text``), env and flag overrides.

    ``overrides`` maps keys to unparsed strings or typed values; ``base`` holds
    already-parsed values that everything else overrides.
    """
    values = dict(base or {})
    if path is not None:
        text = Path(path).read_text()
    if text is not None:
        values.update(parse_lines(text))
    values.update(env_values(env))
    for key, value in (overrides or {}).items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}", key=key)
        values[key] = _convert(key, value, source=f"flag --{key}") if isinstance(value, str) else value
    return resolve(values, required)
