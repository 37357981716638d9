"""Experiment configuration: a TOML file with ``[experiment]``, ``[train]`` and ``[tune]`` tables.

Example::

    [experiment]
    dataset = "synthetic"      # ihdp | jobs | synthetic
    n = 3493                   # synthetic only
    d = 10                     # synthetic only
    c = 30
    rct_size = 200             # optional; otherwise floor(fraction_rct * |train|)
    replications = 10
    seed = 0
    methods = ["tspf", "stage1_only", "t_learner", "s_learner"]

    [train]
    epochs1 = 100
    lambda4 = 1e-2

    [tune]
    mode = "coordinate"        # or "full"
    lambda4 = [1e-5, 1e-3, 1e-1]
"""

from __future__ import annotations

import dataclasses
import os
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from tspf.errors import ContractError
from tspf.model import LAMBDA_RANGE, TrainConfig

OUTPUT_ROOT_ENV = "TSPF_OUTPUT_ROOT"
DATASETS = ("ihdp", "jobs", "synthetic")
METHODS = ("tspf", "stage1_only", "t_learner", "s_learner")
LAMBDA_KEYS = ("lambda1", "lambda2", "lambda3", "lambda4")
TUNE_MODES = ("full", "coordinate")


class ConfigError(ContractError):
    """Invalid experiment configuration; the message names the line and key."""


@dataclass
class ExperimentConfig:
    dataset: str = "synthetic"
    covariates: Path | None = None
    n: int = 3493
    d: int = 10
    n_binary: int = 0
    c: int = 30
    fraction_rct: float = 0.10
    rct_size: int | None = None
    replications: int = 10
    seed: int = 0
    methods: tuple[str, ...] = METHODS
    output: Path | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    grid: dict[str, list[float]] = field(default_factory=dict)
    tune_mode: str = "coordinate"
    tune_replications: int = 1
    source: Path | None = None

    def replication_seeds(self) -> list[int]:
        return [self.seed + r for r in range(self.replications)]

    def to_dict(self) -> dict:
        """JSON-friendly view with no absolute paths or timestamps."""
        return {
            "dataset": self.dataset,
            "covariates": None if self.covariates is None else self.covariates.name,
            "n": self.n,
            "d": self.d,
            "n_binary": self.n_binary,
            "c": self.c,
            "fraction_rct": self.fraction_rct,
            "rct_size": self.rct_size,
            "replications": self.replications,
            "seed": self.seed,
            "methods": list(self.methods),
            "train": self.train.to_dict(),
            "grid": {k: list(v) for k, v in sorted(self.grid.items())},
            "tune_mode": self.tune_mode,
            "tune_replications": self.tune_replications,
        }


def _key_line(text: str, section: str, key: str) -> int | None:
    """Line number (1-based) of ``key`` inside ``[section]``, if it can be found."""
    current = None
    for i, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        head = re.match(r"^\[([^\]]+)\]", line)
        if head:
            current = head.group(1).strip()
            continue
        if current == section and re.match(rf"^{re.escape(key)}\s*=", line):
            return i
    return None


class _Reader:
    def __init__(self, text: str, path: Path):
        self.text = text
        self.path = path

    def fail(self, section: str, key: str, msg: str):
        line = _key_line(self.text, section, key)
        where = f"line {line}, " if line else ""
        raise ConfigError(f"{self.path}: {where}key '{section}.{key}': {msg}")

    def check_type(self, section: str, key: str, value, kinds, label: str):
        # bool is an int subclass; never accept it for numeric fields.
        if isinstance(value, bool) and bool not in kinds:
            self.fail(section, key, f"expected {label}, got {value!r}")
        if not isinstance(value, kinds):
            self.fail(section, key, f"expected {label}, got {value!r}")
        return value


_EXPERIMENT_TYPES = {
    "dataset": ((str,), "a string"),
    "covariates": ((str,), "a path string"),
    "n": ((int,), "an integer"),
    "d": ((int,), "an integer"),
    "n_binary": ((int,), "an integer"),
    "c": ((int,), "an integer"),
    "fraction_rct": ((int, float), "a number"),
    "rct_size": ((int,), "an integer"),
    "replications": ((int,), "an integer"),
    "seed": ((int,), "an integer"),
    "methods": ((list,), "a list of method names"),
    "output": ((str,), "a path string"),
}


def _train_types() -> dict[str, tuple[tuple[type, ...], str]]:
    out = {}
    for f in dataclasses.fields(TrainConfig):
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        if isinstance(default, bool):
            out[f.name] = ((bool,), "true or false")
        elif isinstance(default, int):
            out[f.name] = ((int,), "an integer")
        elif isinstance(default, float):
            out[f.name] = ((int, float), "a number")
        elif isinstance(default, str):
            out[f.name] = ((str,), "a string")
        else:
            out[f.name] = ((list,), "a list of integers")
    return out


def parse_config(text: str, path: str | Path = "<config>") -> ExperimentConfig:
    path = Path(path)
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    reader = _Reader(text, path)
    for section in raw:
        if section not in ("experiment", "train", "tune"):
            line = next((i for i, l in enumerate(text.splitlines(), 1) if l.strip().startswith(f"[{section}")), None)
            raise ConfigError(f"{path}: line {line}: unknown section [{section}]")
    exp = raw.get("experiment", {})
    cfg = ExperimentConfig(source=path)
    for key, value in exp.items():
        if key not in _EXPERIMENT_TYPES:
            reader.fail("experiment", key, "unknown key")
        kinds, label = _EXPERIMENT_TYPES[key]
        reader.check_type("experiment", key, value, kinds, label)
        if key == "covariates":
            value = Path(value)
            if not value.is_absolute():
                value = path.parent / value
        elif key == "output":
            value = Path(value)
        elif key == "methods":
            bad = [m for m in value if m not in METHODS]
            if bad or not value:
                reader.fail("experiment", key, f"methods must be a non-empty subset of {list(METHODS)}")
            value = tuple(value)
        elif key == "fraction_rct":
            value = float(value)
        setattr(cfg, key, value)
    if cfg.dataset not in DATASETS:
        reader.fail("experiment", "dataset", f"must be one of {list(DATASETS)}")
    if cfg.dataset != "synthetic":
        if cfg.covariates is None:
            raise ConfigError(f"{path}: key 'experiment.covariates' is required for dataset {cfg.dataset!r}")
        if not cfg.covariates.is_file():
            reader.fail("experiment", "covariates", f"covariate file not found: {cfg.covariates}")
    for key in ("n", "d", "c", "replications"):
        if getattr(cfg, key) < 1:
            reader.fail("experiment", key, "must be >= 1")
    if not 0.0 < cfg.fraction_rct < 1.0:
        reader.fail("experiment", "fraction_rct", "must lie in (0, 1)")

    train_types = _train_types()
    changes = {}
    for key, value in raw.get("train", {}).items():
        if key not in train_types:
            reader.fail("train", key, "unknown key")
        kinds, label = train_types[key]
        reader.check_type("train", key, value, kinds, label)
        changes[key] = float(value) if float in kinds else value
    try:
        cfg.train = TrainConfig(**changes)
    except ContractError as exc:
        raise ConfigError(f"{path}: [train]: {exc}") from None

    tune = dict(raw.get("tune", {}))
    cfg.tune_mode = tune.pop("mode", "coordinate")
    if cfg.tune_mode not in TUNE_MODES:
        reader.fail("tune", "mode", f"must be one of {list(TUNE_MODES)}")
    cfg.tune_replications = tune.pop("replications", 1)
    reader.check_type("tune", "replications", cfg.tune_replications, (int,), "an integer")
    for key, values in tune.items():
        if key not in LAMBDA_KEYS:
            reader.fail("tune", key, f"only {list(LAMBDA_KEYS)} can be tuned")
        reader.check_type("tune", key, values, (list,), "a list of numbers")
        if not values:
            reader.fail("tune", key, "grid is empty")
        for v in values:
            reader.check_type("tune", key, v, (int, float), "a number")
            if not LAMBDA_RANGE[0] <= v <= LAMBDA_RANGE[1]:
                reader.fail("tune", key, f"value {v} outside [{LAMBDA_RANGE[0]}, {LAMBDA_RANGE[1]}]")
        cfg.grid[key] = [float(v) for v in values]
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), path)


def resolve_output(cfg: ExperimentConfig, override: str | Path | None = None) -> Path:
    """--out wins; then the config's ``output``; then $TSPF_OUTPUT_ROOT/<config stem>; then ./results/<stem>."""
    if override is not None:
        return Path(override)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    stem = cfg.source.stem if cfg.source is not None else "experiment"
    if cfg.output is not None:
        if cfg.output.is_absolute() or root is None:
            return cfg.output
        return Path(root) / cfg.output
    return Path(root or "results") / stem
