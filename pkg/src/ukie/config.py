"""TOML experiment configuration, validation and output manifests."""

from __future__ import annotations

import hashlib
import json
import os
import subprocess
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import datetime, timezone
from pathlib import Path

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ukie.channel import ChannelConfig
from ukie.data import SUPPORTED_DATASETS, SyntheticConfig, data_root
from ukie.errors import ConfigError
from ukie.losses import LossWeights
from ukie.models import ArchConfig, LatentLayout
from ukie.semantic_memory import DriftConfig, SemanticMemory
from ukie.training import TrainConfig

SWEEPS = ("bottleneck", "split", "coefficients", "snr")


@dataclass
class DatasetSection:
    name: str = "mnist"
    root: str | None = None
    train_limit: int | None = None
    test_limit: int | None = None
    synthetic_classes: int = 10
    synthetic_shape: tuple[int, int, int] = (1, 28, 28)
    synthetic_train: int = 512
    synthetic_test: int = 256

    def validate(self):
        if self.name not in SUPPORTED_DATASETS:
            raise ConfigError(f"unknown dataset {self.name!r}; expected one of {SUPPORTED_DATASETS}", "dataset.name")
        for k in ("train_limit", "test_limit"):
            v = getattr(self, k)
            if v is not None and v < 1:
                raise ConfigError("must be >= 1", f"dataset.{k}")
        if self.name != "synthetic":
            root = Path(self.resolved_root())
            if not root.is_dir():
                raise ConfigError(f"dataset root {root} does not exist", "dataset.root")

    def resolved_root(self) -> str:
        return self.root if self.root is not None else str(data_root())

    def synthetic(self, split: str, seed: int) -> SyntheticConfig:
        n = self.synthetic_train if split == "train" else self.synthetic_test
        return SyntheticConfig(n=n, num_classes=self.synthetic_classes, shape=tuple(self.synthetic_shape), seed=seed)


@dataclass
class ModelSection:
    total_channels: int = 32
    invariant_channels: int = 24
    arch: str = "desk"

    def layout(self) -> LatentLayout:
        return LatentLayout(self.total_channels, self.invariant_channels)

    def arch_config(self, seed: int) -> ArchConfig:
        return ArchConfig.preset(self.arch, seed=seed)

    def validate(self):
        self.layout()
        self.arch_config(0)


@dataclass
class ProtocolSection:
    users: int = 3
    kappa: float = 0.1
    kappas: tuple[float, ...] = ()
    tau: int = 1
    horizon: int = 200
    drift: str = "random_walk"
    rate: float = 0.01
    num_classes: int = 4
    proto_shape: tuple[int, ...] = (2, 8, 8)
    baseline: str = "last_broadcast"
    granularity: str = "full"
    merge: str = "add"

    def drift_config(self) -> DriftConfig:
        return DriftConfig(self.drift, self.rate, self.num_classes, tuple(self.proto_shape))

    def validate(self):
        if self.users < 1:
            raise ConfigError("must be >= 1", "protocol.users")
        if self.horizon < 1:
            raise ConfigError("must be >= 1", "protocol.horizon")
        for k in (self.kappa, *self.kappas):
            SemanticMemory(kappa=k, tau=self.tau, baseline=self.baseline, granularity=self.granularity, merge=self.merge)
        try:
            self.drift_config()
        except ValueError as e:
            raise ConfigError(str(e), "protocol.drift") from e


@dataclass
class EvalSection:
    snrs: tuple[float, ...] = (20.0, 15.0, 10.0, 5.0, 0.0)
    accuracy_mode: str = "classifier"
    budget: str = "smoke"
    sweep: str = "snr"
    bottleneck_totals: tuple[int, ...] = (4, 8, 16, 32)
    split_invariant: tuple[int, ...] = (8, 16, 24)
    split_total: int = 32
    coefficients: dict[str, list[float]] = field(default_factory=dict)
    mi_bins: int = 16

    def validate(self):
        if self.accuracy_mode not in ("classifier", "nearest_prototype"):
            raise ConfigError(f"unknown accuracy mode {self.accuracy_mode!r}", "eval.accuracy_mode")
        if self.sweep not in SWEEPS:
            raise ConfigError(f"unknown sweep {self.sweep!r}; expected one of {SWEEPS}", "eval.sweep")
        if self.budget not in ("smoke", "desk", "full"):
            raise ConfigError(f"unknown budget {self.budget!r}", "eval.budget")
        if not self.snrs:
            raise ConfigError("needs at least one SNR", "eval.snrs")
        valid = {f.name for f in fields(LossWeights)}
        for k in self.coefficients:
            if k not in valid:
                raise ConfigError(f"unknown loss weight {k!r}", f"eval.coefficients.{k}")


@dataclass
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    protocol: ProtocolSection = field(default_factory=ProtocolSection)
    eval: EvalSection = field(default_factory=EvalSection)
    out_dir: str = "runs/default"
    seed: int = 0

    def validate(self) -> "ExperimentConfig":
        self.dataset.validate()
        self.model.validate()
        self.protocol.validate()
        self.eval.validate()
        return self

    def train_config(self) -> TrainConfig:
        return replace(self.train, weights=self.loss, seed=self.seed)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=seed)

    def with_budget(self, budget: str) -> "ExperimentConfig":
        cfg = replace(self, eval=replace(self.eval, budget=budget))
        cfg.eval.validate()
        return cfg

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if hasattr(v, "__dataclass_fields__"):
                d = asdict(v)
                if f.name == "train":
                    d.pop("weights")
                    d.pop("seed")
                out[f.name] = _plain(d)
            else:
                out[f.name] = v
        return out

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def digest(self) -> str:
        return hashlib.sha256(self.to_toml().encode()).hexdigest()[:16]

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.to_toml())
        return path


def _plain(d: dict) -> dict:
    """TOML has no null: drop ``None`` and turn tuples into lists."""
    out = {}
    for k, v in d.items():
        if v is None:
            continue
        if isinstance(v, tuple):
            v = list(v)
        out[k] = v
    return out


_SECTIONS = {
    "dataset": DatasetSection,
    "model": ModelSection,
    "loss": LossWeights,
    "train": TrainConfig,
    "channel": ChannelConfig,
    "protocol": ProtocolSection,
    "eval": EvalSection,
}


def _build_section(name: str, cls, raw) -> object:
    if not isinstance(raw, dict):
        raise ConfigError("must be a table", name)
    known = {f.name: f for f in fields(cls)}
    blocked = {"weights", "seed"} if cls is TrainConfig else set()
    kwargs = {}
    for key, val in raw.items():
        if key not in known or key in blocked:
            raise ConfigError(f"unknown key {key!r}", f"{name}.{key}")
        if isinstance(val, list) and key != "coefficients":
            val = tuple(val)
        kwargs[key] = val
    try:
        return cls(**kwargs)
    except ConfigError as e:
        # module configs name fields by their own section; keep their path when it already matches
        fld = e.field if e.field and e.field.split(".")[0] == name else f"{name}.{e.field or ''}".rstrip(".")
        raise ConfigError(str(e).split(" [")[0], fld) from e
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e), name) from e


def config_from_dict(raw: dict) -> ExperimentConfig:
    kwargs = {}
    for key, val in raw.items():
        if key in _SECTIONS:
            kwargs[key] = _build_section(key, _SECTIONS[key], val)
        elif key == "out_dir":
            kwargs[key] = str(val)
        elif key == "seed":
            if not isinstance(val, int) or val < 0:
                raise ConfigError("must be a non-negative integer", "seed")
            kwargs[key] = val
        else:
            raise ConfigError(f"unknown section {key!r}", key)
    return ExperimentConfig(**kwargs)


def load_config(path: str | Path | None) -> ExperimentConfig:
    """Parse and validate a TOML file; ``None`` gives the defaults."""
    if path is None:
        return ExperimentConfig().validate()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} not found", "config")
    try:
        raw = tomllib.loads(p.read_text())
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"cannot parse {p}: {e}", "config") from e
    return config_from_dict(raw).validate()


def _git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True,
            text=True,
            timeout=10,
            cwd=Path(__file__).resolve().parent,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "unknown"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class Manifest:
    command: str
    config_hash: str
    seed: int
    git: str = field(default_factory=_git_describe)
    started: str = field(default_factory=_now)
    finished: str = ""
    status: str = "running"

    def finish(self, status: str, out_dir: str | Path):
        self.finished = _now()
        self.status = status
        self.write(out_dir)

    def write(self, out_dir: str | Path):
        Path(out_dir, "manifest.json").write_text(json.dumps(asdict(self), indent=2) + "\n")

