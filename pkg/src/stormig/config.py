"""Run configuration: INI files layered over the packaged defaults."""
from __future__ import annotations

import configparser
import dataclasses
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .rl import TrainConfig
from .simulator import SimConfig
from .workload import COLUMNS, ClassProfile

__all__ = [
    "ConfigError",
    "WorkloadConfig",
    "QbnConfig",
    "RunConfig",
    "load_config",
    "default_profiles",
    "packaged_config",
]

PROFILE_PREFIX = "profile:"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class WorkloadConfig:
    T: int = 64
    snippet_len: int = 16
    standard_per_class: int = 4
    real_train: int = 16
    real_eval: int = 10
    seed: int = 0


@dataclass(frozen=True)
class QbnConfig:
    obs_latent: int = 16
    hidden_latent: int = 64
    hidden_units: int = 64
    epochs: int = 200
    batch_size: int = 256
    learning_rate: float = 1e-3
    episodes_per_trace: int = 1
    finetune_epochs: int = 50
    seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    workload: WorkloadConfig
    sim: SimConfig
    train: TrainConfig
    qbn: QbnConfig
    profiles: tuple[ClassProfile, ...]
    fsm_metric: str = "euclidean"
    window: int = 10
    source: str = field(default="<defaults>", compare=False)

    def to_dict(self) -> dict:
        return {
            "workload": dataclasses.asdict(self.workload),
            "sim": {k: (v.value if hasattr(v, "value") else v) for k, v in dataclasses.asdict(self.sim).items()},
            "train": dataclasses.asdict(self.train),
            "qbn": dataclasses.asdict(self.qbn),
            "profiles": [
                {
                    "name": p.name,
                    "mixture": list(p.mixture),
                    "pattern": p.pattern.value,
                    "base_count": p.base_count,
                    "amplitude": p.amplitude,
                    "period": p.period,
                }
                for p in self.profiles
            ],
            "fsm_metric": self.fsm_metric,
            "window": self.window,
        }

    def fingerprint(self) -> str:
        from .neural import fingerprint

        return fingerprint(self.to_dict())

    def with_seed(self, seed: int) -> "RunConfig":
        """Copy with every component seed replaced by ``seed``."""
        return dataclasses.replace(
            self,
            workload=dataclasses.replace(self.workload, seed=seed),
            sim=dataclasses.replace(self.sim, seed=seed),
            train=dataclasses.replace(self.train, seed=seed),
            qbn=dataclasses.replace(self.qbn, seed=seed),
        )


def packaged_config(name: str = "default.ini") -> str:
    return resources.files("stormig").joinpath("data", name).read_text()


def _coerce(section: str, key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from None


def _build(cls, parser: configparser.ConfigParser, section: str):
    defaults = {f.name: f.default for f in dataclasses.fields(cls) if f.default is not dataclasses.MISSING}
    kwargs = {}
    if parser.has_section(section):
        for key, raw in parser.items(section):
            if key not in defaults:
                raise ConfigError(f"[{section}] unknown key {key!r}")
            default = defaults[key]
            if hasattr(default, "value"):  # enums are given by value
                default = default.value
            kwargs[key] = _coerce(section, key, raw, default)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def _parse_mixture(section: str, raw: str) -> tuple[float, ...]:
    names = COLUMNS[2:]
    weights = [0.0] * len(names)
    for item in raw.split():
        col, sep, w = item.partition(":")
        if not sep or col not in names:
            raise ConfigError(f"[{section}] mixture: bad entry {item!r}")
        try:
            weights[names.index(col)] += float(w)
        except ValueError:
            raise ConfigError(f"[{section}] mixture: bad weight in {item!r}") from None
    total = sum(weights)
    if total <= 0:
        raise ConfigError(f"[{section}] mixture: weights must have a positive sum")
    return tuple(w / total for w in weights)


def _profile(parser: configparser.ConfigParser, section: str) -> ClassProfile:
    sec = parser[section]
    try:
        return ClassProfile(
            name=section[len(PROFILE_PREFIX):],
            mixture=_parse_mixture(section, sec.get("mixture", "")),
            pattern=sec.get("pattern", "Constant"),
            base_count=int(sec.get("base_count", "100")),
            amplitude=float(sec.get("amplitude", "0")),
            period=int(sec.get("period", "8")),
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def _parse(parser: configparser.ConfigParser, source: str) -> RunConfig:
    known = {"workload", "sim", "train", "qbn", "fsm", "interpret"}
    for section in parser.sections():
        if section not in known and not section.startswith(PROFILE_PREFIX):
            raise ConfigError(f"unknown section [{section}]")
    profiles = tuple(_profile(parser, s) for s in parser.sections() if s.startswith(PROFILE_PREFIX))
    if not profiles:
        raise ConfigError("no [profile:...] sections")
    metric = parser.get("fsm", "metric", fallback="euclidean").strip().lower()
    if metric not in ("euclidean", "cosine"):
        raise ConfigError(f"[fsm] metric: expected euclidean or cosine, got {metric!r}")
    window = _coerce("interpret", "window", parser.get("interpret", "window", fallback="10"), 10)
    if window < 1:
        raise ConfigError("[interpret] window must be at least 1")
    return RunConfig(
        workload=_build(WorkloadConfig, parser, "workload"),
        sim=_build(SimConfig, parser, "sim"),
        train=_build(TrainConfig, parser, "train"),
        qbn=_build(QbnConfig, parser, "qbn"),
        profiles=profiles,
        fsm_metric=metric,
        window=window,
        source=source,
    )


def load_config(path=None) -> RunConfig:
    """Read the packaged defaults, then overlay ``path`` when given.

    Files may name a packaged config (``smoke.ini``) instead of a path.
    """
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser.read_string(packaged_config("default.ini"), source="default.ini")
    source = "default.ini"
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text() if p.exists() else packaged_config(str(path))
        except (FileNotFoundError, OSError):
            raise ConfigError(f"config file not found: {path}") from None
        try:
            parser.read_string(text, source=str(path))
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        source = str(path)
    return _parse(parser, source)


def default_profiles() -> tuple[ClassProfile, ...]:
    return load_config().profiles


def dump_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True)
