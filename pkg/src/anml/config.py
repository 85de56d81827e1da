"""Flat ``key = value`` run configuration."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Mapping


class ConfigError(ValueError):
    pass


def _floats(*v: float) -> list[float]:
    return field(default_factory=lambda: list(v))


def _ints(*v: int) -> list[int]:
    return field(default_factory=lambda: list(v))


@dataclass
class RunConfig:
    # experiment
    profile: str = "desk"
    treatment: str = "ANML"
    dataset: str = "synthetic"
    data_root: str = ""
    seed: int = 0
    out: str = "runs"
    tag: str = ""
    dtype: str = "float32"
    # data
    data_seed: int = 0
    n_meta_test: int = 660
    synthetic_classes: int = 70
    synthetic_meta_test: int = 10
    synthetic_instances: int = 20
    # meta-training
    k: int = 20
    remember_size: int = 64
    iterations: int = 2000
    alpha: float = 1e-3
    beta: float = 0.1
    grad_clip: float = 0.0
    first_order: bool = False
    checkpoint_every: int = 1000
    pretrain_budget: int = 0
    pretrain_batch: int = 32
    # meta-testing
    treatments: list[str] = field(default_factory=lambda: ["ANML"])
    lengths: list[int] = _ints(10)
    seeds: list[int] = _ints(0, 1, 2)
    betas: list[float] = _floats(3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1)
    search_seeds: list[int] = _ints(1000, 1001, 1002)
    epochs: int = 1
    dry_run: bool = False
    # analysis
    knn_k: int = 5
    active_threshold: float = 0.01
    analysis_classes: int = 10

    def validate(self) -> "RunConfig":
        if self.profile not in ("full", "desk"):
            raise ConfigError(f"profile must be full or desk, got {self.profile!r}")
        if self.dataset not in ("omniglot", "synthetic"):
            raise ConfigError(f"dataset must be omniglot or synthetic, got {self.dataset!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        for name in ("k", "iterations", "checkpoint_every", "epochs", "knn_k", "pretrain_batch"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not self.treatments or not self.lengths or not self.seeds or not self.betas:
            raise ConfigError("treatments, lengths, seeds and betas must be non-empty")
        return self

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def updated(self, values: Mapping[str, str]) -> "RunConfig":
        hints = typing.get_type_hints(RunConfig)
        known = {f.name for f in fields(self)}
        parsed = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            parsed[key] = _parse(key, hints[key], raw)
        return dataclasses.replace(self, **parsed).validate()


def _parse(key: str, hint, raw: str):
    raw = raw.strip()
    try:
        if hint is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if hint in (int, float, str):
            return hint(raw)
        inner = typing.get_args(hint)[0]
        return [inner(x.strip()) for x in raw.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_pairs(lines: Iterable[str], source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for no, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{source}:{no}: expected 'key = value', got {line.strip()!r}")
        key, value = text.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path: str | Path | None = None, overrides: Iterable[str] = ()) -> RunConfig:
    """File values first, then ``key=value`` overrides in order."""
    values: dict[str, str] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} not found")
        values.update(parse_pairs(p.read_text().splitlines(), str(p)))
    values.update(parse_pairs(overrides, "--set"))
    return RunConfig().updated(values)
