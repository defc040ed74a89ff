"""Run configuration: nested dataclasses read from ``section.key = value`` files.

Unknown sections or keys are errors. ``auto`` (or an empty value) leaves an
optional field unset so the attack preset decides.
"""

from __future__ import annotations

import dataclasses
import hashlib
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .attacks import ATTACK_NAMES
from .transforms import default_pipeline, parse_steps


class ConfigError(ValueError):
    pass


@dataclass
class RunSection:
    seed: int | None = None
    workers: int = 1


@dataclass
class PathsSection:
    dataset: str = "dataset"
    checkpoints: str = "checkpoints"
    attack: str = "attack"
    sweep: str = "sweep"


@dataclass
class DataSection:
    identities: int = 10
    per_identity: int = 120
    size: int = 32
    overwrite: bool = False


@dataclass
class TrainSection:
    epochs: int = 4
    lr: float = 2e-3
    batch_size: int = 32


@dataclass
class SubstituteSection:
    queries: int = 5000
    budget: int | None = None
    freeze_epochs: int = 1
    epochs: int = 3
    lr_head: float = 2e-3
    lr_all: float = 1e-3
    soft: bool = False


@dataclass
class AttackSection:
    name: str = "mdi2fgsm"
    epsilon: float = 0.03
    alpha: float | None = None
    iterations: int = 60
    mu: float | None = None
    p: float | None = None
    targeted: bool = True
    expand: int = 4
    set_size: int = 5
    max_sources: int | None = None


@dataclass
class ControllerSection:
    factor: float = 2.0
    max_adjustments: int = 6
    floor: float = 0.95
    probe_iterations: int = 1


@dataclass
class PipelineSection:
    steps: str = field(default_factory=lambda: default_pipeline().text())


@dataclass
class SweepSection:
    attacks: str = ", ".join(ATTACK_NAMES)
    epsilon: str = ""
    mu: str = ""
    p: str = ""
    iterations: str = ""


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    paths: PathsSection = field(default_factory=PathsSection)
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    substitute: SubstituteSection = field(default_factory=SubstituteSection)
    attack: AttackSection = field(default_factory=AttackSection)
    controller: ControllerSection = field(default_factory=ControllerSection)
    pipeline: PipelineSection = field(default_factory=PipelineSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    def set(self, key: str, raw: str) -> None:
        section_name, _, name = key.partition(".")
        section = getattr(self, section_name, None) if section_name in _sections() else None
        if section is None or not name:
            raise ConfigError(f"unknown config key {key!r}")
        hints = typing.get_type_hints(type(section))
        if name not in hints:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            setattr(section, name, _convert(hints[name], raw.strip()))
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from None

    def items(self):
        """Flat ``(key, value)`` pairs in declaration order."""
        for sname in _sections():
            section = getattr(self, sname)
            for f in dataclasses.fields(section):
                yield f"{sname}.{f.name}", getattr(section, f.name)

    def text(self, exclude_prefixes=()) -> str:
        lines = []
        for key, value in self.items():
            if any(key.startswith(p) for p in exclude_prefixes):
                continue
            lines.append(f"{key} = {_format(value)}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        # output locations do not change results
        return hashlib.sha256(self.text(exclude_prefixes=("paths.", "run.workers")).encode()).hexdigest()

    def validate(self) -> None:
        if self.run.seed is None:
            raise ConfigError("run.seed is required (config file or --seed)")
        if self.run.seed < 0:
            raise ConfigError("run.seed must be non-negative")
        if self.run.workers < 1:
            raise ConfigError("run.workers must be >= 1")
        if self.attack.name not in ATTACK_NAMES:
            raise ConfigError(f"attack.name must be one of {', '.join(ATTACK_NAMES)}")
        try:
            parse_steps(self.pipeline.steps)
        except ValueError as exc:
            raise ConfigError(f"pipeline.steps: {exc}") from None


def _sections():
    return [f.name for f in dataclasses.fields(RunConfig)]


def _convert(tp, raw: str):
    args = typing.get_args(tp)
    optional = type(None) in args
    base = next((a for a in args if a is not type(None)), tp) if args else tp
    if optional and raw in ("", "auto", "none"):
        return None
    if base is bool:
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if base is int:
        return int(raw)
    if base is float:
        return float(raw)
    return raw


def _format(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base if base is not None else RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        try:
            cfg.set(key.strip(), value)
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    return cfg


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def float_list(text: str) -> list[float]:
    return [float(v) for v in text.replace(",", " ").split()]
