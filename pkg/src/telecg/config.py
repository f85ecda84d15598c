"""Run configuration: YAML in, validated dataclasses out.

Unknown keys are rejected (with their dotted path) rather than ignored, and
command-line --set overrides are applied to the raw mapping before
validation so they go through the same checks.
"""

from __future__ import annotations

import dataclasses
import typing
from pathlib import Path

import yaml

from .downstream import DOWNSTREAM_DEFAULTS, MODES, TASKS, Hyper
from .errors import ConfigurationError
from .pretrain import PretrainSettings, ScheduleSpec
from .synth import CohortConfig


@dataclasses.dataclass(frozen=True)
class SynthSection:
    patients: int = 20
    hours: float = 2.0
    cohort: CohortConfig = dataclasses.field(default_factory=CohortConfig)

    def __post_init__(self):
        if self.patients < 1 or self.hours <= 0:
            raise ConfigurationError("synth.patients/hours must be positive")


@dataclasses.dataclass(frozen=True)
class CurateSection:
    clip_threshold_mv: float = 60.0
    stride_s: int = 1

    def __post_init__(self):
        if self.clip_threshold_mv <= 0 or self.stride_s < 1:
            raise ConfigurationError("bad curate section")


@dataclasses.dataclass(frozen=True)
class EncoderSection:
    variant: str = "resnet18"


@dataclasses.dataclass(frozen=True)
class PretrainSection:
    queue_size: int = 38912
    temperature: float = 0.1
    batch_size: int = 256
    val_batch_size: int = 512
    momentum: float = 0.999
    weight_decay: float = 0.0001
    val_fraction: float = 0.1
    retrieval_patients: int = 10
    retrieval_segments: int = 20
    initial_lr: float = 0.000625
    final_lr: float = 1e-6
    warmup_epochs: int = 5
    total_epochs: int = 500
    lr_scale: float = 1.0       # halve for the deepest variants when desired
    grad_accum_steps: int = 1

    def to_settings(self) -> PretrainSettings:
        return PretrainSettings(
            queue_size=self.queue_size,
            temperature=self.temperature,
            batch_size=self.batch_size,
            val_batch_size=self.val_batch_size,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            val_fraction=self.val_fraction,
            retrieval_patients=self.retrieval_patients,
            retrieval_segments=self.retrieval_segments,
            lr_scale=self.lr_scale,
            grad_accum_steps=self.grad_accum_steps,
            schedule=ScheduleSpec(
                initial_lr=self.initial_lr, final_lr=self.final_lr,
                warmup_epochs=self.warmup_epochs,
                total_epochs=self.total_epochs),
        )


def _default_hyper_table() -> dict:
    table: dict[str, dict[str, Hyper]] = {}
    for (task, mode), hyper in DOWNSTREAM_DEFAULTS.items():
        table.setdefault(task, {})[mode] = hyper
    return table


@dataclasses.dataclass(frozen=True)
class DownstreamSection:
    tasks: tuple[str, ...] = ("age", "sex", "intervals", "afib")
    fractions: tuple[float, ...] = (1.0,)
    modes: tuple[str, ...] = ("from_scratch", "linear_probe", "fine_tune")
    seeds: tuple[int, ...] = (0,)
    hyper: dict = dataclasses.field(default_factory=_default_hyper_table)

    def __post_init__(self):
        for t in self.tasks:
            if t not in TASKS:
                raise ConfigurationError(f"unknown task {t!r}")
        for m in self.modes:
            if m not in MODES:
                raise ConfigurationError(f"unknown mode {m!r}")
        for f in self.fractions:
            if not 0.0 < f <= 1.0:
                raise ConfigurationError(f"fraction {f} outside (0, 1]")

    def hyper_for(self, task: str, mode: str) -> Hyper:
        return self.hyper[task][mode]


@dataclasses.dataclass(frozen=True)
class AnnotateSection:
    stride: int = 1024
    smoothing: int = 1
    threshold: float = 0.5
    min_run: int = 3
    batch_size: int = 256

    def __post_init__(self):
        if self.stride < 1 or self.min_run < 1 or self.batch_size < 1:
            raise ConfigurationError("bad annotate section")
        if self.smoothing < 1 or self.smoothing % 2 == 0:
            raise ConfigurationError("annotate.smoothing must be odd")


@dataclasses.dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    synth: SynthSection = dataclasses.field(default_factory=SynthSection)
    curate: CurateSection = dataclasses.field(default_factory=CurateSection)
    encoder: EncoderSection = dataclasses.field(default_factory=EncoderSection)
    pretrain: PretrainSection = dataclasses.field(default_factory=PretrainSection)
    downstream: DownstreamSection = dataclasses.field(default_factory=DownstreamSection)
    annotate: AnnotateSection = dataclasses.field(default_factory=AnnotateSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_TUPLE_FIELDS = (tuple[str, ...], tuple[float, ...], tuple[int, ...])


def _build_dataclass(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path or cls.__name__}: expected a mapping")
    field_map = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(field_map)
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigurationError(
            f"unknown config key(s): {', '.join(sorted(where + k for k in unknown))}")
    kwargs = {}
    hints = typing.get_type_hints(cls)
    for name, value in data.items():
        sub = f"{path}.{name}" if path else name
        hint = hints.get(name)
        if dataclasses.is_dataclass(hint) and isinstance(value, dict):
            kwargs[name] = _build_dataclass(hint, value, sub)
        elif name == "hyper":
            kwargs[name] = _build_hyper_table(value, sub)
        elif typing.get_origin(hint) is tuple and isinstance(value, (list, tuple)):
            kwargs[name] = tuple(tuple(v) if isinstance(v, list) else v
                                 for v in value)
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigurationError(f"{path or cls.__name__}: {exc}") from exc


def _build_hyper_table(data, path: str) -> dict:
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: expected a mapping of tasks")
    table = _default_hyper_table()
    for task, per_mode in data.items():
        if task not in TASKS:
            raise ConfigurationError(f"{path}.{task}: unknown task")
        if not isinstance(per_mode, dict):
            raise ConfigurationError(f"{path}.{task}: expected a mapping of modes")
        for mode, fields in per_mode.items():
            if mode not in MODES:
                raise ConfigurationError(f"{path}.{task}.{mode}: unknown mode")
            base = dataclasses.asdict(table[task][mode])
            if not isinstance(fields, dict):
                raise ConfigurationError(f"{path}.{task}.{mode}: expected a mapping")
            unknown = set(fields) - set(base)
            if unknown:
                raise ConfigurationError(
                    f"{path}.{task}.{mode}: unknown key(s) {sorted(unknown)}")
            base.update(fields)
            table[task][mode] = Hyper(**base)
    return table


def apply_overrides(data: dict, overrides) -> dict:
    """Apply dotted key=value strings (values parsed as YAML scalars)."""
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not key=value")
        key, _, raw = item.partition("=")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"override {item!r}: bad value ({exc})")
        node = data
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigurationError(f"override {item!r}: {part} is not a section")
        node[parts[-1]] = value
    return data


def load_config(path=None, overrides=()) -> RunConfig:
    """Build a RunConfig from an optional YAML file plus --set overrides."""
    data: dict = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        try:
            loaded = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"{path}: invalid YAML ({exc})") from exc
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigurationError(f"{path}: top level must be a mapping")
        data = loaded
    data = apply_overrides(data, overrides)
    return _build_dataclass(RunConfig, data, "")
