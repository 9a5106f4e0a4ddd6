"""Strict sectioned key-value run configuration.

Plain-text files with ``[section]`` headers and ``key = value`` lines map
onto the pipeline's config dataclasses. Unknown sections or keys are
errors, not warnings; every run echoes the fully resolved configuration
next to its outputs. Synthetic class signatures live in ``[class:<label>]``
sections.
"""
from __future__ import annotations

import types
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import get_args, get_origin, get_type_hints

from .distill import DistillConfig
from .eeg_encoder import ConformerConfig
from .signal import SegmentationPolicy
from .synth import ClassSignature, SyntheticSpec
from .text_encoder import TextEncoderConfig
from .trainer import TrainRunConfig


class ConfigError(Exception):
    pass


@dataclass
class RunOptions:
    seed: int = 0
    precision: str = "f32"
    out_dir: str = "out"


@dataclass
class PreprocessOptions:
    band_low_hz: float = 0.1
    band_high_hz: float = 70.0
    target_rate_hz: float = 256.0
    clip_uv: float = 500.0
    reject_artifacts: bool = True
    flatline_std: float = 1e-7
    zscore_scope: str = "epoch"            # or "recording"


@dataclass
class EvalOptions:
    folds: int = 5
    grouped_by_source: bool = False
    ecam_method: str = "grad_input"
    report_batch_size: int = 256


@dataclass
class RunConfigFile:
    run: RunOptions = field(default_factory=RunOptions)
    synth: SyntheticSpec | None = None
    policy: SegmentationPolicy = field(default_factory=SegmentationPolicy)
    preprocess: PreprocessOptions = field(default_factory=PreprocessOptions)
    teacher: ConformerConfig = field(default_factory=ConformerConfig)
    student: ConformerConfig | None = None
    text: TextEncoderConfig = field(default_factory=TextEncoderConfig)
    trainer: TrainRunConfig = field(default_factory=TrainRunConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    eval: EvalOptions = field(default_factory=EvalOptions)

    def resolved_student(self) -> ConformerConfig:
        return self.student if self.student is not None else self.teacher.student_of()


_SECTIONS = {
    "run": RunOptions,
    "synth": SyntheticSpec,
    "policy": SegmentationPolicy,
    "preprocess": PreprocessOptions,
    "teacher": ConformerConfig,
    "student": ConformerConfig,
    "text": TextEncoderConfig,
    "trainer": TrainRunConfig,
    "distill": DistillConfig,
    "eval": EvalOptions,
}

_SKIP_FIELDS = {"synth": {"signatures"}}


def _parse_value(raw: str, annotation, where: str):
    origin = get_origin(annotation)
    if isinstance(annotation, types.UnionType) or origin is typing.Union:
        non_none = [a for a in get_args(annotation) if a is not type(None)]
        if raw.strip().lower() == "none":
            return None
        return _parse_value(raw, non_none[0], where)
    if annotation is bool:
        low = raw.strip().lower()
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise ConfigError(f"{where}: expected boolean, got {raw!r}")
    if annotation is int:
        return int(raw)
    if annotation is float:
        return float(raw)
    if annotation is str:
        return raw.strip()
    if origin is tuple:
        parts = [p.strip() for p in raw.split(",")]
        args = get_args(annotation)
        if len(args) == 2 and args[1] is Ellipsis:
            args = (args[0],) * len(parts)
        return tuple(_parse_value(p, a, where) for p, a in zip(parts, args))
    raise ConfigError(f"{where}: unsupported value type {annotation}")


def _read_sections(text: str, origin: str) -> dict[str, dict[str, str]]:
    sections: dict[str, dict[str, str]] = {}
    current: dict[str, str] | None = None
    current_name = ""
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            current_name = stripped[1:-1].strip()
            if current_name in sections:
                raise ConfigError(f"{origin}:{lineno}: duplicate section [{current_name}]")
            current = sections.setdefault(current_name, {})
            continue
        if current is None:
            raise ConfigError(f"{origin}:{lineno}: key outside any [section]")
        key, sep, value = stripped.partition("=")
        if not sep:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value'")
        key = key.strip()
        if key in current:
            raise ConfigError(f"{origin}:{lineno}: duplicate key {key!r} in [{current_name}]")
        current[key] = value.strip()
    return sections


def _build_dataclass(cls, raw: dict[str, str], section: str, origin: str,
                     skip: set[str] = frozenset()):
    hints = get_type_hints(cls)
    valid = {f.name for f in fields(cls)} - skip
    unknown = set(raw) - valid
    if unknown:
        raise ConfigError(f"{origin}: unknown key(s) {sorted(unknown)} in [{section}] "
                          f"(valid: {sorted(valid)})")
    kwargs = {}
    for key, value in raw.items():
        kwargs[key] = _parse_value(value, hints[key], f"{origin} [{section}] {key}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{origin} [{section}]: {exc}") from exc


def load_config(path) -> RunConfigFile:
    path = Path(path)
    sections = _read_sections(path.read_text(), str(path))

    class_sections = {name: body for name, body in sections.items()
                      if name.startswith("class:")}
    plain = {name: body for name, body in sections.items()
             if not name.startswith("class:")}

    unknown = set(plain) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"{path}: unknown section(s) {sorted(unknown)}")

    cfg = RunConfigFile()
    for name, body in plain.items():
        cls = _SECTIONS[name]
        skip = _SKIP_FIELDS.get(name, set())
        if name == "synth":
            signatures = {}
            for sec_name, sec_body in class_sections.items():
                label = sec_name.partition(":")[2]
                signatures[label] = _build_dataclass(ClassSignature, sec_body,
                                                     sec_name, str(path))
            body = dict(body)
            pre = {k: _parse_value(v, get_type_hints(SyntheticSpec)[k], f"{path} [synth] {k}")
                   for k, v in body.items()
                   if k in {f.name for f in fields(SyntheticSpec)} - skip}
            leftover = set(body) - set(pre)
            if leftover:
                raise ConfigError(f"{path}: unknown key(s) {sorted(leftover)} in [synth]")
            cfg.synth = SyntheticSpec(signatures=signatures, **pre)
            continue
        setattr(cfg, name, _build_dataclass(cls, body, name, str(path), skip))
    if class_sections and cfg.synth is None:
        raise ConfigError(f"{path}: [class:*] sections present without a [synth] section")
    return cfg


def dump_config(cfg: RunConfigFile) -> str:
    """Echo the resolved configuration in the same sectioned format."""
    chunks = []
    for name in _SECTIONS:
        obj = getattr(cfg, name)
        if obj is None:
            continue
        chunks.append(f"[{name}]")
        for f in fields(obj):
            if name == "synth" and f.name == "signatures":
                continue
            value = getattr(obj, f.name)
            if isinstance(value, tuple):
                value = ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
            chunks.append(f"{f.name} = {value}")
        chunks.append("")
        if name == "synth":
            for label, sig in sorted(obj.signatures.items()):
                chunks.append(f"[class:{label}]")
                for f in fields(sig):
                    chunks.append(f"{f.name} = {getattr(sig, f.name)}")
                chunks.append("")
    return "\n".join(chunks)
