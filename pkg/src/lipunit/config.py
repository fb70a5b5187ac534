"""Pipeline configuration: one YAML file, dotted-path overrides, strict validation."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .audio import AudioConfig
from .model import L2SConfig
from .synth import VIDEO_RATE_HZ, CorpusConfig
from .units import DEFAULT_EXTRACTOR
from .vocoder import VocoderConfig


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  - " + "\n  - ".join(self.problems))


@dataclass
class UnitsConfig:
    k: int = 64
    seed: int = 0
    max_iters: int = 100
    tol: float = 1e-4
    extractor: str = DEFAULT_EXTRACTOR
    stack_factor: int = 2
    codebook: str | None = None  # reuse an existing UNCB file instead of fitting


@dataclass
class MetricsConfig:
    split: str = "test"
    corrupt_blur_sigma: float = 1.0
    corrupt_noise_sigma: float = 1.0
    ablation_lambda_unit: float = 1.0
    # directional comparisons are averaged over this many consecutive seeds
    ablation_seeds: int = 1


@dataclass
class PipelineConfig:
    audio: AudioConfig = field(default_factory=AudioConfig)
    units: UnitsConfig = field(default_factory=UnitsConfig)
    data: CorpusConfig = field(default_factory=CorpusConfig)
    l2s: L2SConfig = field(default_factory=L2SConfig)
    vocoder: VocoderConfig = field(default_factory=VocoderConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    seed: int = 0
    output_dir: str = "runs/default"

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))


# fields filled from other sections when the file leaves them out
_DERIVED = {
    ("l2s", "unit_vocab"), ("vocoder", "unit_vocab"), ("l2s", "mel_stack_dim"), ("vocoder", "n_mels"),
    ("vocoder", "units_per_mel"), ("l2s", "interleave_ratio"),
    ("units", "seed"), ("l2s", "seed"), ("vocoder", "seed"),
}


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(value, tp, path, problems):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path, problems)
    if tp is bool:
        if not isinstance(value, bool):
            problems.append(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            problems.append(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            problems.append(f"{path}: expected a number, got {value!r}")
            return value
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            problems.append(f"{path}: expected a string, got {value!r}")
        return value
    if tp is tuple or origin is tuple:
        if not isinstance(value, (list, tuple)):
            problems.append(f"{path}: expected a list, got {value!r}")
            return value
        return tuple(value)
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)):
        if value is None:
            return None
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return _coerce(value, args[0], path, problems)
    return value


def _build(cls, data, path, problems):
    if not isinstance(data, dict):
        problems.append(f"{path or 'config'}: expected a mapping, got {data!r}")
        return cls()
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            problems.append(f"unknown key {(path + '.' if path else '') + str(key)!r}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in data:
            before = len(problems)
            value = _coerce(data[f.name], hints[f.name], f"{path}.{f.name}" if path else f.name, problems)
            # a mistyped scalar is already reported; keep the default so later checks see valid types
            if len(problems) == before or dataclasses.is_dataclass(hints[f.name]):
                kwargs[f.name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        problems.append(f"{path or 'config'}: {exc}")
        return cls()


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``key.sub=value`` strings (values parsed as YAML scalars/lists)."""
    raw = dict(raw or {})
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError([f"override {item!r} is not of the form key=value"])
        key, value = item.split("=", 1)
        node = raw
        parts = key.strip().split(".")
        for p in parts[:-1]:
            child = node.get(p)
            if not isinstance(child, dict):
                child = {}
            node[p] = child = dict(child)
            node = child
        node[parts[-1]] = yaml.safe_load(value)
    return raw


def build_config(raw: dict | None, overrides=(), seed: int | None = None) -> PipelineConfig:
    raw = apply_overrides(raw or {}, overrides)
    if seed is not None:
        raw["seed"] = seed
    problems: list[str] = []
    cfg = _build(PipelineConfig, raw, "", problems)
    given = {(s, k) for s, sect in raw.items() if isinstance(sect, dict) for k in sect}

    def fill(section, key, value):
        obj = getattr(cfg, section)
        if (section, key) in given:
            if getattr(obj, key) != value:
                problems.append(f"{section}.{key}={getattr(obj, key)!r} is inconsistent with derived value {value!r}")
        else:
            setattr(obj, key, value)

    a = cfg.audio
    problems += a.violations()
    unit_rate = a.frame_rate_hz / max(cfg.units.stack_factor, 1)
    fill("units", "seed", cfg.seed)
    fill("l2s", "seed", cfg.seed)
    fill("vocoder", "seed", cfg.seed)
    fill("l2s", "unit_vocab", cfg.units.k)
    fill("vocoder", "unit_vocab", cfg.units.k)
    fill("l2s", "mel_stack_dim", cfg.units.stack_factor * a.n_mels)
    fill("vocoder", "n_mels", a.n_mels)
    fill("vocoder", "units_per_mel", cfg.units.stack_factor)
    ratio = unit_rate / VIDEO_RATE_HZ
    if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
        problems.append(f"unit rate {unit_rate} Hz is not an integer multiple of the {VIDEO_RATE_HZ} Hz video rate")
    else:
        fill("l2s", "interleave_ratio", int(round(ratio)))
    if cfg.units.k < 1:
        problems.append("units.k must be >= 1")
    if cfg.units.stack_factor < 1:
        problems.append("units.stack_factor must be >= 1")
    problems += cfg.data.violations()
    problems += cfg.l2s.violations()
    if cfg.l2s.video_augment.crop_size > cfg.data.frame_size:
        problems.append("l2s.video_augment.crop_size exceeds data.frame_size")
    problems += cfg.vocoder.violations(a.hop_samples)
    if cfg.metrics.split not in ("train", "val", "test"):
        problems.append("metrics.split must be train, val or test")
    if cfg.metrics.ablation_seeds < 1:
        problems.append("metrics.ablation_seeds must be >= 1")
    if cfg.units.codebook:
        path = Path(cfg.units.codebook)
        if path.exists():
            from .units import codebook_load
            try:
                cb = codebook_load(path)
                if cb.K != cfg.units.k:
                    problems.append(f"units.k={cfg.units.k} but codebook {path} has K={cb.K}")
            except ValueError as exc:
                problems.append(str(exc))
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path=None, overrides=(), seed: int | None = None) -> PipelineConfig:
    raw = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError([f"config file {path} does not exist"])
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
    return build_config(raw, overrides, seed)


def dump_config(cfg: PipelineConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
