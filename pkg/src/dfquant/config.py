"""Run configuration: nested YAML sections mapped onto dataclasses.

Unknown keys are rejected, every field is explicit after parsing, and
``serialize(parse(text))`` parses back to an equal config.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import ParseError, ValidationError

OUT_ENV = "CAUSAL_DFQ_OUT"


def _key(f: dataclasses.Field) -> str:
    return f.metadata.get("key", f.name)


@dataclass
class ModelSection:
    arch: str = "tiny_cnn"
    num_classes: int = 10
    input_shape: list = field(default_factory=lambda: [3, 32, 32])


@dataclass
class DataSection:
    train_path: str = "data/shapes/train.pt"
    test_path: str = "data/shapes/test.pt"
    pretrain_epochs: int = 20
    pretrain_lr: float = 0.05
    pretrain_batch_size: int = 128


@dataclass
class QuantSection:
    bits_weights: int = 4
    bits_activations: int = 4
    quantize_first_last: bool = True
    freeze_bn: bool = True


@dataclass
class NormalizationSection:
    mean: list = field(default_factory=lambda: [0.5, 0.5, 0.5])
    std: list = field(default_factory=lambda: [0.5, 0.5, 0.5])


@dataclass
class GeneratorSection:
    latent_dim: int = 100
    generator_lr: float = 1e-3
    image_size: int = 32
    width: int = 128
    normalization: NormalizationSection = field(default_factory=NormalizationSection)


@dataclass
class CausalSection:
    lam: float = field(default=0.1, metadata={"key": "lambda"})
    beta: float = 0.1
    interventions_m: int = 2
    pairs_per_step: int = 1
    tau: float = 0.0
    critic_lr: float | None = None  # None: tied to generator_lr
    critic_dim: int = 128


@dataclass
class DistillSection:
    w_bns: float = 0.1
    w_kd: float = 1.0
    w_ce: float = 1.0
    kd_temperature: float = 1.0


@dataclass
class ScheduleSection:
    epochs: int = 30
    warmup_epochs: int = 4
    iterations_per_epoch: int = 50
    batch_size: int = 64
    lr_q: float = 1e-4
    lr_q_imagenet: float = 1e-6
    momentum: float = 0.9
    weight_decay: float = 1e-4
    nesterov: bool = True
    decay_every: int = 20
    decay_factor: float = 0.1
    generator_betas: list = field(default_factory=lambda: [0.5, 0.999])
    eval_every: int = 1


@dataclass
class RunConfig:
    preset: str = "desk"
    seed: int = 0
    output_dir: str = "runs/dfq"
    teacher: str = "runs/teacher.pt"
    model: ModelSection = field(default_factory=ModelSection)
    data: DataSection = field(default_factory=DataSection)
    quantization: QuantSection = field(default_factory=QuantSection)
    generator: GeneratorSection = field(default_factory=GeneratorSection)
    causal: CausalSection = field(default_factory=CausalSection)
    distillation: DistillSection = field(default_factory=DistillSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)


PRESETS: dict[str, dict] = {
    "desk": {},
    # paper-scale schedule, kept for reference; far beyond a CPU budget
    "paper_cifar": {
        "model": {"arch": "resnet20"},
        "schedule": {"epochs": 400, "iterations_per_epoch": 200, "decay_every": 100,
                     "lr_q": 1e-4},
    },
    "paper_imagenet": {
        "schedule": {"epochs": 400, "iterations_per_epoch": 200, "decay_every": 100,
                     "lr_q": 1e-6},
    },
}


# --------------------------------------------------------------------------

def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ValidationError(f"{path or '<root>'}: expected a mapping, got {type(data).__name__}")
    fields = {_key(f): f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        where = f"{path}." if path else ""
        raise ValidationError(f"unknown key(s): {', '.join(where + k for k in unknown)}")
    kwargs = {}
    for key, f in fields.items():
        if key not in data:
            continue
        value = data[key]
        sub = f"{path}.{key}" if path else key
        if dataclasses.is_dataclass(f.default_factory if f.default_factory is not dataclasses.MISSING else None):
            kwargs[f.name] = _build(f.default_factory, value, sub)
        else:
            kwargs[f.name] = _coerce(value, f, sub)
    return cls(**kwargs)


def _coerce(value, f: dataclasses.Field, path: str):
    default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
    if default is None or value is None:
        if value is not None and not isinstance(value, (int, float)):
            raise ValidationError(f"{path}: expected a number or null, got {value!r}")
        return None if value is None else float(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ValidationError(f"{path}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValidationError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ValidationError(f"{path}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ValidationError(f"{path}: expected a list, got {value!r}")
        return list(value)
    return value


def to_dict(cfg) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        out[_key(f)] = to_dict(v) if dataclasses.is_dataclass(v) else v
    return out


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _check(ok: bool, field_path: str, constraint: str, value):
    if not ok:
        raise ValidationError(f"{field_path} = {value!r} violates: {constraint}")


def validate(cfg: RunConfig) -> RunConfig:
    q, g, c, d, s = cfg.quantization, cfg.generator, cfg.causal, cfg.distillation, cfg.schedule
    _check(cfg.preset in PRESETS, "preset", f"one of {sorted(PRESETS)}", cfg.preset)
    _check(cfg.model.arch in ("tiny_cnn", "resnet20"), "model.arch", "tiny_cnn | resnet20", cfg.model.arch)
    _check(cfg.model.num_classes >= 2, "model.num_classes", ">= 2", cfg.model.num_classes)
    _check(len(cfg.model.input_shape) == 3, "model.input_shape", "[C, H, W]", cfg.model.input_shape)
    for name in ("bits_weights", "bits_activations"):
        v = getattr(q, name)
        _check(2 <= v <= 32, f"quantization.{name}", "2 <= k <= 32", v)
    _check(g.latent_dim >= 1, "generator.latent_dim", ">= 1", g.latent_dim)
    _check(g.generator_lr > 0, "generator.generator_lr", "> 0", g.generator_lr)
    _check(g.image_size >= 4 and g.image_size % 4 == 0, "generator.image_size",
           "positive multiple of 4", g.image_size)
    _check(g.width >= 2 and g.width % 2 == 0, "generator.width", "even, >= 2", g.width)
    n_ch = cfg.model.input_shape[0]
    _check(len(g.normalization.mean) == n_ch, "generator.normalization.mean",
           f"{n_ch} entries", g.normalization.mean)
    _check(len(g.normalization.std) == n_ch and all(v > 0 for v in g.normalization.std),
           "generator.normalization.std", f"{n_ch} positive entries", g.normalization.std)
    _check(c.lam >= 0, "causal.lambda", ">= 0", c.lam)
    _check(c.beta > 0, "causal.beta", "> 0", c.beta)
    _check(c.interventions_m >= 2, "causal.interventions_m", ">= 2", c.interventions_m)
    _check(c.pairs_per_step >= 1, "causal.pairs_per_step", ">= 1", c.pairs_per_step)
    _check(c.critic_lr is None or c.critic_lr > 0, "causal.critic_lr", "> 0 or null", c.critic_lr)
    _check(c.critic_dim >= 1, "causal.critic_dim", ">= 1", c.critic_dim)
    for name in ("w_bns", "w_kd", "w_ce"):
        _check(getattr(d, name) >= 0, f"distillation.{name}", ">= 0", getattr(d, name))
    _check(d.kd_temperature > 0, "distillation.kd_temperature", "> 0", d.kd_temperature)
    _check(s.epochs >= 0, "schedule.epochs", ">= 0", s.epochs)
    _check(0 <= s.warmup_epochs, "schedule.warmup_epochs", ">= 0", s.warmup_epochs)
    _check(s.iterations_per_epoch >= 1, "schedule.iterations_per_epoch", ">= 1", s.iterations_per_epoch)
    _check(s.batch_size >= 2, "schedule.batch_size", ">= 2", s.batch_size)
    for name in ("lr_q", "lr_q_imagenet"):
        _check(getattr(s, name) > 0, f"schedule.{name}", "> 0", getattr(s, name))
    _check(s.decay_every >= 1, "schedule.decay_every", ">= 1", s.decay_every)
    _check(0 < s.decay_factor <= 1, "schedule.decay_factor", "in (0, 1]", s.decay_factor)
    _check(s.eval_every >= 1, "schedule.eval_every", ">= 1", s.eval_every)
    _check(cfg.data.pretrain_epochs >= 0, "data.pretrain_epochs", ">= 0", cfg.data.pretrain_epochs)
    return cfg


def from_dict(data: dict | None, overrides: dict | None = None) -> RunConfig:
    data = _merge(data or {}, overrides or {})
    preset = data.get("preset", "desk")
    if preset not in PRESETS:
        raise ValidationError(f"preset = {preset!r} violates: one of {sorted(PRESETS)}")
    merged = _merge(PRESETS[preset], data)
    return validate(_build(RunConfig, merged, ""))


def parse_text(text: str) -> dict:
    try:
        data = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        where = f"line {mark.line + 1}, column {mark.column + 1}" if mark else "unknown position"
        raise ParseError(f"{where}: {exc.problem}") from exc
    except yaml.YAMLError as exc:
        raise ParseError(str(exc)) from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ParseError("top level must be a mapping of sections")
    return data


def parse_overrides(items: list[str] | None) -> dict:
    """``["causal.lambda=0.5", ...]`` -> nested dict (values parsed as YAML scalars)."""
    out: dict[str, Any] = {}
    for item in items or []:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ParseError(f"override {item!r} is not of the form key=value")
        node = out
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = yaml.safe_load(raw) if raw.strip() else None
    return out


def parse_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Load ``path`` (may be None or empty), apply ``overrides``, validate."""
    data = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ParseError(f"config file not found: {p}")
        data = parse_text(p.read_text())
    return from_dict(data, overrides)


def serialize(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False, default_flow_style=None)


def write_effective(cfg: RunConfig, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "config.yaml"
    path.write_text(serialize(cfg))
    return path


def resolve_output(path: str) -> Path:
    """Relative output paths are placed under ``$CAUSAL_DFQ_OUT`` when it is set."""
    root = os.environ.get(OUT_ENV)
    p = Path(path)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def replace(cfg: RunConfig, **sections) -> RunConfig:
    """Copy of ``cfg`` with nested updates, e.g. ``replace(cfg, causal={"lambda": 0})``."""
    return from_dict(to_dict(cfg), sections)
