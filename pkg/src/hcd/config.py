"""Experiment configuration: an INI file with fixed sections.

Every key is optional (defaults below); unknown sections or keys are
rejected. ``dumps(cfg)`` writes every field, so ``loads(dumps(cfg)) == cfg``.

Example::

    [experiment]
    method = hcd
    seeds = 0..4

    [optim]
    lr = 0.0002

    [schedule]
    mi_d = 0.5, 5.0, 1, step
"""

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields, replace
from typing import Optional

from hcd.kernelinfo import BANDWIDTH_RULES
from hcd.objective import TERMS, CurriculumSchedule, TermSchedule, _default_terms
from hcd.synthbench import SynthSpec
from hcd.vicreg import VicregWeights

METHODS = ("hcd", "erm")


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class ExperimentSection:
    method: str = "hcd"
    seeds: tuple = (0, 1, 2, 3, 4)
    epochs: int = 20
    output_dir: str = "runs"
    literal: bool = False
    grad_clip: float = 5.0
    stylemix: bool = True
    style_eps: float = 1e-6
    detach_style_stats: bool = True
    bandwidth: str = "median"
    eval_batch_size: int = 256


@dataclass(frozen=True)
class ModelSection:
    hidden_channels: int = 16
    channels: int = 32
    projector_width: int = 256


@dataclass(frozen=True)
class GateSection:
    r: int = 16
    p: float = 0.2
    inverted_dropout: bool = True


@dataclass(frozen=True)
class OptimSection:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    data: SynthSpec = field(default_factory=SynthSpec)
    model: ModelSection = field(default_factory=ModelSection)
    gate: GateSection = field(default_factory=GateSection)
    vicreg: VicregWeights = field(default_factory=VicregWeights)
    schedule: CurriculumSchedule = field(default_factory=CurriculumSchedule)
    optim: OptimSection = field(default_factory=OptimSection)

    def effective(self) -> "ExperimentConfig":
        """Resolve derived settings: schedule horizon and literal mode."""
        cfg = self
        if cfg.schedule.epochs_total != cfg.experiment.epochs:
            cfg = replace(cfg, schedule=CurriculumSchedule(cfg.experiment.epochs, cfg.schedule.terms))
        if cfg.experiment.literal:
            cfg = replace(cfg, gate=replace(cfg.gate, inverted_dropout=False),
                          experiment=replace(cfg.experiment, grad_clip=0.0))
        return cfg

    def with_overrides(self, **sections) -> "ExperimentConfig":
        """``cfg.with_overrides(experiment={"method": "erm"})``."""
        cfg = self
        for name, values in sections.items():
            cfg = replace(cfg, **{name: replace(getattr(cfg, name), **values)})
        validate(cfg)
        return cfg


_SECTIONS = ("experiment", "data", "model", "gate", "vicreg", "optim")


def _parse_bool(key, text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(key, f"expected a boolean, got {text!r}")


def _parse_seeds(key, text):
    text = text.strip()
    try:
        if ".." in text:
            lo, hi = text.split("..")
            seeds = tuple(range(int(lo), int(hi) + 1))
        else:
            seeds = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise ConfigError(key, f"bad seed list {text!r}") from None
    if not seeds:
        raise ConfigError(key, "empty seed list")
    return seeds


def _coerce(key: str, f: dataclasses.Field, text: str):
    default = f.default if f.default is not dataclasses.MISSING else None
    try:
        if f.name == "seeds":
            return _parse_seeds(key, text)
        if f.name == "rho_test":
            return None if text.strip().lower() in ("", "none") else float(text)
        if isinstance(default, bool):
            return _parse_bool(key, text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text.strip()
    except ValueError:
        raise ConfigError(key, f"cannot parse {text!r}") from None


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_term(key: str, text: str) -> TermSchedule:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 4:
        raise ConfigError(key, "expected 'initial, target, activation_epoch, ramp'")
    try:
        return TermSchedule(float(parts[0]), float(parts[1]), int(parts[2]), parts[3])
    except ValueError as exc:
        raise ConfigError(key, str(exc)) from None


def _format_term(s: TermSchedule) -> str:
    return f"{s.initial!r}, {s.target!r}, {s.activation_epoch}, {s.ramp}"


def from_parser(cp: configparser.ConfigParser) -> ExperimentConfig:
    unknown = set(cp.sections()) - set(_SECTIONS) - {"schedule"}
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown section")
    base = ExperimentConfig()
    built = {}
    for name in _SECTIONS:
        cls = type(getattr(base, name))
        known = {f.name: f for f in fields(cls)}
        values = {}
        if cp.has_section(name):
            for key, text in cp.items(name):
                if key not in known:
                    raise ConfigError(f"{name}.{key}", "unknown key")
                values[key] = _coerce(f"{name}.{key}", known[key], text)
        try:
            built[name] = cls(**values)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(name, str(exc)) from None
    terms = dict(_default_terms())
    if cp.has_section("schedule"):
        for key, text in cp.items("schedule"):
            if key not in TERMS:
                raise ConfigError(f"schedule.{key}", "unknown key")
            terms[key] = _parse_term(f"schedule.{key}", text)
    built["schedule"] = CurriculumSchedule(built["experiment"].epochs, terms)
    cfg = ExperimentConfig(**built)
    validate(cfg)
    return cfg


def loads(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("file", str(exc)) from None
    return from_parser(cp)


def load(path) -> ExperimentConfig:
    with open(path) as fh:
        return loads(fh.read())


def dumps(cfg: ExperimentConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    for name in _SECTIONS:
        section = getattr(cfg, name)
        cp[name] = {f.name: _format(getattr(section, f.name)) for f in fields(section)}
    cp["schedule"] = {t: _format_term(cfg.schedule.terms[t]) for t in TERMS if t in cfg.schedule.terms}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def validate(cfg: ExperimentConfig) -> None:
    ex, opt, gate, model = cfg.experiment, cfg.optim, cfg.gate, cfg.model
    checks = [
        ("experiment.method", ex.method in METHODS, f"must be one of {METHODS}"),
        ("experiment.epochs", ex.epochs >= 1, "must be >= 1"),
        ("experiment.grad_clip", ex.grad_clip >= 0, "must be >= 0 (0 disables clipping)"),
        ("experiment.style_eps", ex.style_eps > 0, "must be positive"),
        ("experiment.bandwidth", _bandwidth_ok(ex.bandwidth), "must be 'median', 'median_grad' or a positive number"),
        ("experiment.eval_batch_size", ex.eval_batch_size >= 2, "must be >= 2"),
        ("experiment.seeds", all(s >= 0 for s in ex.seeds), "seeds must be nonnegative"),
        ("optim.lr", opt.lr > 0, "must be positive"),
        ("optim.beta1", 0 <= opt.beta1 < 1, "must be in [0, 1)"),
        ("optim.beta2", 0 <= opt.beta2 < 1, "must be in [0, 1)"),
        ("optim.eps", opt.eps > 0, "must be positive"),
        ("optim.batch_size", opt.batch_size >= 2, "must be >= 2 (kernel losses need pairs)"),
        ("gate.p", 0 <= gate.p < 1, "must be in [0, 1)"),
        ("gate.r", gate.r >= 1 and model.channels % gate.r == 0, "must divide model.channels"),
        ("model.channels", model.channels >= 1, "must be positive"),
        ("model.hidden_channels", model.hidden_channels >= 1, "must be positive"),
        ("model.projector_width", model.projector_width >= 1, "must be positive"),
    ]
    for key, ok, msg in checks:
        if not ok:
            raise ConfigError(key, msg)


def _bandwidth_ok(text: str) -> bool:
    if text in BANDWIDTH_RULES:
        return True
    try:
        return float(text) > 0
    except ValueError:
        return False


def bandwidth_value(cfg: ExperimentConfig):
    bw = cfg.experiment.bandwidth
    return bw if bw in BANDWIDTH_RULES else float(bw)
