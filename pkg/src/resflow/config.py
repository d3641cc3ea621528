"""Strict YAML run configuration: unknown keys are errors."""

from __future__ import annotations

import dataclasses
import datetime as dt
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from .dataset import WindowSpec
from .errors import ConfigError
from .net import ModelConfig
from .synthgen import GeneratorConfig, Shock
from .timegrid import SlotGrid
from .training import TrainConfig

ARCH_KEYS = ("d_model", "n_enc_layers", "n_dec_layers", "n_heads", "ffn_dim", "dropout",
             "kernel_size")


@dataclass(frozen=True)
class EvaluateSection:
    input_days: tuple[int, ...] = (1, 3, 5, 7, 14)
    horizons: tuple[int, ...] = (1, 3, 5, 7, 14)
    settings: tuple[int, ...] = (1, 2)
    variants: tuple[str, ...] = ("Full",)
    baselines: tuple[str, ...] = ()
    train_fraction: float = 0.8


@dataclass(frozen=True)
class AblateSection:
    input_days: int = 7
    horizon_days: int = 5
    out_channels: int = 1


@dataclass(frozen=True)
class CorrelateSection:
    visit_lags: tuple[int, ...] = tuple(range(1, 11))
    reservation_lags: tuple[int, ...] = tuple(range(0, 11))
    months: tuple[str, ...] | None = None


@dataclass(frozen=True)
class RunConfig:
    grid: SlotGrid = field(default_factory=SlotGrid)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    window: WindowSpec = field(default_factory=WindowSpec)
    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    variant: str = "Full"
    train_fraction: float = 0.8
    evaluate: EvaluateSection = field(default_factory=EvaluateSection)
    ablate: AblateSection = field(default_factory=AblateSection)
    correlate: CorrelateSection = field(default_factory=CorrelateSection)

    def model_config(self, spec: WindowSpec | None = None) -> ModelConfig:
        return ModelConfig(spec=spec or self.window, **self.model)

    def with_seed(self, seed: int | None) -> "RunConfig":
        if seed is None:
            return self
        return replace(self, generator=replace(self.generator, seed=seed),
                       train=replace(self.train, seed=seed))


def _tupled(v):
    return tuple(_tupled(x) for x in v) if isinstance(v, list) else v


def _section(cls, raw: Any, where: str, **extra):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(raw).__name__}")
    allowed = {f.name for f in fields(cls)} - set(extra)
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}; allowed: {sorted(allowed)}")
    try:
        return cls(**{k: _tupled(v) for k, v in raw.items()}, **extra)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def parse_config(raw: dict | None) -> RunConfig:
    raw = dict(raw or {})
    top = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {unknown}; allowed: {sorted(top)}")
    grid = _section(SlotGrid, raw.get("grid"), "grid")
    gen_raw = dict(raw.get("generator") or {})
    if "shock_calendar" in gen_raw:
        shocks = gen_raw["shock_calendar"] or []
        try:
            gen_raw["shock_calendar"] = [Shock(**_checked(s, Shock, "generator.shock_calendar"))
                                         for s in shocks]
        except TypeError as exc:
            raise ConfigError(f"generator.shock_calendar: {exc}") from None
    generator = _section(GeneratorConfig, gen_raw, "generator", grid=grid)
    window = _section(WindowSpec, raw.get("window"), "window", grid=grid)
    model = raw.get("model") or {}
    if not isinstance(model, dict) or set(model) - set(ARCH_KEYS):
        raise ConfigError(f"model: unknown key(s) {sorted(set(model) - set(ARCH_KEYS))}; "
                          f"allowed: {list(ARCH_KEYS)} (ablation flags are chosen by --variant)")
    try:
        ModelConfig(spec=window, **model)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"model: {exc}") from None
    cfg = RunConfig(
        grid=grid, generator=generator, window=window, model=dict(model),
        train=_section(TrainConfig, raw.get("train"), "train"),
        variant=raw.get("variant", "Full"),
        train_fraction=float(raw.get("train_fraction", 0.8)),
        evaluate=_section(EvaluateSection, raw.get("evaluate"), "evaluate"),
        ablate=_section(AblateSection, raw.get("ablate"), "ablate"),
        correlate=_section(CorrelateSection, raw.get("correlate"), "correlate"),
    )
    if not 0 < cfg.train_fraction < 1:
        raise ConfigError("train_fraction must be in (0, 1)")
    return cfg


def _checked(raw, cls, where):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected mappings")
    unknown = set(raw) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}")
    return raw


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    return parse_config(raw)


def _plain(v):
    if isinstance(v, dt.date):
        return v.isoformat()
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    return v


def config_to_dict(cfg: RunConfig) -> dict:
    d = dataclasses.asdict(cfg)
    for section in ("generator", "window"):
        d[section].pop("grid", None)
    return _plain(d)
