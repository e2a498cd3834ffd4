"""Flat ``section.key = value`` experiment configuration.

Unknown keys, bad types and out-of-range values are errors that name the key
and the line.  Every key has a default; the defaults are the desk-scale setup.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, fields
from typing import Any

STRATEGIES = ("FC", "IS", "ZP", "PNR", "PQ", "BQ", "PLR", "QQR")
SOURCES = ("synthetic", "har-file", "mvsa-single")


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    source: str = "synthetic"
    path: str = ""
    layout: tuple = ()  # channels per modality for har-file input
    K: int = 5
    M: int = 2
    C: int = 4
    d_m: tuple = (8,)  # one value for every modality, or M values
    N: int = 200
    refresh: int = 20
    pool_size: int = 10000
    test_size: int = 1000
    alpha: float = 1.0
    separation: float = 6.0
    offset: float = 0.0

    @property
    def dims(self) -> tuple:
        if self.source == "har-file" and self.layout:
            return tuple(self.layout)
        return tuple(self.d_m) * self.M if len(self.d_m) == 1 else tuple(self.d_m)


@dataclass
class ModelConfig:
    h: int = 32
    d_feat: int = 16
    eta: float = 0.005  # keeps the learning transient inside T=150 so strategies separate
    decay: float = 1.0
    eta_min: float = 0.001
    E: int = 2
    batch_size: int = 0  # recorded only; local steps are full-batch

    def eta_at(self, t: int) -> float:
        if self.decay >= 1.0:
            return self.eta
        return max(self.eta * self.decay ** t, self.eta_min)


@dataclass
class ImbalanceConfig:
    miss_fraction: float = 0.0
    round_fraction_quantity: float = 0.0
    round_fraction_quality: float = 0.0
    snr_db: float = 10.0


@dataclass
class StrategyConfig:
    kind: str = "FC"
    beta: float = 0.5
    bits: int = 32


@dataclass
class RunConfig:
    T: int = 150
    seed: int = 0
    seeds: tuple = ()
    out: str = "runs"
    workers: int = 1
    regret: bool = False  # the hindsight fit dominates runtime; opt in per run
    hindsight_epochs: int = 3000
    hindsight_eta: float = 0.5
    literal_t: bool = False
    weighted_protos: bool = False

    @property
    def seed_list(self) -> tuple:
        return tuple(self.seeds) if self.seeds else (self.seed,)


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    imbalance: ImbalanceConfig = field(default_factory=ImbalanceConfig)
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def replace(self, key: str, value: Any) -> "ExperimentConfig":
        """Copy with one ``section.key`` overridden; ``value`` may be text or typed."""
        out = dataclasses.replace(self, **{f.name: dataclasses.replace(getattr(self, f.name))
                                          for f in fields(self)})
        section, name = _split_key(key, None)
        text = value if isinstance(value, str) else format_value(value)
        setattr(getattr(out, section), name, _coerce(key, text, None))
        validate(out)
        return out

    def to_text(self) -> str:
        lines = []
        for sec in fields(self):
            obj = getattr(self, sec.name)
            for f in fields(obj):
                lines.append(f"{sec.name}.{f.name} = {format_value(getattr(obj, f.name))}")
        return "\n".join(lines) + "\n"

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def _sections() -> dict:
    return {f.name: f.default_factory for f in fields(ExperimentConfig)}


def _where(line: int | None) -> str:
    return f" (line {line})" if line is not None else ""


def _split_key(key: str, line: int | None) -> tuple[str, str]:
    if "." not in key:
        raise ConfigError(f"unknown key '{key}'{_where(line)}: expected section.key")
    section, name = key.split(".", 1)
    secs = _sections()
    if section not in secs:
        raise ConfigError(f"unknown key '{key}'{_where(line)}")
    if name not in {f.name for f in fields(secs[section]())}:
        raise ConfigError(f"unknown key '{key}'{_where(line)}")
    return section, name


def _field_type(section: str, name: str):
    default = getattr(_sections()[section](), name)
    return type(default)


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(format_value(x) for x in v)
    return str(v)


def _coerce(key: str, text: str, line: int | None):
    section, name = _split_key(key, line)
    kind = _field_type(section, name)
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is tuple:
            if not text:
                return ()
            return tuple(int(p) for p in text.split(","))
        return text
    except ValueError as e:
        raise ConfigError(f"{key}{_where(line)}: type mismatch: {e}") from None


def parse_config(text: str) -> ExperimentConfig:
    cfg = ExperimentConfig()
    lines: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        key, value = (p.strip() for p in body.split("=", 1))
        section, name = _split_key(key, lineno)
        if key in lines:
            raise ConfigError(f"{key} (line {lineno}): duplicate key, first set on line {lines[key]}")
        lines[key] = lineno
        setattr(getattr(cfg, section), name, _coerce(key, value, lineno))
    validate(cfg, lines)
    return cfg


def _fail(key: str, msg: str, lines: dict | None) -> None:
    line = (lines or {}).get(key)
    raise ConfigError(f"{key}{_where(line)}: {msg}")


def validate(cfg: ExperimentConfig, lines: dict | None = None) -> ExperimentConfig:
    d, m, im, s, r = cfg.data, cfg.model, cfg.imbalance, cfg.strategy, cfg.run

    def need(ok: bool, key: str, msg: str):
        if not ok:
            _fail(key, msg, lines)

    need(d.source in SOURCES, "data.source", f"must be one of {', '.join(SOURCES)}")
    need(d.K >= 1, "data.K", "must be >= 1")
    need(d.M >= 2, "data.M", "must be >= 2")
    need(d.C >= 2, "data.C", "must be >= 2")
    need(len(d.d_m) in (1, d.M) and all(x >= 1 for x in d.d_m), "data.d_m",
         "must be one positive value or one per modality")
    need(d.N >= 1, "data.N", "must be >= 1")
    need(0 <= d.refresh <= d.N, "data.refresh", "must be in [0, N]")
    need(d.pool_size >= d.K, "data.pool_size", "must be >= K")
    need(d.test_size >= 1, "data.test_size", "must be >= 1")
    need(d.alpha > 0 and math.isfinite(d.alpha), "data.alpha", "must be > 0")
    need(d.separation >= 0, "data.separation", "must be >= 0")
    need(d.offset >= 0, "data.offset", "must be >= 0")
    if d.source == "har-file":
        need(bool(d.path), "data.path", "required for har-file source")
        need(len(d.layout) == d.M, "data.layout", "needs one channel count per modality")
    need(m.h >= 1, "model.h", "must be >= 1")
    need(m.d_feat >= 1, "model.d_feat", "must be >= 1")
    need(m.eta > 0, "model.eta", "must be > 0")
    need(0 < m.decay <= 1, "model.decay", "must be in (0, 1]")
    need(m.eta_min >= 0, "model.eta_min", "must be >= 0")
    need(m.E >= 1, "model.E", "must be >= 1")
    need(m.batch_size >= 0, "model.batch_size", "must be >= 0")
    for key in ("miss_fraction", "round_fraction_quantity", "round_fraction_quality"):
        v = getattr(im, key)
        need(0.0 <= v <= 1.0, f"imbalance.{key}", f"out of range [0, 1]: {v}")
    need(not math.isnan(im.snr_db), "imbalance.snr_db", "must be a number")
    need(s.kind in STRATEGIES, "strategy.kind", f"must be one of {', '.join(STRATEGIES)}")
    need(s.beta >= 0, "strategy.beta", "must be >= 0")
    need(1 <= s.bits <= 16 or s.bits == 32, "strategy.bits", "must be in 1..16 or 32")
    need(r.T >= 1, "run.T", "must be >= 1")
    need(r.seed >= 0, "run.seed", "must be >= 0")
    need(all(x >= 0 for x in r.seeds), "run.seeds", "must be >= 0")
    need(r.workers >= 1, "run.workers", "must be >= 1")
    need(r.hindsight_epochs >= 0, "run.hindsight_epochs", "must be >= 0")
    need(r.hindsight_eta > 0, "run.hindsight_eta", "must be > 0")
    return cfg
