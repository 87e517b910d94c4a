"""Flat ``section.key = value`` run configuration.

Sections map onto the per-model dataclasses. Unknown keys are rejected.
Blank lines and ``#`` comments are ignored.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .fln import DEFAULT_MIN_COUNT
from .hcgan import GANConfig
from .hcvae import FLNSeqConfig, GVAEConfig
from .lcvae import LCVAEConfig
from .metrics import DEFAULT_QN_MIN_STEPS


@dataclass
class MetricsConfig:
    bar_steps: int = 25
    qn_min_steps: int = DEFAULT_QN_MIN_STEPS
    upc_include_empty: bool = True


@dataclass
class RunConfig:
    seed: int | None = None
    min_count: int = DEFAULT_MIN_COUNT
    lcvae: LCVAEConfig = field(default_factory=LCVAEConfig)
    gvae: GVAEConfig = field(default_factory=GVAEConfig)
    gan: GANConfig = field(default_factory=GANConfig)
    flnseq: FLNSeqConfig = field(default_factory=FLNSeqConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    SECTIONS = ("lcvae", "gvae", "gan", "flnseq", "metrics")

    def with_seed(self, seed: int | None) -> "RunConfig":
        if seed is not None:
            self.seed = seed
        if self.seed is not None:
            for name in ("lcvae", "gvae", "gan", "flnseq"):
                getattr(self, name).seed = self.seed
        return self

    def set(self, key: str, raw: str) -> None:
        if "." in key:
            section, name = key.split(".", 1)
            if section not in self.SECTIONS:
                raise ConfigError(f"unknown config section {section!r}")
            target = getattr(self, section)
        else:
            target, name = self, key
        fields = {f.name: f for f in dataclasses.fields(target)}
        if name not in fields or name in self.SECTIONS:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(target, name, _coerce(raw, getattr(target, name), fields[name].type, key))

    def to_text(self) -> str:
        lines = [f"seed = {self.seed if self.seed is not None else ''}".rstrip(), f"min_count = {self.min_count}"]
        for section in self.SECTIONS:
            for f in dataclasses.fields(getattr(self, section)):
                if section != "metrics" and f.name == "seed":
                    continue
                lines.append(f"{section}.{f.name} = {getattr(getattr(self, section), f.name)}")
        return "\n".join(lines) + "\n"


def _coerce(raw: str, current, annotation, key: str):
    raw = raw.strip()
    kind = annotation if isinstance(annotation, str) else getattr(annotation, "__name__", str(annotation))
    try:
        if "bool" in kind:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if "int" in kind:
            return None if raw == "" and "None" in kind else int(raw)
        if "float" in kind:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value {raw!r} for {key}") from exc


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = line.split("=", 1)
        cfg.set(key.strip(), value)
    return cfg.with_seed(None)


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        cfg = parse_config(Path(path).read_text(), cfg)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        cfg.set(key.strip(), value)
    return cfg.with_seed(None)


def desk_config(seed: int | None = None) -> RunConfig:
    """Reduced widths and step counts for a single-CPU end-to-end run."""
    cfg = RunConfig(seed=seed)
    cfg.lcvae.intermediate_dim = 128
    cfg.lcvae.epochs = 60
    cfg.lcvae.lr = 3e-3
    cfg.gvae.intermediate_dim = 128
    cfg.gvae.epochs = 150
    cfg.gan.batch_size = 2
    cfg.gan.steps = 1000
    cfg.flnseq.epochs = 150
    return cfg.with_seed(seed)
