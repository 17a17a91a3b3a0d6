"""Run configuration loaded from TOML files or the shipped presets."""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .denoiser import DenoiserConfig
from .process import ProcessConfig
from .schedule import ConfigError, ScheduleConfig, build_schedule
from .trainer import TrainConfig

PRESETS = ("qm9", "fast")


@dataclass
class SampleConfig:
    mask_mode: str = "subgraph"
    threshold: float = 0.5
    langevin_h: float = 1e-3


@dataclass
class RunConfig:
    schedule: ScheduleConfig
    p: float = 0.5
    k: int = 1
    denoiser: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    sample: SampleConfig = field(default_factory=SampleConfig)
    delta: float = 0.5

    def process(self) -> ProcessConfig:
        return ProcessConfig(self.p, self.k, build_schedule(self.schedule))

    def denoiser_config(self) -> DenoiserConfig:
        cfg = DenoiserConfig(T=self.schedule.T, **self.denoiser)
        cfg.validate()
        return cfg

    def train_config(self, **overrides) -> TrainConfig:
        kw = {**self.train, **overrides}
        if "adam_betas" in kw:
            kw["adam_betas"] = tuple(kw["adam_betas"])
        cfg = TrainConfig(process=self.process(), **kw)
        cfg.validate()
        return cfg


def _section(data: dict, name: str, allowed) -> dict:
    sec = data.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"[{name}] must be a table")
    extra = set(sec) - set(allowed)
    if extra:
        raise ConfigError(f"unknown keys in [{name}]: {sorted(extra)}")
    return dict(sec)


def parse_config(data: dict) -> RunConfig:
    unknown = set(data) - {"schedule", "process", "denoiser", "train", "sample", "eval"}
    if unknown:
        raise ConfigError(f"unknown sections: {sorted(unknown)}")
    sched = ScheduleConfig(**_section(data, "schedule", ("T", "beta_start", "beta_end", "kind")))
    sched.validate()
    proc = _section(data, "process", ("p", "k"))
    den_keys = [f.name for f in fields(DenoiserConfig) if f.name != "T"]
    train_keys = [f.name for f in fields(TrainConfig) if f.name != "process"]
    sample = SampleConfig(**_section(data, "sample", [f.name for f in fields(SampleConfig)]))
    if sample.mask_mode not in ("predict", "bernoulli", "subgraph", "ones"):
        raise ConfigError(f"unknown mask_mode {sample.mask_mode!r}")
    run = RunConfig(
        schedule=sched,
        p=float(proc.get("p", 0.5)),
        k=int(proc.get("k", 1)),
        denoiser=_section(data, "denoiser", den_keys),
        train=_section(data, "train", train_keys),
        sample=sample,
        delta=float(_section(data, "eval", ("delta",)).get("delta", 0.5)),
    )
    run.process()
    run.denoiser_config()
    run.train_config()
    return run


def load_config(source: str | Path) -> RunConfig:
    """Load a preset by name (``"fast"``, ``"qm9"``) or a TOML file path."""
    if str(source) in PRESETS:
        text = (resources.files("subgdiff") / "presets" / f"{source}.toml").read_text()
    else:
        text = Path(source).read_text()
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    try:
        return parse_config(data)
    except TypeError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def qm9_preset() -> RunConfig:
    return load_config("qm9")


def fast_preset() -> RunConfig:
    return load_config("fast")
