"""Run configuration: ``key = value`` lines grouped under ``[section]`` headers.

An empty file yields the default setup (T=50, beta 1e-4..0.5, H=48, four
heads of width 48, Adam at 1e-3, 200 epochs, batch 4).
"""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np


@dataclass
class RunSection:
    task: str = "battery"
    seed: int = 0


@dataclass
class PathsSection:
    sessions: str = ""
    data: str = ""
    checkpoint: str = ""
    outputs: str = "outputs"


@dataclass
class IngestSection:
    rate_unit: str = "A"
    voltage: float = 208.0
    curve_length: int = 720
    profile_length: int = 288


@dataclass
class DiffusionSection:
    steps: int = 50
    beta_1: float = 1e-4
    beta_T: float = 0.5


@dataclass
class NetworkSection:
    hidden: int = 48
    heads: int = 4
    head_dim: int = 48
    n_labels: int = 2


@dataclass
class TrainSection:
    epochs: int = 200
    batch_size: int = 4
    learning_rate: float = 1e-3
    patience: int = 20
    lr_schedule: str = "cosine"
    ema_decay: float = 0.999


@dataclass
class EvaluationSection:
    bins: int = 50
    repeats: int = 5
    k_tail: int = 7
    step_minutes: float = 1.0


@dataclass
class BiddingSection:
    prices: str = ""
    arrivals: str = ""
    penalty_factor: float = 0.8
    cap_kw: float = 10.0
    k_reduce: int = 0  # 0: one representative per EV
    n_evs: int = 28
    step_minutes: float = 1.0


SECTIONS = {
    "run": RunSection,
    "paths": PathsSection,
    "ingest": IngestSection,
    "diffusion": DiffusionSection,
    "network": NetworkSection,
    "train": TrainSection,
    "evaluation": EvaluationSection,
    "bidding": BiddingSection,
}


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    paths: PathsSection = field(default_factory=PathsSection)
    ingest: IngestSection = field(default_factory=IngestSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    train: TrainSection = field(default_factory=TrainSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    bidding: BiddingSection = field(default_factory=BiddingSection)

    def validate(self) -> None:
        if self.run.task not in ("battery", "station"):
            raise ValueError(f"run.task must be 'battery' or 'station', got {self.run.task!r}")
        if self.ingest.rate_unit not in ("A", "kW"):
            raise ValueError("ingest.rate_unit must be 'A' or 'kW'")
        if self.diffusion.steps < 2:
            raise ValueError("diffusion.steps must be >= 2")
        if self.train.patience > self.train.epochs:
            raise ValueError("train.patience cannot exceed train.epochs")

    def set(self, dotted: str, value: str) -> None:
        section, key = dotted.split(".", 1)
        sec = getattr(self, section)
        typ = {f.name: f.type for f in fields(sec)}[key]
        setattr(sec, key, _coerce(value, typ))

    def stage_seed(self, stage: str) -> int:
        """Independent seed for one pipeline stage, derived from the root seed."""
        index = ("ingest", "train", "sample", "evaluate", "bid").index(stage)
        return int(np.random.SeedSequence([self.run.seed, index]).generate_state(1)[0])


def _coerce(value, typ):
    typ = typ if isinstance(typ, str) else typ.__name__
    if typ == "int":
        return int(value)
    if typ == "float":
        return float(value)
    return str(value)


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    cp.read_string(text)
    cfg = RunConfig()
    for name in cp.sections():
        if name not in SECTIONS:
            raise ValueError(f"unknown config section [{name}]")
        sec = getattr(cfg, name)
        known = {f.name for f in fields(sec)}
        for key, value in cp.items(name):
            if key not in known:
                raise ValueError(f"unknown key {name}.{key}")
            cfg.set(f"{name}.{key}", value)
    cfg.validate()
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return parse_config(Path(path).read_text())


def dump_config(cfg: RunConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    for name in SECTIONS:
        sec = getattr(cfg, name)
        cp[name] = {f.name: repr(v) if isinstance(v, float) else str(v) for f in fields(sec) for v in [getattr(sec, f.name)]}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()
