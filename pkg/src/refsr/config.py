"""Flat ``key = value`` run configuration.

Precedence: command-line overrides > config file > defaults. Unknown keys
are rejected.
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .match_train import TrainConfig
from .restoration import RestorationConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # matcher
    margin: float = 1.0
    threshold: float = 4.0
    temperature: float = 0.15
    alpha_kl: float = 15.0
    matcher_lr: float = 1e-3
    batch_size: int = 8
    lr_patch: int = 40
    ref_patch: int = 160
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    weight_decay: float = 0.0
    round_targets: bool = False
    matcher_init: str = "random"
    matcher_weights: str = ""
    # restoration
    lambda_rec: float = 1.0
    lambda_per: float = 1e-4
    lambda_adv: float = 1e-6
    restoration_lr: float = 1e-4
    warmup_iters: int = 10000
    lambda_gp: float = 10.0
    mode: str = "rec_only"
    residual_blocks: int = 16
    vgg_weights: str = ""
    match_tile: int = 1024
    # run
    dataset_root: str = ""
    output_dir: str = "runs"
    seed: int = 0
    iters: int = 1000
    checkpoint_every: int = 0
    device: str = "cpu"
    workers: int = 0

    def train_config(self) -> TrainConfig:
        return _subset(TrainConfig, self)

    def restoration_config(self) -> RestorationConfig:
        return _subset(RestorationConfig, self)

    def dumps(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))

    def config_hash(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()[:16]

    def write(self, directory) -> Path:
        path = Path(directory) / "config.resolved"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps(), encoding="utf-8")
        return path


def _subset(cls, cfg: RunConfig):
    names = {f.name for f in fields(cls)}
    return cls(**{k: v for k, v in dataclasses.asdict(cfg).items() if k in names})


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _cast(name: str, raw: str):
    types = {f.name: f.type for f in fields(RunConfig)}
    if name not in types:
        raise ConfigError(f"unknown config key {name!r}")
    kind = types[name]
    raw = raw.strip()
    try:
        if kind == "bool":
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None
    return raw


def parse_pairs(lines, source: str = "<config>") -> dict:
    values = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        values[key] = _cast(key, val)
    return values


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    values = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        values.update(parse_pairs(p.read_text(encoding="utf-8").splitlines(), str(p)))
    for k, v in (overrides or {}).items():
        values[k] = _cast(k, str(v)) if isinstance(v, str) else v
        if k not in {f.name for f in fields(RunConfig)}:
            raise ConfigError(f"unknown config key {k!r}")
    cfg = RunConfig(**values)
    try:
        cfg.train_config()
        cfg.restoration_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg
