"""Flat ``key = value`` run configuration with CLI overrides and an echo format."""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .sampler import Schedule, SolverConfig
from .train import TrainConfig
from .unet import UNetConfig


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    # dataset
    seed: int = 0
    scenes: int = 250
    h: int = 64
    w: int = 64
    n_buildings: int = 8
    # network and sampler
    base_channels: int = 16
    multipliers: tuple = (1, 2, 4)
    groups: int = 8
    attn_max_positions: int = 256
    T: int = 3
    alpha_bar: tuple = ()  # empty: the default schedule truncated to T
    eta: float = 1.0
    shared_weights: bool = True
    # training
    lr: float = 1e-4
    milestones: tuple = (0.62, 0.95)
    gamma: float = 0.1
    batch_size: int = 2
    epochs: int = 40
    mode: str = "invertible"
    dtype: str = "f32"
    rho: float = 0.05
    noise_std: float = 0.0
    test_fraction: float = 0.2
    self_check_every: int = 50

    def unet(self) -> UNetConfig:
        return UNetConfig(self.base_channels, tuple(self.multipliers), self.groups, self.attn_max_positions)

    def schedule(self) -> Schedule:
        if self.alpha_bar:
            s = Schedule(tuple(self.alpha_bar))
            if s.T != self.T:
                raise ConfigError(f"alpha_bar has {s.T} steps but T = {self.T}")
            return s
        return Schedule.default(self.T)

    def solver(self) -> SolverConfig:
        return SolverConfig(self.unet(), self.schedule(), self.eta, self.shared_weights)

    def train(self) -> TrainConfig:
        return TrainConfig(self.lr, tuple(self.milestones), self.gamma, self.batch_size, self.epochs, self.mode,
                           self.dtype, self.rho, self.seed, self.noise_std, self.test_fraction,
                           self.self_check_every)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = str(v).lower()
            elif isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f for f in fields(Config)}


def _coerce(key: str, raw: str):
    default = getattr(Config(), key)
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            kind = int if key == "multipliers" else float
            return tuple(kind(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_pairs(lines, origin: str = "<config>") -> dict:
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{n}: expected key = value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{origin}:{n}: unknown key {key!r}")
        out[key] = _coerce(key, raw)
    return out


def load_config(path=None, overrides=()) -> Config:
    """File values (if any), then ``key=value`` overrides, on top of the defaults."""
    values = {}
    if path is not None:
        p = Path(path)
        values.update(parse_pairs(p.read_text(encoding="utf-8").splitlines(), str(p)))
    values.update(parse_pairs(overrides, "<override>"))
    cfg = Config(**values)
    cfg.solver()
    cfg.train()  # validate eagerly
    return cfg
