from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Literal

import numpy as np

CondMode = Literal["none", "class", "vector"]
MLP_GROUPS = ("cond_mlp", "block_mlp")


class ConfigError(ValueError):
    """A configuration value violates its documented bounds."""


@dataclass(frozen=True)
class ArchConfig:
    """Geometry and widths of the toy denoiser.

    ``cond_dim`` is the number of classes for ``cond_mode="class"`` and the
    vector length for ``cond_mode="vector"``.
    """

    input_shape: tuple[int, int, int] = (3, 16, 16)
    enc_channels: int = 8
    width: int = 256
    num_blocks: int = 3
    mlp_ratio: int = 2
    embed_dim: int = 128
    cond_mode: CondMode = "class"
    cond_dim: int = 10
    cond_dropout: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        c, h, w = self.input_shape
        if h % 2 or w % 2:
            raise ConfigError(f"input height/width must be even, got {self.input_shape}")
        if self.cond_mode not in ("none", "class", "vector"):
            raise ConfigError(f"unknown cond_mode {self.cond_mode!r}")
        if not 0.0 <= self.cond_dropout <= 1.0:
            raise ConfigError("cond_dropout must lie in [0, 1]")
        if self.num_blocks < 1:
            raise ConfigError("num_blocks must be >= 1")

    @property
    def conditional(self) -> bool:
        return self.cond_mode != "none"

    @property
    def mlp_groups(self) -> tuple[str, ...]:
        return MLP_GROUPS

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d


@dataclass(frozen=True)
class LossConfig:
    """Diffusion loss variant and its training noise distribution.

    ``weighting`` names the per-sigma weight: ``"edm"`` is
    (sigma^2 + sigma_data^2) / (sigma * sigma_data)^2, ``"ddpm"`` mixes
    signal and noise with alpha(sigma) = 1 / (1 + sigma^2) and regresses the
    noise directly.
    """

    variant: Literal["edm", "ddpm"] = "edm"
    p_mean: float = -1.2
    p_std: float = 1.2
    sigma_data: float = 0.5
    weighting: str = ""

    def __post_init__(self):
        if self.variant not in ("edm", "ddpm"):
            raise ConfigError(f"unknown loss variant {self.variant!r}")
        if not self.p_std > 0:
            raise ConfigError("p_std must be > 0")
        if not self.sigma_data > 0:
            raise ConfigError("sigma_data must be > 0")
        if not self.weighting:
            object.__setattr__(self, "weighting", self.variant)
        if self.weighting != self.variant:
            raise ConfigError(f"weighting {self.weighting!r} does not match variant {self.variant!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class NoiseDraw:
    sigma: float
    n: np.ndarray

    def __post_init__(self):
        if not self.sigma > 0:
            raise ConfigError(f"sigma must be > 0, got {self.sigma}")


@dataclass(frozen=True)
class GenerationSchedule:
    sigma_min: float
    sigma_max: float
    rho: float
    num_steps: int
    values: tuple[float, ...] = field(repr=False)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


def build_generation_schedule(sigma_min: float = 0.002, sigma_max: float = 80.0,
                              rho: float = 7.0, num_steps: int = 32) -> GenerationSchedule:
    """Descending sigma schedule interpolated in sigma**(1/rho) space."""
    if not (0 < sigma_min < sigma_max) or not math.isfinite(sigma_max):
        raise ConfigError(f"need 0 < sigma_min < sigma_max, got {sigma_min}, {sigma_max}")
    if num_steps < 2:
        raise ConfigError("num_steps must be >= 2")
    if not rho > 0:
        raise ConfigError("rho must be > 0")
    ramp = np.arange(num_steps, dtype=np.float64) / (num_steps - 1)
    lo, hi = sigma_min ** (1 / rho), sigma_max ** (1 / rho)
    values = (hi + ramp * (lo - hi)) ** rho
    # pin endpoints against pow round-off
    values[0], values[-1] = sigma_max, sigma_min
    return GenerationSchedule(float(sigma_min), float(sigma_max), float(rho), int(num_steps),
                              tuple(float(v) for v in values))


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 6000
    batch_size: int = 128
    lr: float = 1e-3
    warmup: int = 200
    ema: float = 0.995
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.steps < 0 or self.batch_size < 1 or self.warmup < 0:
            raise ConfigError("steps/warmup must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.ema < 1.0:
            raise ConfigError("ema momentum must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d
