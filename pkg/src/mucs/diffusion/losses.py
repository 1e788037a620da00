"""Per-sample diffusion losses and training-noise draws."""

from __future__ import annotations

import math
from typing import Callable

import numpy as np
import torch

from .config import ConfigError, LossConfig, NoiseDraw
from .network import Denoiser

CleanPredictor = Callable[[torch.Tensor, torch.Tensor, "torch.Tensor | None"], torch.Tensor]


class NonFiniteLossError(FloatingPointError):
    def __init__(self, message: str, sigma: float | None = None):
        super().__init__(message)
        self.sigma = sigma


def _bcast(sigma: torch.Tensor, ndim: int) -> torch.Tensor:
    return sigma.reshape(-1, *([1] * (ndim - 1)))


def edm_weight(sigma: torch.Tensor, sigma_data: float) -> torch.Tensor:
    return (sigma ** 2 + sigma_data ** 2) / (sigma * sigma_data) ** 2


def denoise(net: Denoiser, x_noisy: torch.Tensor, sigma: torch.Tensor, cond, loss: LossConfig) -> torch.Tensor:
    """Clean-data estimate D(x + sigma n; sigma, c) for either loss variant."""
    s = _bcast(sigma, x_noisy.ndim)
    c_noise = sigma.log() / 4
    if loss.variant == "edm":
        sd2 = loss.sigma_data ** 2
        c_skip = sd2 / (s ** 2 + sd2)
        c_out = s * loss.sigma_data / (s ** 2 + sd2).sqrt()
        c_in = 1 / (s ** 2 + sd2).sqrt()
        return c_skip * x_noisy + c_out * net(c_in * x_noisy, c_noise, cond)
    eps = net(x_noisy / (1 + s ** 2).sqrt(), c_noise, cond)
    return x_noisy - s * eps


def per_sample_loss(model: "Denoiser | CleanPredictor", x: torch.Tensor, cond, sigma: torch.Tensor,
                    n: torch.Tensor, loss: LossConfig) -> torch.Tensor:
    """Weighted squared error per sample, averaged over data dimensions only.

    ``model`` is either a raw :class:`Denoiser` or any callable mapping
    ``(x_noisy, sigma, cond)`` to a clean-data estimate.
    """
    dims = tuple(range(1, x.ndim))
    s = _bcast(sigma, x.ndim)
    if isinstance(model, Denoiser):
        if loss.variant == "ddpm":
            alpha = 1 / (1 + s ** 2)
            eps = model(alpha.sqrt() * x + (1 - alpha).sqrt() * n, sigma.log() / 4, cond)
            return (n - eps).pow(2).mean(dims)
        d = denoise(model, x + s * n, sigma, cond, loss)
    else:
        d = model(x + s * n, sigma, cond)
    err = (d - x).pow(2).mean(dims)
    if loss.variant == "edm":
        return edm_weight(sigma, loss.sigma_data) * err
    return err / sigma ** 2


def draw_noise(count: int, shape: tuple[int, ...], loss: LossConfig,
               gen: torch.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    """``count`` log-normal sigmas and standard-normal noise tensors."""
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    g = torch.randn(count, generator=gen, dtype=torch.float64)
    sigma = torch.exp(loss.p_mean + loss.p_std * g).float()
    n = torch.randn((count, *shape), generator=gen)
    return sigma, n


def sample_training_noise(count: int, loss: LossConfig, stream, shape: tuple[int, ...]) -> list[NoiseDraw]:
    sigma, n = draw_noise(count, tuple(shape), loss, stream.torch())
    return [NoiseDraw(float(s), v.numpy()) for s, v in zip(sigma, n)]


def _cond_tensor(c, arch) -> torch.Tensor | None:
    if not arch.conditional or c is None:
        return None
    if arch.cond_mode == "class":
        return torch.as_tensor([int(c)], dtype=torch.long)
    return torch.as_tensor(np.asarray(c, dtype=np.float32)).reshape(1, -1)


def diffusion_loss(instance, draw: NoiseDraw, model) -> float:
    """L(z, sigma, n, F) for one training instance and one noise draw."""
    arch = model.arch
    x = np.asarray(instance.x, dtype=np.float32)
    if x.shape != arch.input_shape:
        raise ValueError(f"instance shape {x.shape} does not match arch {arch.input_shape}")
    if np.shape(draw.n) != x.shape:
        raise ValueError(f"noise shape {np.shape(draw.n)} does not match data {x.shape}")
    with torch.no_grad():
        value = per_sample_loss(
            model.module(), torch.tensor(x)[None], _cond_tensor(instance.c, arch),
            torch.tensor([draw.sigma], dtype=torch.float32),
            torch.tensor(np.asarray(draw.n, dtype=np.float32))[None], model.loss)
    out = float(value[0])
    if not math.isfinite(out):
        raise NonFiniteLossError(f"non-finite loss at sigma={draw.sigma}", sigma=draw.sigma)
    return out
